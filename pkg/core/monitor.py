"""Watermark monitor: garbage collection driven by persisted checkpoint metadata.

The monitor sees only persisted records (and the completion reports of
processors that can restore anywhere).  Running the rollback choice over
that view with nobody at TOP yields, per processor, a frontier it can never
roll back below: its watermark.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from core.checkpoint_store import (
    AvailableFrontiers,
    CheckpointMetadata,
    external_ack_metadata,
    restores_anywhere,
)
from core.config import MonitorConfig
from core.graph_model import ExternalRole, GraphSpec
from core.logical_time import Frontier
from core.rollback import SystemSnapshot, choose_frontiers

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WatermarkAdvance:
    processor: str
    frontier: Frontier

    @property
    def text(self) -> str:
        return f"watermark {self.processor} {self.frontier}"


@dataclass(frozen=True)
class GcActions:
    """Records a processor may delete and upstream logs that may be trimmed."""

    processor: str
    watermark: Frontier
    collect: tuple[Frontier, ...]
    trim: tuple[tuple[str, Frontier], ...]


@dataclass(frozen=True)
class ExternalAction:
    """``ack-input`` releases source batches; ``persisted`` records an egress ack."""

    kind: str
    processor: str
    frontier: Frontier


class GcMonitor:
    def __init__(self, graph: GraphSpec, config: MonitorConfig = MonitorConfig()) -> None:
        self.graph = graph
        self.config = config
        self._chains: dict[str, list[Frontier]] = {}
        self._metadata: dict[str, dict[Frontier, CheckpointMetadata]] = {}
        self._ceilings: dict[str, Frontier] = {}
        self._watermarks: dict[str, Frontier] = {}
        for pid in graph.processor_ids:
            empty = Frontier.empty(graph.domain_of(pid))
            self._chains[pid] = [empty]
            self._metadata[pid] = {}
            self._watermarks[pid] = empty
            if restores_anywhere(graph, pid):
                self._ceilings[pid] = empty

    @property
    def watermarks(self) -> dict[str, Frontier]:
        return dict(self._watermarks)

    def snapshot(self) -> SystemSnapshot:
        """The persisted view: every processor treated as failed."""
        available = {
            pid: AvailableFrontiers(pid, tuple(self._chains[pid]), self._ceilings.get(pid))
            for pid in self.graph.processor_ids
        }
        return SystemSnapshot(
            self.graph,
            available,
            {pid: dict(m) for pid, m in self._metadata.items()},
            frozenset(self.graph.processor_ids),
        )

    def ingest(self, meta: CheckpointMetadata) -> list[WatermarkAdvance]:
        """Add a persisted record (or a completion report) and recompute watermarks."""
        pid = meta.processor
        problems = meta.problems()
        if problems:
            logger.warning("Rejected metadata from %s at %s", pid, meta.f)
            for problem in problems:
                logger.warning("  %s", problem)
            return []
        if pid in self._ceilings:
            if meta.f <= self._ceilings[pid]:
                return []
            self._ceilings[pid] = self._ceilings[pid] | meta.f
        else:
            chain = self._chains[pid]
            if meta.f in chain:
                return []
            if not chain[-1] < meta.f:
                logger.warning(
                    "Ignored out-of-order record from %s: %s after %s", pid, meta.f, chain[-1]
                )
                return []
            chain.append(meta.f)
            self._metadata[pid][meta.f] = meta
        return self._recompute()

    def _recompute(self) -> list[WatermarkAdvance]:
        snapshot = self.snapshot()
        seed = None if self.config.incremental else self.graph.processor_ids
        assignment = choose_frontiers(snapshot, seed)
        advances: list[WatermarkAdvance] = []
        for pid in self.graph.processor_ids:
            new, old = assignment.f[pid], self._watermarks[pid]
            if new == old:
                continue
            if not old <= new:
                logger.warning("Watermark of %s would move from %s to %s; kept", pid, old, new)
                continue
            self._watermarks[pid] = new
            advances.append(WatermarkAdvance(pid, new))
            logger.info("Watermark %s -> %s", pid, new)
        return advances

    def truncate(self, pid: str, f: Frontier) -> None:
        """Forget records of ``pid`` beyond ``f`` after it rolled back there."""
        if f.is_top:
            return
        self._chains[pid] = [g for g in self._chains[pid] if g <= f]
        self._metadata[pid] = {g: m for g, m in self._metadata[pid].items() if g <= f}
        if pid in self._ceilings:
            self._ceilings[pid] = self._ceilings[pid] & f

    def authorize_gc(self, pid: str, watermark: Frontier) -> GcActions:
        """Records of ``pid`` below ``watermark`` and the upstream log prefixes now unneeded."""
        chain = self._chains[pid]
        # the empty frontier stays in the chain so the rollback choice remains total
        doomed = tuple(f for f in chain if f < watermark and not f.is_empty)
        self._chains[pid] = [f for f in chain if f not in doomed]
        for f in doomed:
            self._metadata[pid].pop(f, None)
        trim = tuple((edge.id, watermark) for edge in self.graph.in_edges(pid))
        return GcActions(pid, watermark, doomed, trim)

    def handle_io_watermark(
        self, pid: str, f: Frontier
    ) -> tuple[list[ExternalAction], list[WatermarkAdvance]]:
        """External effects of an ingress watermark or an egress acknowledged through ``f``.

        An egress frontier is ingested as a persisted record with no state, which
        may in turn advance other watermarks.
        """
        role = self.graph.processor(pid).role
        if role is ExternalRole.INGRESS:
            return [ExternalAction("ack-input", pid, f)], []
        if role is ExternalRole.EGRESS:
            advances = self.ingest(external_ack_metadata(self.graph, pid, f))
            return [ExternalAction("persisted", pid, f)], advances
        return [], []
