"""Checkpoint records, message logs, frontier metadata and the simulated durable store.

Every processor owns a chain of records at strictly increasing frontiers.
The empty frontier is always available and is never stored: rolling back to
it means restarting from the initial state.
"""

from __future__ import annotations

import json
import logging
import os
import random
import tempfile
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from core.behaviors import BEHAVIORS, canonical_json
from core.config import StorageConfig
from core.graph_model import EXACT_PULLBACK, ExternalRole, GraphSpec, ProcessorDecl
from core.logical_time import Frontier, downward_close
from core.processor import (
    ChannelMessage,
    HistoryEntry,
    Message,
    Notification,
    Processor,
    filter_history,
    replay_filtered,
)
from policies.checkpoint_policies import PolicyKind

logger = logging.getLogger(__name__)


class CheckpointRejected(Exception):
    """Raised when a checkpoint request is not complete or does not extend the chain."""


class MetadataError(Exception):
    """Raised when the default approximations cannot describe a processor soundly."""


@dataclass(frozen=True)
class CheckpointMetadata:
    """Frontier estimates recorded with a checkpoint at ``f``.

    ``mbar`` is keyed by input edge and lives in the processor's domain;
    ``dbar`` and ``phi`` are keyed by output edge and live in the receiver's.
    """

    processor: str
    f: Frontier
    nbar: Frontier
    mbar: Mapping[str, Frontier] = field(default_factory=dict)
    dbar: Mapping[str, Frontier] = field(default_factory=dict)
    phi: Mapping[str, Frontier] = field(default_factory=dict)

    def problems(self) -> list[str]:
        found: list[str] = []
        if not self.nbar <= self.f:
            found.append(f"notified {self.nbar} of {self.processor} exceeds {self.f}")
        for edge, frontier in self.mbar.items():
            if not frontier <= self.f:
                found.append(f"delivered({edge}) {frontier} of {self.processor} exceeds {self.f}")
        for edge, frontier in self.dbar.items():
            bound = self.phi.get(edge)
            if bound is None or not frontier <= bound:
                found.append(
                    f"discarded({edge}) {frontier} of {self.processor} exceeds projection {bound}"
                )
        return found

    def to_dict(self) -> dict[str, Any]:
        return {
            "f": self.f.text,
            "nbar": self.nbar.text,
            "mbar": {e: f.text for e, f in sorted(self.mbar.items())},
            "dbar": {e: f.text for e, f in sorted(self.dbar.items())},
            "phi": {e: f.text for e, f in sorted(self.phi.items())},
        }


@dataclass
class CheckpointRecord:
    meta: CheckpointMetadata
    state: bytes = b""
    logs: dict[str, list[ChannelMessage]] = field(default_factory=dict)
    history: tuple[HistoryEntry, ...] = ()
    persisted: bool = False

    @property
    def processor(self) -> str:
        return self.meta.processor

    @property
    def frontier(self) -> Frontier:
        return self.meta.f

    def to_dict(self) -> dict[str, Any]:
        return {
            **self.meta.to_dict(),
            "persisted": self.persisted,
            "state": self.state.decode() if self.state else None,
            "logs": {
                edge: [[m.time.text, m.payload] for m in messages]
                for edge, messages in sorted(self.logs.items())
            },
        }


@dataclass(frozen=True)
class AvailableFrontiers:
    """The frontiers a processor can restore, as an increasing chain.

    Processors that keep no state between times can also restore any
    frontier below ``ceiling``.
    """

    processor: str
    frontiers: tuple[Frontier, ...]
    ceiling: Frontier | None = None

    def __post_init__(self) -> None:
        if not self.frontiers or not self.frontiers[0].is_empty:
            raise ValueError(f"available frontiers of {self.processor} must start at EMPTY")
        for lower, upper in zip(self.frontiers, self.frontiers[1:]):
            if not lower < upper:
                raise ValueError(
                    f"available frontiers of {self.processor} are not a chain: {lower} then {upper}"
                )

    @property
    def maximum(self) -> Frontier:
        top = self.frontiers[-1]
        if self.ceiling is not None and not self.ceiling <= top:
            return self.ceiling
        return top

    def admits(self, g: Frontier) -> bool:
        return g in self.frontiers or (self.ceiling is not None and g <= self.ceiling)


# ── metadata ──────────────────────────────────────────────────────


def restores_anywhere(graph: GraphSpec, pid: str) -> bool:
    """True for processors that can resume at any completed frontier.

    Such processors keep no state between times, record nothing, send at the
    time of the causing event over projections with an exact pullback and
    write nothing externally.
    """
    decl = graph.processor(pid)
    return (
        BEHAVIORS[decl.behavior.kind].stateless
        and decl.policy.kind is PolicyKind.EPHEMERAL
        and not decl.policy.log_outputs
        and decl.behavior.delay == 0
        and decl.role is not ExternalRole.EGRESS
        and all(e.projection.kind in EXACT_PULLBACK for e in graph.out_edges(pid))
    )


def phi_at(
    processor: Processor, f: Frontier, entries: Sequence[HistoryEntry] | None = None
) -> dict[str, Frontier]:
    """Projection of ``f`` along every output edge, counting history over ``entries``."""
    graph = processor.graph
    phi: dict[str, Frontier] = {}
    for edge in graph.out_edges(processor.id):
        context = None
        if edge.projection.history_dependent:
            context = processor.projection_context(edge.id, entries)
        phi[edge.id] = graph.project(edge.id, f, context)
    return phi


def default_metadata(
    decl: ProcessorDecl, graph: GraphSpec, f: Frontier, phi: Mapping[str, Frontier]
) -> CheckpointMetadata:
    """Conservative estimates: delivered and notified up to ``f``, discarded up to the
    projection (nothing when the processor logs its outputs)."""
    if decl.behavior.delay and not decl.policy.logs_everything:
        raise MetadataError(
            f"{decl.id} sends into the future; its discarded messages must be tracked exactly"
        )
    dbar = {
        edge.id: (
            Frontier.empty(graph.domain_of(edge.dst))
            if decl.policy.logs_everything
            else phi[edge.id]
        )
        for edge in graph.out_edges(decl.id)
    }
    return CheckpointMetadata(
        processor=decl.id,
        f=f,
        nbar=f,
        mbar={edge.id: f for edge in graph.in_edges(decl.id)},
        dbar=dbar,
        phi=dict(phi),
    )


def exact_metadata(
    decl: ProcessorDecl,
    graph: GraphSpec,
    f: Frontier,
    entries: Sequence[HistoryEntry],
    phi: Mapping[str, Frontier],
) -> CheckpointMetadata:
    """Smallest frontiers containing the delivered, notified and discarded times of ``entries``."""
    domain = decl.domain
    mbar = {
        edge.id: downward_close(
            domain,
            (
                entry.event.time
                for entry in entries
                if isinstance(entry.event, Message) and entry.event.edge == edge.id
            ),
        )
        for edge in graph.in_edges(decl.id)
    }
    nbar = downward_close(
        domain, (entry.event.time for entry in entries if isinstance(entry.event, Notification))
    )
    dbar: dict[str, Frontier] = {}
    for edge in graph.out_edges(decl.id):
        target = graph.domain_of(edge.dst)
        if decl.policy.logs_everything:
            dbar[edge.id] = Frontier.empty(target)
            continue
        dbar[edge.id] = downward_close(
            target,
            (
                graph.receive_time(edge.id, m.time)
                for entry in entries
                for m in entry.sends
                if m.edge == edge.id
            ),
        )
    return CheckpointMetadata(decl.id, f, nbar, mbar, dbar, dict(phi))


def live_metadata(processor: Processor) -> CheckpointMetadata:
    """Metadata for restoring a live processor at TOP, i.e. keeping its current state."""
    top = Frontier.top(processor.decl.domain)
    return exact_metadata(
        processor.decl, processor.graph, top, processor.history, phi_at(processor, top)
    )


def ceiling_metadata(graph: GraphSpec, pid: str, g: Frontier) -> CheckpointMetadata:
    """Metadata of a stateless processor restored at ``g`` without any record."""
    phi = {e.id: graph.project(e.id, g) for e in graph.out_edges(pid)}
    return CheckpointMetadata(
        processor=pid,
        f=g,
        nbar=g,
        mbar={edge.id: g for edge in graph.in_edges(pid)},
        dbar=dict(phi),
        phi=phi,
    )


def external_ack_metadata(graph: GraphSpec, pid: str, f: Frontier) -> CheckpointMetadata:
    """Metadata for an egress processor whose outputs up to ``f`` were acknowledged."""
    return CheckpointMetadata(
        processor=pid, f=f, nbar=f, mbar={edge.id: f for edge in graph.in_edges(pid)}
    )


# ── store ─────────────────────────────────────────────────────────


class CheckpointStore:
    """Simulated durable storage with randomized, in-order acknowledgements."""

    def __init__(
        self,
        graph: GraphSpec,
        rng: random.Random | None = None,
        config: StorageConfig = StorageConfig(),
    ) -> None:
        self.graph = graph
        self._rng = rng or random.Random(0)
        self._config = config
        self._persisted: dict[str, list[CheckpointRecord]] = {
            pid: [] for pid in graph.processor_ids
        }
        self._inflight: dict[str, list[tuple[int, CheckpointRecord]]] = {
            pid: [] for pid in graph.processor_ids
        }

    # ── queries ───────────────────────────────────────────────────

    def records(self, pid: str) -> list[CheckpointRecord]:
        return list(self._persisted[pid])

    def pending(self, pid: str) -> list[CheckpointRecord]:
        return [record for _, record in self._inflight[pid]]

    def available(
        self, pid: str, ceiling: Frontier | None = None, live: bool = False
    ) -> AvailableFrontiers:
        """Persisted frontiers of ``pid``; a live processor may also stay at TOP."""
        domain = self.graph.domain_of(pid)
        chain = [Frontier.empty(domain)]
        chain += [r.frontier for r in self._persisted[pid] if not r.frontier.is_empty]
        if live and not chain[-1].is_top:
            chain.append(Frontier.top(domain))
        return AvailableFrontiers(pid, tuple(chain), ceiling)

    def record_for(self, pid: str, f: Frontier) -> CheckpointRecord | None:
        for record in self._persisted[pid]:
            if record.frontier == f:
                return record
        return None

    def last_requested(self, pid: str) -> Frontier:
        if self._inflight[pid]:
            return self._inflight[pid][-1][1].frontier
        if self._persisted[pid]:
            return self._persisted[pid][-1].frontier
        return Frontier.empty(self.graph.domain_of(pid))

    # ── writes ────────────────────────────────────────────────────

    def take_checkpoint(
        self, processor: Processor, f: Frontier, completed: Frontier
    ) -> CheckpointRecord:
        """Build the record for ``f`` according to the processor's policy."""
        pid = processor.id
        if not f <= completed:
            raise CheckpointRejected(f"{pid}: {f} is not complete (completed {completed})")
        last = self.last_requested(pid)
        if not last < f:
            raise CheckpointRejected(f"{pid}: {f} does not extend the chain ending at {last}")
        decl = processor.decl
        policy = decl.policy
        entries = filter_history(processor.history, f)
        if policy.kind is PolicyKind.LOG_ALL_HISTORY:
            replay = replay_filtered(decl, self.graph, entries)
            state = processor.behavior.encode(replay.state)
            sends = replay.sends
        else:
            state = processor.behavior.encode(processor.restrict_to(f))
            sends = {edge: processor.sends_on(edge, entries) for edge in processor.outputs}
        logs: dict[str, list[ChannelMessage]] = {}
        if policy.logs_everything:
            for edge, messages in sends.items():
                floor = processor.log_floor.get(edge)
                logs[edge] = [
                    m
                    for m in messages
                    if floor is None or not floor.contains(self.graph.receive_time(edge, m.time))
                ]
        phi = phi_at(processor, f, entries)
        if policy.exact_metadata:
            meta = exact_metadata(decl, self.graph, f, entries, phi)
        else:
            meta = default_metadata(decl, self.graph, f, phi)
        record = CheckpointRecord(meta, state, logs, tuple(entries))
        logger.debug("  checkpoint %s at %s (%d history entries)", pid, f, len(entries))
        return record

    def storage_persist(self, record: CheckpointRecord, now: int) -> int:
        """Queue ``record`` for durable storage; returns the step its ack is due."""
        due = now + self._rng.randint(self._config.min_latency, self._config.max_latency)
        self._inflight[record.processor].append((due, record))
        return due

    def persist_now(self, record: CheckpointRecord) -> None:
        record.persisted = True
        self._persisted[record.processor].append(record)

    def acknowledge(self, now: int) -> list[CheckpointRecord]:
        """Apply every ack due by ``now``, in chain order per processor."""
        acked: list[CheckpointRecord] = []
        for pid, queue in self._inflight.items():
            while queue and queue[0][0] <= now:
                _, record = queue.pop(0)
                self.persist_now(record)
                acked.append(record)
                logger.debug("  storage ack %s at %s", pid, record.frontier)
        return acked

    def next_ack_due(self) -> int | None:
        heads = [queue[0][0] for queue in self._inflight.values() if queue]
        return min(heads) if heads else None

    def discard_inflight(self, pid: str) -> int:
        dropped = len(self._inflight[pid])
        self._inflight[pid] = []
        return dropped

    def truncate(self, pid: str, f: Frontier) -> None:
        """Keep only records at frontiers inside ``f``, as after a rollback to ``f``."""
        self._persisted[pid] = [r for r in self._persisted[pid] if r.frontier <= f]
        self._inflight[pid] = [(d, r) for d, r in self._inflight[pid] if r.frontier <= f]

    def collect(self, pid: str, watermark: Frontier) -> list[Frontier]:
        """Delete records strictly below ``watermark``; they can never be restored again."""
        doomed = [r.frontier for r in self._persisted[pid] if r.frontier < watermark]
        self._persisted[pid] = [r for r in self._persisted[pid] if not r.frontier < watermark]
        return doomed

    def trim_logs(self, edge: str, frontier: Frontier) -> int:
        """Drop logged messages on ``edge`` whose receiver time lies in ``frontier``."""
        src = self.graph.edge(edge).src
        trimmed = 0
        for record in self._persisted[src] + self.pending(src):
            messages = record.logs.get(edge)
            if not messages:
                continue
            kept = [
                m for m in messages if not frontier.contains(self.graph.receive_time(edge, m.time))
            ]
            trimmed += len(messages) - len(kept)
            record.logs[edge] = kept
        return trimmed

    # ── serialization ─────────────────────────────────────────────

    def dump(self) -> dict[str, Any]:
        return {
            "processors": {
                pid: [record.to_dict() for record in self._persisted[pid]]
                for pid in self.graph.processor_ids
            }
        }

    def dumps(self) -> str:
        return canonical_json(self.dump())

    def save(self, path: Path) -> None:
        """Atomically write the persisted records as JSON."""
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                json.dump(self.dump(), fh, indent=2, sort_keys=True)
            os.replace(tmp, path)
        except Exception:
            os.unlink(tmp)
            raise
