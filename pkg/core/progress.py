"""Omniscient progress tracking: which times can still occur at each processor.

Pointstamps are seeded from queued messages, pending notifications and
source batches not yet ingested, then pushed along every output edge through
the sender's send delay, the edge's time stamping and the receiver's time
mapping until the minimal possible times settle.  A time is complete at a
processor once no possible time lies at or below it.
"""

from __future__ import annotations

import logging
from collections import deque
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

from core.graph_model import EdgeDecl, GraphSpec, receive_time, stamp_time
from core.logical_time import Frontier, LogicalTime, complement_of_upset, time_le
from core.processor import ChannelMessage, Processor

logger = logging.getLogger(__name__)


def _insert_minimal(current: list[LogicalTime], t: LogicalTime) -> list[LogicalTime] | None:
    """``current`` with ``t`` added as a minimal element, or None when already covered."""
    if any(time_le(m, t) for m in current):
        return None
    return [m for m in current if not time_le(t, m)] + [t]


@dataclass
class ProgressSnapshot:
    """Progress information for one instant of a run."""

    tracker: ProgressTracker
    processors: Mapping[str, Processor]
    channels: Mapping[str, list[ChannelMessage]]
    source_times: Mapping[str, list[LogicalTime]]
    _possible: dict[str, list[LogicalTime]] | None = field(default=None, repr=False)

    @property
    def possible(self) -> dict[str, list[LogicalTime]]:
        if self._possible is None:
            self._possible = self.tracker.possible_times(
                self.processors, self.channels, self.source_times
            )
        return self._possible

    def completed(self, pid: str) -> Frontier:
        """C(p): the times no future event at ``pid`` can be at or below."""
        domain = self.tracker.graph.domain_of(pid)
        return complement_of_upset(domain, self.possible[pid])

    def deliverable_notifications(self, pid: str) -> list[LogicalTime]:
        """Pending notifications of ``pid`` that may be delivered now, least first."""
        pending = self.processors[pid].pending_notifications
        if not pending:
            return []
        possible = self.tracker.possible_times(
            self.processors, self.channels, self.source_times, skip_notifications_of=pid
        )[pid]
        ready = [
            t
            for t in pending
            if not any(time_le(m, t) for m in possible)
            and not any(other != t and time_le(other, t) for other in pending)
        ]
        return sorted(ready, key=lambda t: t.text)


class ProgressTracker:
    def __init__(self, graph: GraphSpec) -> None:
        self.graph = graph

    def snapshot(
        self,
        processors: Mapping[str, Processor],
        channels: Mapping[str, Iterable[ChannelMessage]],
        source_times: Mapping[str, Iterable[LogicalTime]],
    ) -> ProgressSnapshot:
        return ProgressSnapshot(
            self,
            processors,
            {edge: list(messages) for edge, messages in channels.items()},
            {pid: list(times) for pid, times in source_times.items()},
        )

    def _summary(self, processor: Processor, edge: EdgeDecl, t: LogicalTime) -> LogicalTime:
        """Earliest event time at the receiver of a message caused by an event at ``t``."""
        target = self.graph.domain_of(edge.dst)
        sent_at = t.advance(processor.decl.behavior.delay)
        stamped = stamp_time(
            edge.projection,
            sent_at,
            target,
            edge.id,
            processor.sent[edge.id],
            processor.processed + 1,
        )
        return receive_time(edge.projection, stamped)

    def possible_times(
        self,
        processors: Mapping[str, Processor],
        channels: Mapping[str, Iterable[ChannelMessage]],
        source_times: Mapping[str, Iterable[LogicalTime]],
        skip_notifications_of: str | None = None,
    ) -> dict[str, list[LogicalTime]]:
        """Minimal possible future event times per processor."""
        minimal: dict[str, list[LogicalTime]] = {pid: [] for pid in self.graph.processor_ids}
        work: deque[tuple[str, LogicalTime]] = deque()

        def add(pid: str, t: LogicalTime) -> None:
            updated = _insert_minimal(minimal[pid], t)
            if updated is not None:
                minimal[pid] = updated
                work.append((pid, t))

        for eid, messages in channels.items():
            edge = self.graph.edge(eid)
            for message in messages:
                add(edge.dst, receive_time(edge.projection, message.time))
        for pid, processor in processors.items():
            if pid == skip_notifications_of:
                continue
            for t in processor.pending_notifications:
                add(pid, t)
        for pid, times in source_times.items():
            for t in times:
                add(pid, t)

        while work:
            pid, t = work.popleft()
            if t not in minimal[pid]:
                continue
            processor = processors[pid]
            for edge in self.graph.out_edges(pid):
                add(edge.dst, self._summary(processor, edge, t))
        return minimal
