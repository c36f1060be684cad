"""Processor runtime: event delivery, history recording and selective replay."""

from __future__ import annotations

import logging
import random
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from typing import Any

from core.behaviors import SINK_EDGE, SOURCE_EDGE, Behavior, State, build_behavior
from core.graph_model import (
    GraphSpec,
    ProcessorDecl,
    ProjectionContext,
    ProjectionKind,
    stamp_time,
)
from core.logical_time import Frontier, LogicalTime, time_le

logger = logging.getLogger(__name__)


class DeliveryError(Exception):
    """Raised when an event cannot be delivered to a processor."""


class ReplayError(Exception):
    """Raised when a history replay is requested for a non-deterministic behavior."""


@dataclass(frozen=True)
class Message:
    time: LogicalTime
    payload: Any
    edge: str

    @property
    def text(self) -> str:
        return f"msg {self.edge} {self.time.text}"


@dataclass(frozen=True)
class Notification:
    time: LogicalTime

    @property
    def text(self) -> str:
        return f"notify {self.time.text}"


Event = Message | Notification


@dataclass(frozen=True)
class ChannelMessage:
    """A message in flight or in a log; ``time`` is the time it carries on ``edge``."""

    edge: str
    time: LogicalTime
    payload: Any


@dataclass(frozen=True)
class HistoryEntry:
    event: Event
    sends: tuple[ChannelMessage, ...] = ()


@dataclass
class ReplayResult:
    state: State
    sends: dict[str, list[ChannelMessage]] = field(default_factory=dict)


def can_dequeue(queue_times: Sequence[LogicalTime], index: int) -> bool:
    """Whether the message at ``index`` (zero-based) may overtake every earlier one."""
    target = queue_times[index]
    return not any(time_le(t, target) for t in queue_times[:index])


def filter_history(history: Iterable[HistoryEntry], f: Frontier) -> list[HistoryEntry]:
    """H@f: the entries whose event time lies in ``f``, in their original order."""
    return [entry for entry in history if f.contains(entry.event.time)]


class Processor:
    """Live state of one processor inside the simulator."""

    def __init__(self, decl: ProcessorDecl, graph: GraphSpec, seed: int = 0) -> None:
        self.decl = decl
        self.graph = graph
        self.seed = seed
        out_edges = graph.out_edges(decl.id)
        self.outputs = tuple(e.id for e in out_edges)
        self.exits = tuple(
            e.id for e in out_edges if e.projection.kind is ProjectionKind.LOOP_EGRESS
        )
        self.incarnation = 0
        self.failed = False
        # GC'd log prefixes per output edge, in receiver time
        self.log_floor: dict[str, Frontier] = {}
        self.behavior = self._build()
        self.state: State = self.behavior.initial_state()
        self.history: list[HistoryEntry] = []
        self.pending_notifications: set[LogicalTime] = set()
        self.sent: dict[str, int] = defaultdict(int)
        self.epoch_counts: dict[str, dict[int, int]] = defaultdict(dict)
        self.processed = 0

    @property
    def id(self) -> str:
        return self.decl.id

    def _build(self) -> Behavior:
        rng = random.Random(f"{self.seed}:{self.decl.id}:{self.incarnation}")
        return build_behavior(self.decl.behavior, self.decl.domain, self.outputs, self.exits, rng)

    # ── delivery ──────────────────────────────────────────────────

    def receive(self, message: ChannelMessage) -> list[ChannelMessage]:
        """Deliver a channel message, mapping its carried time to an event time."""
        time = self.graph.receive_time(message.edge, message.time)
        return self.deliver(Message(time, message.payload, message.edge))

    def deliver(self, event: Event) -> list[ChannelMessage]:
        if self.failed:
            raise DeliveryError(f"delivery to failed processor {self.id}")
        if event.time.domain != self.decl.domain:
            raise DeliveryError(
                f"{event.text} is outside the {self.decl.domain.describe()} domain of {self.id}"
            )
        sends = self._apply(event)
        logger.debug("  %s <- %s (%d sends)", self.id, event.text, len(sends))
        return sends

    def _apply(self, event: Event) -> list[ChannelMessage]:
        if isinstance(event, Message):
            self.processed += 1
            raw = self.behavior.on_message(self.state, event.edge, event.time, event.payload)
            if self.behavior.requests_notifications and event.edge != SOURCE_EDGE:
                self.pending_notifications.add(event.time)
        else:
            self.pending_notifications.discard(event.time)
            raw = self.behavior.on_notification(self.state, event.time)
        stamped: list[ChannelMessage] = []
        for send in raw:
            if send.edge == SINK_EDGE:
                stamped.append(ChannelMessage(SINK_EDGE, send.time, send.payload))
                continue
            edge = self.graph.edge(send.edge)
            target = self.graph.domain_of(edge.dst)
            time = stamp_time(
                edge.projection, send.time, target, edge.id, self.sent[edge.id], self.processed
            )
            self.sent[edge.id] += 1
            if edge.projection.kind is ProjectionKind.EPOCH_TO_SEQ:
                counts = self.epoch_counts[edge.id]
                epoch = send.time.coords[0]
                counts[epoch] = counts.get(epoch, 0) + 1
            stamped.append(ChannelMessage(edge.id, time, send.payload))
        self.history.append(HistoryEntry(event, tuple(stamped)))
        return stamped

    # ── recorded counts ───────────────────────────────────────────

    def projection_context(
        self, edge: str, entries: Sequence[HistoryEntry] | None = None
    ) -> ProjectionContext:
        """Counts behind a history projection, live or over ``entries``."""
        if entries is None:
            return ProjectionContext(
                sent=self.sent[edge],
                epoch_counts=tuple(sorted(self.epoch_counts[edge].items())),
                processed=self.processed,
            )
        sent = 0
        processed = 0
        epochs: dict[int, int] = {}
        for entry in entries:
            if isinstance(entry.event, Message):
                processed += 1
            for message in entry.sends:
                if message.edge != edge:
                    continue
                sent += 1
                epoch = entry.event.time.coords[0]
                epochs[epoch] = epochs.get(epoch, 0) + 1
        return ProjectionContext(
            sent=sent, epoch_counts=tuple(sorted(epochs.items())), processed=processed
        )

    def sends_on(
        self, edge: str, entries: Sequence[HistoryEntry] | None = None
    ) -> list[ChannelMessage]:
        """msgs_e of ``entries`` (default: the live history) in send order."""
        source = self.history if entries is None else entries
        return [m for entry in source for m in entry.sends if m.edge == edge]

    def logged_messages(self, edge: str) -> list[ChannelMessage]:
        """Live log for ``edge``: every send not yet garbage collected."""
        floor = self.log_floor.get(edge)
        messages = self.sends_on(edge)
        if floor is None:
            return messages
        return [m for m in messages if not floor.contains(self.graph.receive_time(edge, m.time))]

    def trim_log(self, edge: str, frontier: Frontier) -> None:
        floor = self.log_floor.get(edge)
        self.log_floor[edge] = frontier if floor is None else floor | frontier

    # ── failure and rollback ──────────────────────────────────────

    def fail(self) -> None:
        """Lose all volatile state."""
        self.failed = True
        self.incarnation += 1
        self.behavior = self._build()
        self._reset(self.behavior.initial_state(), [])

    def restore(self, state: State, history: Iterable[HistoryEntry]) -> None:
        """Resume with ``state`` and ``history``; pending notifications are regenerated."""
        self.failed = False
        self._reset(state, list(history))

    def restrict_to(self, f: Frontier) -> State:
        return self.behavior.restrict(self.state, f)

    def _reset(self, state: State, history: list[HistoryEntry]) -> None:
        self.state = state
        self.history = history
        self.pending_notifications = set()
        self.sent = defaultdict(int)
        self.epoch_counts = defaultdict(dict)
        self.processed = 0
        for entry in history:
            if isinstance(entry.event, Message):
                self.processed += 1
            for message in entry.sends:
                if message.edge == SINK_EDGE:
                    continue
                self.sent[message.edge] += 1
                if self.graph.edge(message.edge).projection.kind is ProjectionKind.EPOCH_TO_SEQ:
                    counts = self.epoch_counts[message.edge]
                    epoch = entry.event.time.coords[0]
                    counts[epoch] = counts.get(epoch, 0) + 1
        if self.behavior.requests_notifications:
            # times that received messages but were not yet notified
            seen = {
                entry.event.time
                for entry in history
                if isinstance(entry.event, Message) and entry.event.edge != SOURCE_EDGE
            }
            notified = {
                entry.event.time for entry in history if isinstance(entry.event, Notification)
            }
            self.pending_notifications = seen - notified


def replay_filtered(
    decl: ProcessorDecl, graph: GraphSpec, history: Iterable[HistoryEntry]
) -> ReplayResult:
    """Re-execute ``history`` from the initial state.

    Returns the resulting state and the messages sent per output edge.
    """
    if not decl.behavior.is_deterministic:
        raise ReplayError(f"{decl.id} is non-deterministic and cannot be replayed")
    replica = Processor(decl, graph)
    sends: dict[str, list[ChannelMessage]] = {edge: [] for edge in replica.outputs}
    for entry in history:
        for message in replica._apply(entry.event):
            sends.setdefault(message.edge, []).append(message)
    return ReplayResult(replica.state, sends)
