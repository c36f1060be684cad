"""Deterministic discrete-event simulation of a dataflow with failures and rollback.

One step performs one action: ingest an input batch, deliver a channel
message or deliver a notification.  Storage and sink acknowledgements fire
at the start of the step they fall due, followed by any failures scheduled
for that step; neither consumes a step.  All randomness comes from streams
derived from the scenario seed, so a scenario and seed fix the trace.
"""

from __future__ import annotations

import enum
import logging
import random
from dataclasses import dataclass, field, replace

from core.behaviors import SINK_EDGE, SOURCE_EDGE, canonical_json
from core.checkpoint_store import (
    CheckpointRecord,
    CheckpointStore,
    ceiling_metadata,
    external_ack_metadata,
    live_metadata,
    restores_anywhere,
)
from core.config import AppConfig, StorageConfig
from core.graph_model import ExternalRole, GraphSpec, validate_graph
from core.logical_time import Frontier, LogicalTime
from core.monitor import GcMonitor, WatermarkAdvance
from core.processor import (
    ChannelMessage,
    Message,
    Notification,
    Processor,
    can_dequeue,
    filter_history,
)
from core.progress import ProgressSnapshot, ProgressTracker
from core.rollback import (
    RollbackAssignment,
    RollbackError,
    SystemSnapshot,
    check_consistent,
    choose_frontiers,
    reset_state,
)
from core.trace import Trace
from policies.checkpoint_policies import PolicyKind
from tools.external_sink import ExternalSink, OutputBatch, SinkMode
from tools.external_source import ExternalSource, InputBatch

logger = logging.getLogger(__name__)


class StepLimitExceeded(Exception):
    """Raised when a run does not reach quiescence within the step limit."""

    def __init__(self, message: str, trace: Trace) -> None:
        super().__init__(message)
        self.trace = trace


class Schedule(str, enum.Enum):
    FIFO = "fifo"
    RANDOM = "random-eligible"


@dataclass(frozen=True)
class FailureSpec:
    step: int
    processors: tuple[str, ...]


@dataclass(frozen=True)
class SinkSettings:
    mode: SinkMode = SinkMode.ACKED
    latency: tuple[int, int] = (0, 0)


@dataclass(frozen=True)
class Scenario:
    graph: GraphSpec
    inputs: dict[str, list[InputBatch]] = field(default_factory=dict)
    failures: tuple[FailureSpec, ...] = ()
    seed: int = 0
    schedule: Schedule = Schedule.FIFO
    sinks: dict[str, SinkSettings] = field(default_factory=dict)
    step_limit: int | None = None
    storage: StorageConfig | None = None
    description: str = ""

    def without_failures(self) -> Scenario:
        return replace(self, failures=())


@dataclass(frozen=True)
class _Action:
    kind: str                       # "batch", "message" or "notify"
    ordinal: int
    processor: str
    edge: str = ""
    index: int = 0
    batch: InputBatch | None = None
    time: LogicalTime | None = None

    @property
    def sort_key(self) -> tuple[int, int, str, str]:
        rank = 1 if self.kind == "notify" else 0
        text = self.time.text if self.time is not None else ""
        return (rank, self.ordinal, self.processor, text)


class Simulator:
    def __init__(self, scenario: Scenario, config: AppConfig = AppConfig()) -> None:
        problems = validate_graph(scenario.graph)
        if problems:
            raise ValueError("invalid graph: " + "; ".join(problems))
        for failure in scenario.failures:
            unknown = [p for p in failure.processors if p not in scenario.graph.processor_ids]
            if unknown:
                raise ValueError(
                    f"failure at step {failure.step} names unknown processor {unknown[0]}"
                )
        self.scenario = scenario
        self.graph = graph = scenario.graph
        self.config = config
        self.step_limit = scenario.step_limit or config.simulation.step_limit
        seed = scenario.seed
        self._schedule_rng = random.Random(f"{seed}:schedule")
        self.processors = {
            decl.id: Processor(decl, graph, seed) for decl in graph.processors
        }
        self.channels: dict[str, list[tuple[int, ChannelMessage]]] = {
            edge.id: [] for edge in graph.edges
        }
        self.sources = {
            pid: ExternalSource(pid, scenario.inputs.get(pid, []))
            for pid in graph.processor_ids
            if graph.processor(pid).role is ExternalRole.INGRESS
        }
        self.sinks: dict[str, ExternalSink] = {}
        for pid in graph.processor_ids:
            if graph.processor(pid).role is ExternalRole.EGRESS:
                settings = scenario.sinks.get(pid, SinkSettings())
                self.sinks[pid] = ExternalSink(
                    pid, settings.mode, settings.latency, random.Random(f"{seed}:sink:{pid}")
                )
        self.store = CheckpointStore(
            graph, random.Random(f"{seed}:storage"), scenario.storage or config.storage
        )
        self.monitor = GcMonitor(graph, config.monitor)
        self.tracker = ProgressTracker(graph)
        self.trace = Trace()
        self.step = 0
        self.actions = 0
        self.last_snapshot: SystemSnapshot | None = None
        self.last_assignment: RollbackAssignment | None = None
        self._ordinal = 0
        self._batch_ordinals: dict[str, int] = {}
        self._sink_timers: list[tuple[int, int, str, OutputBatch]] = []
        self._failures = sorted(scenario.failures, key=lambda f: f.step)
        self._lazy: dict[str, int] = {pid: 0 for pid in graph.processor_ids}
        self._egress_reported = {
            pid: Frontier.empty(graph.domain_of(pid)) for pid in self.sinks
        }
        progress = self._progress()
        self.completed = {pid: progress.completed(pid) for pid in graph.processor_ids}

    # ── main loop ─────────────────────────────────────────────────

    def run(self) -> Trace:
        logger.info(
            "Running %d processors, %d edges (seed %d, %s)",
            len(self.graph.processors),
            len(self.graph.edges),
            self.scenario.seed,
            self.scenario.schedule.value,
        )
        while True:
            self._fire_timers()
            self._inject_failures()
            action = self._choose()
            if action is None:
                wakeup = self._next_wakeup()
                if wakeup is None:
                    break
                self.step = max(self.step + 1, wakeup)
                continue
            if self.actions >= self.step_limit:
                raise StepLimitExceeded(
                    f"no quiescence after {self.actions} steps", Trace(list(self.trace.lines))
                )
            self._perform(action)
            self.actions += 1
            self._after_action()
            self.step += 1
        for pid, processor in self.processors.items():
            state = processor.behavior.canonical(processor.state)
            self.trace.add("final", pid, canonical_json(state))
        self.trace.add("quiescent", self.step)
        logger.info("Quiescent after %d steps", self.actions)
        return self.trace

    def _progress(self) -> ProgressSnapshot:
        return self.tracker.snapshot(
            self.processors,
            {eid: [m for _, m in queue] for eid, queue in self.channels.items()},
            {pid: source.pending_times() for pid, source in self.sources.items()},
        )

    def _next_ordinal(self) -> int:
        self._ordinal += 1
        return self._ordinal

    def _next_wakeup(self) -> int | None:
        times = [t for t, *_ in self._sink_timers]
        due = self.store.next_ack_due()
        if due is not None:
            times.append(due)
        times += [f.step for f in self._failures]
        for source in self.sources.values():
            arrival = source.next_arrival()
            if arrival is not None:
                times.append(arrival)
        return min(times) if times else None

    # ── scheduling ────────────────────────────────────────────────

    def _candidates(self, progress: ProgressSnapshot | None) -> list[_Action]:
        fifo = self.scenario.schedule is Schedule.FIFO
        found: list[_Action] = []
        for eid, queue in self.channels.items():
            dst = self.graph.edge(eid).dst
            times = [m.time for _, m in queue]
            for index, (ordinal, message) in enumerate(queue):
                if fifo and index > 0:
                    break
                if can_dequeue(times, index):
                    found.append(_Action("message", ordinal, dst, eid, index, time=message.time))
        for pid, source in self.sources.items():
            batch = source.available(self.step)
            if batch is None:
                continue
            if batch.batch not in self._batch_ordinals:
                self._batch_ordinals[batch.batch] = self._next_ordinal()
            ordinal = self._batch_ordinals[batch.batch]
            found.append(_Action("batch", ordinal, pid, batch=batch, time=batch.time))
        if progress is not None:
            for pid in self.graph.processor_ids:
                for t in progress.deliverable_notifications(pid):
                    found.append(_Action("notify", 0, pid, time=t))
        return sorted(found, key=lambda a: a.sort_key)

    def _choose(self) -> _Action | None:
        if self.scenario.schedule is Schedule.RANDOM:
            candidates = self._candidates(self._progress())
            return self._schedule_rng.choice(candidates) if candidates else None
        candidates = self._candidates(None)
        if candidates:
            return candidates[0]
        notifications = self._candidates(self._progress())
        return notifications[0] if notifications else None

    def _perform(self, action: _Action) -> None:
        processor = self.processors[action.processor]
        if action.kind == "batch":
            batch = action.batch
            assert batch is not None
            self.sources[action.processor].take(batch)
            self._batch_ordinals.pop(batch.batch, None)
            self.trace.add("input", action.processor, batch.batch, batch.time)
            sends = processor.deliver(Message(batch.time, list(batch.payloads), SOURCE_EDGE))
        elif action.kind == "message":
            _, message = self.channels[action.edge].pop(action.index)
            time = self.graph.receive_time(action.edge, message.time)
            self.trace.add("deliver", action.processor, "msg", action.edge, time)
            sends = processor.receive(message)
        else:
            assert action.time is not None
            self.trace.add("deliver", action.processor, "notify", action.time)
            sends = processor.deliver(Notification(action.time))
        self._enqueue(action.processor, sends)

    def _enqueue(self, pid: str, sends: list[ChannelMessage]) -> None:
        for message in sends:
            if message.edge == SINK_EDGE:
                self._emit(pid, message)
            else:
                self.channels[message.edge].append((self._next_ordinal(), message))

    def _emit(self, pid: str, message: ChannelMessage) -> None:
        sink = self.sinks[pid]
        batch, due = sink.receive(message.time, list(message.payload), self.step)
        self.trace.output(sink.name, message.time.text, batch.key, list(batch.payloads))
        if due is not None:
            self._sink_timers.append((due, self._next_ordinal(), pid, batch))

    # ── completion, checkpoints and acknowledgements ──────────────

    def _after_action(self) -> None:
        progress = self._progress()
        for pid in self.graph.processor_ids:
            c = progress.completed(pid)
            old = self.completed[pid]
            if c <= old:
                continue
            self.completed[pid] = c
            self._on_completion(pid, c)

    def _on_completion(self, pid: str, c: Frontier) -> None:
        processor = self.processors[pid]
        decl = processor.decl
        if restores_anywhere(self.graph, pid):
            self._advance(self.monitor.ingest(ceiling_metadata(self.graph, pid, c)))
        if decl.role is ExternalRole.EGRESS:
            self._check_egress(pid)
        policy = decl.policy
        if not policy.takes_checkpoints:
            return
        if policy.kind is PolicyKind.LAZY_ON_COMPLETION:
            self._lazy[pid] += 1
            if self._lazy[pid] < policy.completions_per_checkpoint:
                return
            self._lazy[pid] = 0
        if not self.store.last_requested(pid) < c:
            return
        record = self.store.take_checkpoint(processor, c, c)
        self.store.storage_persist(record, self.step)
        self.trace.add("checkpoint", pid, c)

    def _fire_timers(self) -> None:
        for record in self.store.acknowledge(self.step):
            self.trace.add("persisted", record.processor, record.frontier)
            self._advance(self.monitor.ingest(record.meta))
        due = sorted(t for t in self._sink_timers if t[0] <= self.step)
        self._sink_timers = [t for t in self._sink_timers if t[0] > self.step]
        for _, _, pid, batch in due:
            self.sinks[pid].acknowledge(batch)
            self.trace.add("ack-output", batch.sink, batch.time)
            self._check_egress(pid)

    def _check_egress(self, pid: str) -> None:
        """Report the egress frontier once every output at its times is acknowledged."""
        processor = self.processors[pid]
        f = self.completed[pid]
        if processor.failed or f <= self._egress_reported[pid]:
            return
        entries = filter_history(processor.history, f)
        sink = self.sinks[pid]
        if sink.mode is SinkMode.ACKED:
            written = [m for entry in entries for m in entry.sends if m.edge == SINK_EDGE]
            if not all(sink.is_acked(m.time) for m in written):
                return
        self._egress_reported[pid] = f
        record = CheckpointRecord(
            external_ack_metadata(self.graph, pid, f), history=tuple(entries)
        )
        self.store.persist_now(record)
        actions, advances = self.monitor.handle_io_watermark(pid, f)
        for action in actions:
            self.trace.add(action.kind, action.processor, action.frontier)
        self._advance(advances)

    def _advance(self, advances: list[WatermarkAdvance]) -> None:
        for advance in advances:
            pid, wm = advance.processor, advance.frontier
            self.trace.add("watermark", pid, wm)
            gc = self.monitor.authorize_gc(pid, wm)
            collected = self.store.collect(pid, wm)
            if collected:
                self.trace.add("gc", pid, *collected)
            for eid, frontier in gc.trim:
                self.store.trim_logs(eid, frontier)
                self.processors[self.graph.edge(eid).src].trim_log(eid, frontier)
            if pid in self.sources:
                actions, _ = self.monitor.handle_io_watermark(pid, wm)
                for action in actions:
                    released = self.sources[pid].ack(action.frontier)
                    if released:
                        self.trace.add(action.kind, pid, *(b.batch for b in released))

    # ── failures and recovery ─────────────────────────────────────

    def _inject_failures(self) -> None:
        due = [f for f in self._failures if f.step <= self.step]
        if not due:
            return
        self._failures = [f for f in self._failures if f.step > self.step]
        failed: list[str] = []
        for failure in due:
            failed += [p for p in failure.processors if p not in failed]
        self.inject_failure(failed)

    def inject_failure(self, failed: list[str]) -> RollbackAssignment:
        """Fail ``failed``, choose consistent frontiers and reset every processor."""
        graph = self.graph
        logger.info("Failure at step %d: %s", self.step, ", ".join(failed))
        progress = self._progress()
        ceilings = {pid: progress.completed(pid) for pid in graph.processor_ids}
        for pid in failed:
            if self.processors[pid].failed:
                continue
            self.processors[pid].fail()
            for edge in graph.in_edges(pid):
                self.channels[edge.id] = []
            dropped = self.store.discard_inflight(pid)
            if dropped:
                logger.info("  %s lost %d unacknowledged checkpoint(s)", pid, dropped)
            self.trace.add("fail", pid)

        snapshot = self._system_snapshot(ceilings)
        assignment = choose_frontiers(snapshot)
        violations = check_consistent(snapshot, assignment)
        if violations:
            raise RollbackError(
                "inconsistent rollback: " + "; ".join(v.text for v in violations)
            )
        self.last_snapshot, self.last_assignment = snapshot, assignment
        logger.info("Recovery chose frontiers after %d iterations", assignment.iterations)

        plans = {
            pid: reset_state(pid, assignment, self.store, self.processors[pid])
            for pid in graph.processor_ids
        }
        for pid, plan in plans.items():
            self.trace.add("rollback", pid, plan.frontier)
            logger.info("  %s -> %s", pid, plan.frontier)
            processor = self.processors[pid]
            if plan.state is not None:
                processor.restore(processor.behavior.decode(plan.state), plan.history)
            if not plan.frontier.is_top:
                self.store.truncate(pid, plan.frontier)
                self.monitor.truncate(pid, plan.frontier)
                self._lazy[pid] = 0

        for eid, queue in self.channels.items():
            edge = graph.edge(eid)
            if not assignment.f[edge.dst].is_top:
                self.channels[eid] = []
                continue
            fixed = snapshot.phi(eid, assignment.f[edge.src])
            self.channels[eid] = [
                (ordinal, m)
                for ordinal, m in queue
                if fixed.contains(graph.receive_time(eid, m.time))
            ]
        for pid, plan in plans.items():
            for eid, messages in plan.resend.items():
                for message in messages:
                    self.channels[eid].append((self._next_ordinal(), message))
                    self.trace.add("resend", eid, message.time)

        for pid, source in self.sources.items():
            g = assignment.f[pid]
            if g.is_top:
                continue
            for batch in source.rewind(g):
                self._batch_ordinals.pop(batch.batch, None)
                self.trace.add("reoffer", pid, batch.batch, batch.time)
        for pid in self.sinks:
            g = assignment.f[pid]
            if not g.is_top and not self._egress_reported[pid] <= g:
                self._egress_reported[pid] = g

        after = self._progress()
        self.completed = {pid: after.completed(pid) for pid in graph.processor_ids}
        return assignment

    def _system_snapshot(self, ceilings: dict[str, Frontier]) -> SystemSnapshot:
        graph = self.graph
        available = {}
        metadata = {}
        for pid in graph.processor_ids:
            processor = self.processors[pid]
            live = not processor.failed
            ceiling = ceilings[pid] if restores_anywhere(graph, pid) else None
            available[pid] = self.store.available(pid, ceiling, live)
            metadata[pid] = {r.frontier: r.meta for r in self.store.records(pid)}
            if live:
                metadata[pid][Frontier.top(graph.domain_of(pid))] = live_metadata(processor)
        failed = frozenset(pid for pid, p in self.processors.items() if p.failed)
        return SystemSnapshot(graph, available, metadata, failed)


def run_scenario(scenario: Scenario, config: AppConfig = AppConfig()) -> Trace:
    return Simulator(scenario, config).run()
