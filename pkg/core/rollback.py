"""Choosing consistent rollback frontiers and resetting processors to them.

An assignment gives every processor a frontier ``f`` to restore and a smaller
frontier ``fn`` of notifications it keeps.  It is consistent when

- messages a checkpoint discarded lie inside the receiver's restored frontier;
- messages a checkpoint had delivered lie inside the projection of the
  sender's restored frontier, so nobody re-sends them;
- kept notifications lie inside ``f``, cover the notifications the checkpoint
  had processed, and lie inside the projection of every upstream ``fn``.

choose_frontiers finds the greatest consistent assignment by lowering
frontiers from their maxima until nothing moves.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections import deque
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

from core.checkpoint_store import (
    AvailableFrontiers,
    CheckpointMetadata,
    CheckpointStore,
    ceiling_metadata,
    restores_anywhere,
)
from core.graph_model import GraphSpec, ProjectionContext
from core.logical_time import Frontier
from core.processor import ChannelMessage, HistoryEntry, Processor, filter_history

logger = logging.getLogger(__name__)


class RollbackError(Exception):
    """Raised when an assignment cannot be realized from the available checkpoints."""


class OracleLimitExceeded(Exception):
    """Raised when brute-force enumeration would exceed its configured bound."""


# ── snapshot ──────────────────────────────────────────────────────


@dataclass
class SystemSnapshot:
    """Everything the rollback choice needs: available frontiers and their metadata."""

    graph: GraphSpec
    available: dict[str, AvailableFrontiers]
    metadata: dict[str, dict[Frontier, CheckpointMetadata]] = field(default_factory=dict)
    failed: frozenset[str] = frozenset()

    def _empty_metadata(self, pid: str) -> CheckpointMetadata:
        graph = self.graph
        empty = Frontier.empty(graph.domain_of(pid))
        phi = {e.id: self.phi(e.id, empty) for e in graph.out_edges(pid)}
        return CheckpointMetadata(
            processor=pid,
            f=empty,
            nbar=empty,
            mbar={d.id: empty for d in graph.in_edges(pid)},
            dbar={e.id: Frontier.empty(graph.domain_of(e.dst)) for e in graph.out_edges(pid)},
            phi=phi,
        )

    def meta(self, pid: str, g: Frontier) -> CheckpointMetadata:
        recorded = self.metadata.get(pid, {}).get(g)
        if recorded is not None:
            return recorded
        if g.is_empty:
            return self._empty_metadata(pid)
        ceiling = self.available[pid].ceiling
        if ceiling is not None and g <= ceiling:
            return ceiling_metadata(self.graph, pid, g)
        raise RollbackError(f"{pid} has no checkpoint at {g}")

    def phi(self, eid: str, f_src: Frontier) -> Frontier:
        """Projection of ``f_src`` along ``eid``, using recorded counts for history projections."""
        edge = self.graph.edge(eid)
        recorded = self.metadata.get(edge.src, {})
        meta = recorded.get(f_src)
        if meta is not None and eid in meta.phi:
            return meta.phi[eid]
        if not edge.projection.history_dependent:
            return self.graph.project(eid, f_src)
        # the largest recorded frontier inside f_src fixes a subset of what f_src fixes
        best: CheckpointMetadata | None = None
        for g, candidate in recorded.items():
            if g <= f_src and eid in candidate.phi and (best is None or best.f <= g):
                best = candidate
        if best is None:
            empty = Frontier.empty(self.graph.domain_of(edge.src))
            return self.graph.project(eid, empty, ProjectionContext())
        return best.phi[eid]


@dataclass(frozen=True)
class Violation:
    constraint: str
    processor: str
    edge: str | None
    lhs: Frontier
    rhs: Frontier

    @property
    def text(self) -> str:
        where = f"{self.processor} on {self.edge}" if self.edge else self.processor
        return f"{self.constraint} at {where}: {self.lhs} is not within {self.rhs}"

    def __str__(self) -> str:
        return self.text


@dataclass(frozen=True)
class RollbackAssignment:
    f: Mapping[str, Frontier]
    fn: Mapping[str, Frontier]
    iterations: int = 0
    steps: tuple[str, ...] = ()

    def lines(self) -> list[str]:
        return [f"{pid} f={self.f[pid]} fn={self.fn[pid]}" for pid in self.f]


# ── constraints ───────────────────────────────────────────────────


def _violations_at(
    s: SystemSnapshot, f: Mapping[str, Frontier], fn: Mapping[str, Frontier], pid: str
) -> list[Violation]:
    graph = s.graph
    g = f[pid]
    meta = s.meta(pid, g)
    found: list[Violation] = []
    for edge in graph.out_edges(pid):
        discarded = meta.dbar.get(edge.id, Frontier.empty(graph.domain_of(edge.dst)))
        if not discarded <= f[edge.dst]:
            found.append(Violation("discarded", pid, edge.id, discarded, f[edge.dst]))
    for edge in graph.in_edges(pid):
        delivered = meta.mbar.get(edge.id, g)
        bound = s.phi(edge.id, f[edge.src])
        if not delivered <= bound:
            found.append(Violation("delivered", pid, edge.id, delivered, bound))
    kept = fn[pid]
    if not kept <= g:
        found.append(Violation("notification-within-frontier", pid, None, kept, g))
    if not meta.nbar <= kept:
        found.append(Violation("notification-processed", pid, None, meta.nbar, kept))
    for edge in graph.in_edges(pid):
        bound = s.phi(edge.id, fn[edge.src])
        if not kept <= bound:
            found.append(Violation("notification-upstream", pid, edge.id, kept, bound))
    return found


def check_consistent(s: SystemSnapshot, a: RollbackAssignment) -> list[Violation]:
    """Every constraint the assignment breaks; an empty list means it is consistent."""
    for pid in s.graph.processor_ids:
        if not s.available[pid].admits(a.f[pid]):
            raise RollbackError(f"{a.f[pid]} is not an available frontier of {pid}")
    found: list[Violation] = []
    for pid in s.graph.processor_ids:
        found.extend(_violations_at(s, a.f, a.fn, pid))
    return found


def _admissible(
    s: SystemSnapshot,
    pid: str,
    g: Frontier,
    f: Mapping[str, Frontier],
    fn: Mapping[str, Frontier],
) -> bool:
    graph = s.graph
    meta = s.meta(pid, g)
    for edge in graph.out_edges(pid):
        discarded = meta.dbar.get(edge.id)
        if discarded is not None and not discarded <= f[edge.dst]:
            return False
    for edge in graph.in_edges(pid):
        if not meta.mbar.get(edge.id, g) <= s.phi(edge.id, f[edge.src]):
            return False
        if not meta.nbar <= s.phi(edge.id, fn[edge.src]):
            return False
    return meta.nbar <= fn[pid]


def _ceiling_frontier(
    s: SystemSnapshot, pid: str, f: Mapping[str, Frontier], fn: Mapping[str, Frontier]
) -> Frontier:
    """Largest frontier below the ceiling that satisfies every constraint at ``pid``."""
    graph = s.graph
    ceiling = s.available[pid].ceiling
    assert ceiling is not None
    g = f[pid] & ceiling
    for edge in graph.out_edges(pid):
        g = g & graph.pull_back(edge.id, f[edge.dst])
    for edge in graph.in_edges(pid):
        g = g & s.phi(edge.id, f[edge.src]) & s.phi(edge.id, fn[edge.src])
    return g & fn[pid]


def _larger(a: Frontier, b: Frontier) -> Frontier:
    if a <= b:
        return b
    if b <= a:
        return a
    return min(a, b, key=lambda x: x.text)


def _best_frontier(
    s: SystemSnapshot, pid: str, f: Mapping[str, Frontier], fn: Mapping[str, Frontier]
) -> Frontier:
    available = s.available[pid]
    current = f[pid]
    best: Frontier | None = None
    for g in reversed(available.frontiers):
        if g <= current and _admissible(s, pid, g, f, fn):
            best = g
            break
    if available.ceiling is not None:
        closed = _ceiling_frontier(s, pid, f, fn)
        best = closed if best is None else _larger(best, closed)
    if best is None:
        # EMPTY is always admissible; reaching here means the chain lost it
        raise RollbackError(f"no admissible frontier for {pid}")
    return best


def _notification_bound(
    s: SystemSnapshot, pid: str, g: Frontier, fn: Mapping[str, Frontier]
) -> Frontier:
    bound = g & fn[pid]
    for edge in s.graph.in_edges(pid):
        bound = bound & s.phi(edge.id, fn[edge.src])
    return bound


def choose_frontiers(s: SystemSnapshot, seed: Iterable[str] | None = None) -> RollbackAssignment:
    """The greatest consistent assignment reachable by lowering from each maximum.

    ``seed`` names the processors evaluated first; by default those breaking
    a local constraint at the initial assignment.
    """
    graph = s.graph
    ids = graph.processor_ids
    f = {pid: s.available[pid].maximum for pid in ids}
    fn = dict(f)
    if seed is None:
        start = [pid for pid in ids if _violations_at(s, f, fn, pid)]
    else:
        start = [pid for pid in ids if pid in set(seed)]
    queue = deque(start)
    queued = set(start)
    iterations = 0
    steps: list[str] = []
    while queue:
        pid = queue.popleft()
        queued.discard(pid)
        iterations += 1
        g = _best_frontier(s, pid, f, fn)
        gn = _notification_bound(s, pid, g, fn)
        if g == f[pid] and gn == fn[pid]:
            continue
        steps.append(f"{iterations}: {pid} f={g} fn={gn}")
        logger.debug("  iteration %d: %s f=%s fn=%s", iterations, pid, g, gn)
        f[pid], fn[pid] = g, gn
        for neighbor in graph.neighbors(pid):
            if neighbor not in queued:
                queue.append(neighbor)
                queued.add(neighbor)
    return RollbackAssignment(f, fn, iterations, tuple(steps))


# ── oracle ────────────────────────────────────────────────────────


def greatest_notification_frontiers(
    s: SystemSnapshot, f: Mapping[str, Frontier]
) -> dict[str, Frontier]:
    """Largest ``fn`` inside ``f`` and inside the projection of every upstream ``fn``."""
    fn = dict(f)
    changed = True
    while changed:
        changed = False
        for pid in s.graph.processor_ids:
            bound = fn[pid]
            for edge in s.graph.in_edges(pid):
                bound = bound & s.phi(edge.id, fn[edge.src])
            if bound != fn[pid]:
                fn[pid] = bound
                changed = True
    return fn


def _oracle_candidates(s: SystemSnapshot, limit: int) -> dict[str, list[Frontier]]:
    """Recorded chains, plus frontiers below each ceiling derived from the neighbors' values."""
    graph = s.graph
    values = {pid: list(s.available[pid].frontiers) for pid in graph.processor_ids}
    for pid, available in s.available.items():
        if available.ceiling is not None and available.ceiling not in values[pid]:
            values[pid].append(available.ceiling)
    for _ in range(3):
        grown = False
        for pid in graph.processor_ids:
            ceiling = s.available[pid].ceiling
            if ceiling is None:
                continue
            derived = {
                ceiling & graph.pull_back(e.id, v)
                for e in graph.out_edges(pid)
                for v in values[e.dst]
            }
            derived |= {
                ceiling & s.phi(d.id, v) for d in graph.in_edges(pid) for v in values[d.src]
            }
            closure = set(values[pid]) | derived
            closure |= {a & b for a in closure for b in closure}
            if len(closure) != len(values[pid]):
                values[pid] = sorted(closure, key=lambda x: x.text)
                grown = True
        if not grown or math.prod(len(v) for v in values.values()) > limit:
            break
    return values


def brute_force_oracle(s: SystemSnapshot, limit: int = 1_000_000) -> list[RollbackAssignment]:
    """Every maximal consistent assignment, found by exhaustive enumeration."""
    ids = s.graph.processor_ids
    candidates = _oracle_candidates(s, limit)
    total = math.prod(len(candidates[pid]) for pid in ids)
    if total > limit:
        raise OracleLimitExceeded(f"{total} candidate assignments exceed the oracle limit {limit}")
    consistent: list[RollbackAssignment] = []
    for combo in itertools.product(*(candidates[pid] for pid in ids)):
        f = dict(zip(ids, combo))
        a = RollbackAssignment(f, greatest_notification_frontiers(s, f))
        if not check_consistent(s, a):
            consistent.append(a)

    def dominated(a: RollbackAssignment, b: RollbackAssignment) -> bool:
        return a.f != b.f and all(a.f[pid] <= b.f[pid] for pid in ids)

    maximal = [a for a in consistent if not any(dominated(a, b) for b in consistent)]
    logger.debug(
        "  oracle: %d candidates, %d consistent, %d maximal", total, len(consistent), len(maximal)
    )
    return maximal


# ── reset ─────────────────────────────────────────────────────────


@dataclass(frozen=True)
class ResetPlan:
    """How one processor resumes after a rollback.

    ``state`` is None when the live state is kept unchanged; ``resend`` holds
    the logged messages its receivers no longer have, per output edge.
    """

    processor: str
    frontier: Frontier
    state: bytes | None
    history: tuple[HistoryEntry, ...]
    available: tuple[Frontier, ...]
    resend: dict[str, list[ChannelMessage]]


def reset_state(
    pid: str, a: RollbackAssignment, store: CheckpointStore, processor: Processor
) -> ResetPlan:
    """Available frontiers, history, state and re-sends for ``pid`` restored to ``a.f[pid]``."""
    graph = store.graph
    g = a.f[pid]
    logs: dict[str, list[ChannelMessage]] = {}
    state: bytes | None
    if g.is_top and not processor.failed:
        state = None
        history = tuple(processor.history)
        if processor.decl.policy.logs_everything:
            logs = {edge: processor.logged_messages(edge) for edge in processor.outputs}
    elif g.is_empty:
        state, history = b"", ()
    else:
        record = store.record_for(pid, g)
        if record is not None:
            state, history, logs = record.state, record.history, record.logs
        elif restores_anywhere(graph, pid):
            if processor.failed:
                state, history = b"", ()
            else:
                state = processor.behavior.encode(processor.restrict_to(g))
                history = tuple(filter_history(processor.history, g))
        else:
            raise RollbackError(f"no checkpoint of {pid} at {g}")
    resend: dict[str, list[ChannelMessage]] = {}
    for edge, messages in logs.items():
        kept = a.f[graph.edge(edge).dst]
        missing = [m for m in messages if not kept.contains(graph.receive_time(edge, m.time))]
        if missing:
            resend[edge] = missing
    available = tuple(x for x in store.available(pid).frontiers if x <= g)
    return ResetPlan(pid, g, state, history, available, resend)
