"""Dataflow graph declarations, edge projections and graph validation.

A projection maps a frontier of the sending processor to the frontier of
the receiver's times that the sender is guaranteed not to produce from events
outside it.  Static projections depend only on the frontier; history
projections also need counts recorded by the sender (a ProjectionContext).
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from functools import cached_property

import networkx as nx

from core.behaviors import BEHAVIORS, BehaviorKind, BehaviorSpec
from core.logical_time import (
    DomainKind,
    DomainMismatch,
    Frontier,
    LogicalTime,
    TimeDomain,
    strictly_below,
)
from policies.checkpoint_policies import CheckpointPolicy, PolicyKind

logger = logging.getLogger(__name__)


class ProjectionError(Exception):
    """Raised when a projection cannot be evaluated with the information at hand."""


class ProjectionKind(str, enum.Enum):
    IDENTITY = "identity"
    SENT_COUNT = "sent_count"
    LOOP_INGRESS = "loop_ingress"
    LOOP_EGRESS = "loop_egress"
    LOOP_FEEDBACK = "loop_feedback"
    EPOCH_TO_SEQ = "epoch_to_seq"
    SEQ_TO_EPOCH = "seq_to_epoch"


STATIC_PROJECTIONS = frozenset(
    {
        ProjectionKind.IDENTITY,
        ProjectionKind.LOOP_INGRESS,
        ProjectionKind.LOOP_EGRESS,
        ProjectionKind.LOOP_FEEDBACK,
    }
)
# Static projections whose pullback is the largest frontier projecting inside a bound.
# A loop exit has none: partial iterations of an epoch never show up downstream.
EXACT_PULLBACK = STATIC_PROJECTIONS - {ProjectionKind.LOOP_EGRESS}


class ExternalRole(str, enum.Enum):
    NONE = "none"
    INGRESS = "ingress"
    EGRESS = "egress"


@dataclass(frozen=True)
class ProjectionSpec:
    kind: ProjectionKind = ProjectionKind.IDENTITY
    window: int = 1  # SeqToEpoch: input messages per output epoch

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError("projection window must be at least 1")

    @property
    def history_dependent(self) -> bool:
        return self.kind not in STATIC_PROJECTIONS


@dataclass(frozen=True)
class ProjectionContext:
    """Sender-side counts a history projection is evaluated against."""

    sent: int = 0                                       # messages sent on the edge
    epoch_counts: tuple[tuple[int, int], ...] = ()      # (epoch, messages sent at it)
    processed: int = 0                                  # messages the sender consumed


@dataclass(frozen=True)
class ProcessorDecl:
    id: str
    domain: TimeDomain
    behavior: BehaviorSpec
    policy: CheckpointPolicy = CheckpointPolicy()
    role: ExternalRole = ExternalRole.NONE


@dataclass(frozen=True)
class EdgeDecl:
    id: str
    src: str
    dst: str
    projection: ProjectionSpec = ProjectionSpec()


# ── projections ───────────────────────────────────────────────────


def apply_projection(
    spec: ProjectionSpec,
    f: Frontier,
    target: TimeDomain,
    edge: str,
    context: ProjectionContext | None = None,
) -> Frontier:
    """Project ``f`` along ``edge`` into the receiver's domain ``target``."""
    kind = spec.kind
    if kind is ProjectionKind.IDENTITY:
        if f.domain != target:
            raise DomainMismatch(
                f"identity projection on {edge} joins {f.domain.describe()} "
                f"to {target.describe()}"
            )
        return f
    if kind is ProjectionKind.LOOP_INGRESS:
        return f.map_elements(target, lambda t: t.with_counter(target, None))
    if kind is ProjectionKind.LOOP_EGRESS:
        return _whole_iterations(f, target)
    if kind is ProjectionKind.LOOP_FEEDBACK:
        return f.map_elements(target, lambda t: t.incremented())
    if context is None:
        raise ProjectionError(f"projection requires recorded metadata ({kind.value} on {edge})")
    if kind is ProjectionKind.SENT_COUNT:
        return _seq_prefix(target, edge, context.sent)
    if kind is ProjectionKind.EPOCH_TO_SEQ:
        total = sum(
            count
            for epoch, count in context.epoch_counts
            if f.contains(LogicalTime.epoch(f.domain, epoch))
        )
        return _seq_prefix(target, edge, total)
    # SEQ_TO_EPOCH: only whole windows of consumed input have a fixed epoch
    complete = context.processed // spec.window
    if complete == 0:
        return Frontier.empty(target)
    return Frontier.of(target, [LogicalTime.epoch(target, complete - 1)])


def _whole_iterations(f: Frontier, outer: TimeDomain) -> Frontier:
    """Outer times all of whose loop iterations lie in ``f``."""
    if f.is_top:
        return Frontier.top(outer)
    result = Frontier.empty(outer)
    for element in f.elements:
        prefix = element.without_counter(outer)
        if element.coords[-1] is None:
            result = result | Frontier.of(outer, [prefix])
        elif f.domain.totally_ordered and outer.totally_ordered:
            result = result | strictly_below(prefix)
    return result


def _seq_prefix(domain: TimeDomain, edge: str, count: int) -> Frontier:
    if count == 0:
        return Frontier.empty(domain)
    return Frontier.of(domain, [LogicalTime.seq(domain, edge, count)])


def pullback(spec: ProjectionSpec, g: Frontier, source: TimeDomain) -> Frontier:
    """Largest sender frontier whose static projection lies inside ``g``."""
    kind = spec.kind
    if kind is ProjectionKind.IDENTITY:
        return g
    if g.is_top:
        return Frontier.top(source)
    if kind is ProjectionKind.LOOP_INGRESS:
        return _whole_iterations(g, source)
    if kind is ProjectionKind.LOOP_FEEDBACK:
        result = Frontier.empty(source)
        for element in g.elements:
            last = element.coords[-1]
            if last is None:
                result = result | Frontier.of(source, [element])
            elif g.domain.totally_ordered:
                result = result | strictly_below(element)
            elif last > 0:
                decremented = LogicalTime(source, (*element.coords[:-1], last - 1))
                result = result | Frontier.of(source, [decremented])
        return result
    raise ProjectionError(f"{kind.value} projections have no exact pullback")


def stamp_time(
    spec: ProjectionSpec,
    time: LogicalTime,
    target: TimeDomain,
    edge: str,
    sent: int,
    processed: int,
) -> LogicalTime:
    """Time a message sent at ``time`` carries on the edge.

    ``sent`` counts earlier messages on the edge; ``processed`` counts the
    messages the sender has consumed, including the one being handled.
    """
    kind = spec.kind
    if kind in (ProjectionKind.IDENTITY, ProjectionKind.LOOP_FEEDBACK):
        return time
    if kind is ProjectionKind.LOOP_INGRESS:
        return time.with_counter(target, 0)
    if kind is ProjectionKind.LOOP_EGRESS:
        return time.without_counter(target)
    if kind is ProjectionKind.SEQ_TO_EPOCH:
        return LogicalTime.epoch(target, max(processed - 1, 0) // spec.window)
    return LogicalTime.seq(target, edge, sent + 1)


def receive_time(spec: ProjectionSpec, time: LogicalTime) -> LogicalTime:
    """Event time at the receiver for a message carrying ``time``."""
    if spec.kind is ProjectionKind.LOOP_FEEDBACK:
        return time.incremented()
    return time


# ── graph ─────────────────────────────────────────────────────────


@dataclass(frozen=True)
class GraphSpec:
    processors: tuple[ProcessorDecl, ...] = ()
    edges: tuple[EdgeDecl, ...] = ()

    @cached_property
    def _index(self) -> dict[str, ProcessorDecl]:
        index: dict[str, ProcessorDecl] = {}
        for decl in self.processors:
            index.setdefault(decl.id, decl)
        return index

    @cached_property
    def network(self) -> nx.MultiDiGraph:
        graph = nx.MultiDiGraph()
        graph.add_nodes_from(decl.id for decl in self.processors)
        for edge in self.edges:
            graph.add_edge(edge.src, edge.dst, key=edge.id, decl=edge)
        return graph

    @cached_property
    def _edges_by_id(self) -> dict[str, EdgeDecl]:
        return {edge.id: edge for edge in self.edges}

    @property
    def processor_ids(self) -> tuple[str, ...]:
        return tuple(decl.id for decl in self.processors)

    def processor(self, pid: str) -> ProcessorDecl:
        try:
            return self._index[pid]
        except KeyError:
            raise KeyError(f"unknown processor {pid!r}") from None

    def edge(self, eid: str) -> EdgeDecl:
        try:
            return self._edges_by_id[eid]
        except KeyError:
            raise KeyError(f"unknown edge {eid!r}") from None

    @cached_property
    def _adjacency(self) -> dict[str, tuple[list[EdgeDecl], list[EdgeDecl]]]:
        adjacency: dict[str, tuple[list[EdgeDecl], list[EdgeDecl]]] = {
            pid: ([], []) for pid in self.processor_ids
        }
        for edge in self.edges:
            adjacency.setdefault(edge.dst, ([], []))[0].append(edge)
            adjacency.setdefault(edge.src, ([], []))[1].append(edge)
        return adjacency

    def in_edges(self, pid: str) -> tuple[EdgeDecl, ...]:
        return tuple(self._adjacency.get(pid, ((), ()))[0])

    def out_edges(self, pid: str) -> tuple[EdgeDecl, ...]:
        return tuple(self._adjacency.get(pid, ((), ()))[1])

    def neighbors(self, pid: str) -> tuple[str, ...]:
        """Processors sharing an edge with ``pid``, in declaration order."""
        if pid not in self.network:
            return ()
        adjacent = set(self.network.predecessors(pid)) | set(self.network.successors(pid))
        return tuple(q for q in self.processor_ids if q in adjacent)

    def domain_of(self, pid: str) -> TimeDomain:
        return self.processor(pid).domain

    def project(
        self, eid: str, f: Frontier, context: ProjectionContext | None = None
    ) -> Frontier:
        """Projection of ``f`` along ``eid``, including the sender's send delay."""
        edge = self.edge(eid)
        delay = self.processor(edge.src).behavior.delay
        return apply_projection(
            edge.projection, f.advance(delay), self.domain_of(edge.dst), eid, context
        )

    def pull_back(self, eid: str, g: Frontier) -> Frontier:
        edge = self.edge(eid)
        return pullback(edge.projection, g, self.domain_of(edge.src))

    def receive_time(self, eid: str, time: LogicalTime) -> LogicalTime:
        return receive_time(self.edge(eid).projection, time)


# ── validation ────────────────────────────────────────────────────

_NOTIFYING = frozenset(
    kind
    for kind, cls in BEHAVIORS.items()
    if cls.wants_notifications and kind is not BehaviorKind.EGRESS_SINK
)


def _check_projection(graph: GraphSpec, edge: EdgeDecl) -> list[str]:
    src = graph.processor(edge.src)
    dst = graph.processor(edge.dst)
    s, d = src.domain, dst.domain
    kind = edge.projection.kind
    problems: list[str] = []
    mismatch = (
        f"projection domain mismatch on {edge.id}: {kind.value} from "
        f"{s.describe()} to {d.describe()}"
    )
    if kind is ProjectionKind.IDENTITY:
        if s != d:
            problems.append(mismatch)
    elif kind in (ProjectionKind.SENT_COUNT, ProjectionKind.EPOCH_TO_SEQ):
        if d.kind is not DomainKind.SEQUENCE or edge.id not in d.edges:
            problems.append(mismatch)
        if kind is ProjectionKind.SENT_COUNT and not (
            s.kind is DomainKind.SEQUENCE or src.role is ExternalRole.INGRESS
        ):
            problems.append(f"sent_count on {edge.id} requires a sequence-number or ingress sender")
        if kind is ProjectionKind.EPOCH_TO_SEQ and (
            s.kind is not DomainKind.EPOCHS or src.behavior.kind is not BehaviorKind.EPOCH_BARRIER
        ):
            problems.append(f"epoch_to_seq on {edge.id} requires an epoch_barrier sender")
    elif kind is ProjectionKind.SEQ_TO_EPOCH:
        if s.kind is not DomainKind.SEQUENCE or d.kind is not DomainKind.EPOCHS:
            problems.append(mismatch)
    elif kind is ProjectionKind.LOOP_INGRESS:
        if (
            d.kind is not DomainKind.STRUCTURED
            or s.width + 1 != d.width
            or s.kind is DomainKind.SEQUENCE
        ):
            problems.append(mismatch)
    elif kind is ProjectionKind.LOOP_EGRESS:
        if (
            s.kind is not DomainKind.STRUCTURED
            or d.width + 1 != s.width
            or d.kind is DomainKind.SEQUENCE
        ):
            problems.append(mismatch)
    elif kind is ProjectionKind.LOOP_FEEDBACK:
        if s != d or s.kind is not DomainKind.STRUCTURED or s.depth < 1:
            problems.append(mismatch)
        if dst.behavior.kind is not BehaviorKind.LOOP_EGRESS_INCREMENT:
            problems.append(
                f"loop_feedback on {edge.id} must enter a loop_egress_increment processor"
            )
        elif not nx.has_path(graph.network, edge.dst, edge.src):
            problems.append(f"loop_feedback on {edge.id} does not close a cycle")
    if (
        d.kind is DomainKind.SEQUENCE
        and kind not in (ProjectionKind.SENT_COUNT, ProjectionKind.EPOCH_TO_SEQ)
    ):
        problems.append(
            f"edge {edge.id} into sequence-number processor {dst.id} must assign sequence numbers"
        )
    return problems


def _check_processor(graph: GraphSpec, decl: ProcessorDecl) -> list[str]:
    problems: list[str] = []
    behavior = decl.behavior
    ins, outs = graph.in_edges(decl.id), graph.out_edges(decl.id)
    if decl.role is ExternalRole.INGRESS:
        if ins:
            problems.append(f"ingress processor {decl.id} has inputs")
        if behavior.kind is not BehaviorKind.INGRESS_SOURCE:
            problems.append(f"ingress processor {decl.id} must use ingress_source")
    elif behavior.kind is BehaviorKind.INGRESS_SOURCE:
        problems.append(f"ingress_source on {decl.id} requires the ingress role")
    if decl.role is ExternalRole.EGRESS:
        if outs:
            problems.append(f"egress processor {decl.id} has outputs")
        if behavior.kind is not BehaviorKind.EGRESS_SINK:
            problems.append(f"egress processor {decl.id} must use egress_sink")
    elif behavior.kind is BehaviorKind.EGRESS_SINK:
        problems.append(f"egress_sink on {decl.id} requires the egress role")
    if decl.domain.kind is DomainKind.SEQUENCE:
        if behavior.kind in _NOTIFYING:
            problems.append(
                f"{behavior.kind.value} on {decl.id} needs notifications, "
                "which sequence numbers lack"
            )
        if behavior.delay:
            problems.append(f"{decl.id} cannot send into the future of a sequence-number domain")
    if behavior.kind is BehaviorKind.LOOP_EGRESS_INCREMENT and decl.domain.depth < 1:
        problems.append(
            f"loop_egress_increment on {decl.id} needs a structured domain with a loop counter"
        )
    if behavior.delay and behavior.kind is not BehaviorKind.SELECT:
        problems.append(f"only select may delay its outputs ({decl.id})")
    if behavior.delay and not (decl.policy.exact_metadata or decl.policy.logs_everything):
        problems.append(f"{decl.id} sends into the future and must track discarded times or log")
    if decl.policy.kind is PolicyKind.LOG_ALL_HISTORY and not behavior.is_deterministic:
        problems.append(f"{decl.id} is non-deterministic and cannot replay its history")
    return problems


def validate_graph(graph: GraphSpec) -> list[str]:
    """Every problem found in ``graph``; an empty list means the graph is usable."""
    problems: list[str] = []
    seen: set[str] = set()
    for decl in graph.processors:
        if decl.id in seen:
            problems.append(f"duplicate processor id {decl.id}")
        seen.add(decl.id)
    edge_ids: set[str] = set()
    usable: list[EdgeDecl] = []
    for edge in graph.edges:
        if edge.id in edge_ids:
            problems.append(f"duplicate edge id {edge.id}")
        edge_ids.add(edge.id)
        missing = [end for end in (edge.src, edge.dst) if end not in seen]
        if missing:
            problems.append(f"edge {edge.id} references unknown processor {missing[0]}")
        else:
            usable.append(edge)
    for edge in usable:
        problems.extend(_check_projection(graph, edge))
    for decl in graph.processors:
        problems.extend(_check_processor(graph, decl))
    for problem in problems:
        logger.debug("  graph problem: %s", problem)
    return problems

