"""Scenario and snapshot files: JSON schemas, loading and line-anchored diagnostics."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from core.behaviors import BehaviorKind, BehaviorSpec
from core.checkpoint_store import AvailableFrontiers, CheckpointMetadata
from core.config import StorageConfig
from core.graph_model import (
    EdgeDecl,
    ExternalRole,
    GraphSpec,
    ProcessorDecl,
    ProjectionKind,
    ProjectionSpec,
    validate_graph,
)
from core.logical_time import (
    DomainKind,
    Frontier,
    Ordering,
    TimeDomain,
    parse_frontier,
    parse_time,
)
from core.rollback import SystemSnapshot
from core.simulator import FailureSpec, Scenario, Schedule, SinkSettings
from policies.checkpoint_policies import CheckpointPolicy, PolicyKind, policy_from_regime
from tools.external_sink import SinkMode
from tools.external_source import InputBatch

logger = logging.getLogger(__name__)


class ScenarioError(Exception):
    """Raised when a scenario or snapshot file cannot be used; carries one line per problem."""

    def __init__(self, source: str, diagnostics: list[str]) -> None:
        super().__init__(f"{source}: " + "; ".join(diagnostics))
        self.source = source
        self.diagnostics = diagnostics


# ── schema ────────────────────────────────────────────────────────


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DomainModel(_Model):
    kind: DomainKind
    edges: list[str] = Field(default_factory=list)
    depth: int = 0
    ordering: Ordering = Ordering.LEXICOGRAPHIC


class BehaviorModel(_Model):
    kind: BehaviorKind
    function: str = "identity"
    reducer: str = "sum"
    delay: int = 0
    iterations: int = 0
    deterministic: bool = True


class PolicyModel(_Model):
    kind: PolicyKind = PolicyKind.EPHEMERAL
    period: int = 1
    log_outputs: bool = False
    track_estimates: bool = False


class ProjectionModel(_Model):
    kind: ProjectionKind = ProjectionKind.IDENTITY
    window: int = 1


class ProcessorModel(_Model):
    id: str
    domain: DomainModel | DomainKind
    behavior: BehaviorModel | BehaviorKind
    policy: PolicyModel | str = "ephemeral"
    role: ExternalRole = ExternalRole.NONE


class EdgeModel(_Model):
    id: str
    src: str
    dst: str
    projection: ProjectionModel | ProjectionKind = ProjectionKind.IDENTITY


class GraphModel(_Model):
    processors: list[ProcessorModel] = Field(default_factory=list)
    edges: list[EdgeModel] = Field(default_factory=list)


class BatchModel(_Model):
    batch: str
    time: str
    payloads: list[Any] = Field(default_factory=list)
    at: int = 0


class FailureModel(_Model):
    step: int
    processors: list[str]


class LimitsModel(_Model):
    step_limit: int | None = None


class StorageModel(_Model):
    min_latency: int = 0
    max_latency: int = 0


class SinkModel(_Model):
    mode: SinkMode = SinkMode.ACKED
    latency: tuple[int, int] = (0, 0)


class ExternalModel(_Model):
    sinks: dict[str, SinkModel] = Field(default_factory=dict)


class ScenarioFile(_Model):
    description: str = ""
    graph: GraphModel = Field(default_factory=GraphModel)
    inputs: dict[str, list[BatchModel]] = Field(default_factory=dict)
    failures: list[FailureModel] = Field(default_factory=list)
    seed: int = 0
    schedule: Schedule = Schedule.FIFO
    limits: LimitsModel = Field(default_factory=LimitsModel)
    storage: StorageModel | None = None
    external: ExternalModel = Field(default_factory=ExternalModel)


class CheckpointModel(_Model):
    f: str
    nbar: str | None = None
    mbar: dict[str, str] = Field(default_factory=dict)
    dbar: dict[str, str] = Field(default_factory=dict)
    phi: dict[str, str] = Field(default_factory=dict)


class ProcessorFrontiersModel(_Model):
    frontiers: list[str] = Field(default_factory=lambda: ["EMPTY"])
    ceiling: str | None = None
    failed: bool = True


class SnapshotFile(_Model):
    description: str = ""
    graph: GraphModel
    processors: dict[str, ProcessorFrontiersModel] = Field(default_factory=dict)
    checkpoints: dict[str, list[CheckpointModel]] = Field(default_factory=dict)


# ── diagnostics ───────────────────────────────────────────────────


def _line_of(text: str, loc: tuple[Any, ...]) -> int | None:
    """Best-effort line of the key named last in ``loc``, searched along the path."""
    position = 0
    found = None
    for part in loc:
        if not isinstance(part, str):
            continue
        index = text.find(f'"{part}"', position)
        if index < 0:
            continue
        position = index
        found = text.count("\n", 0, index) + 1
    return found


def _where(source: str, text: str, loc: tuple[Any, ...]) -> str:
    line = _line_of(text, loc)
    path = ".".join(str(p) for p in loc)
    return f"{source}:{line}: {path}" if line else f"{source}: {path}"


def _validate(model: type[_Model], text: str, source: str) -> Any:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(source, [f"{source}:{exc.lineno}: {exc.msg}"]) from None
    try:
        return model.model_validate(raw)
    except ValidationError as exc:
        diagnostics = [
            f"{_where(source, text, tuple(error['loc']))}: {error['msg']}"
            for error in exc.errors()
        ]
        raise ScenarioError(source, diagnostics) from None


# ── conversion ────────────────────────────────────────────────────


def _domain(model: DomainModel | DomainKind, seq_edges: list[str]) -> TimeDomain:
    if isinstance(model, DomainKind):
        model = DomainModel(kind=model)
    if model.kind is DomainKind.SEQUENCE:
        return TimeDomain.sequence(model.edges or seq_edges)
    return TimeDomain(model.kind, depth=model.depth, ordering=model.ordering)


def _behavior(model: BehaviorModel | BehaviorKind) -> BehaviorSpec:
    if isinstance(model, BehaviorKind):
        return BehaviorSpec(model)
    return BehaviorSpec(**model.model_dump())


def _policy(model: PolicyModel | str) -> CheckpointPolicy:
    if isinstance(model, str):
        return policy_from_regime(model)
    return CheckpointPolicy(**model.model_dump())


def _projection(model: ProjectionModel | ProjectionKind) -> ProjectionSpec:
    if isinstance(model, ProjectionKind):
        return ProjectionSpec(model)
    return ProjectionSpec(model.kind, model.window)


def to_graph(model: GraphModel, source: str = "<graph>", text: str = "") -> GraphSpec:
    """Build and validate a GraphSpec; sequence domains default to their numbered inputs."""
    diagnostics: list[str] = []
    edges: list[EdgeDecl] = []
    for i, edge in enumerate(model.edges):
        try:
            edges.append(EdgeDecl(edge.id, edge.src, edge.dst, _projection(edge.projection)))
        except ValueError as exc:
            diagnostics.append(f"{_where(source, text, ('graph', 'edges', i, edge.id))}: {exc}")
    numbered = (ProjectionKind.SENT_COUNT, ProjectionKind.EPOCH_TO_SEQ)
    processors: list[ProcessorDecl] = []
    for i, proc in enumerate(model.processors):
        seq_edges = [e.id for e in edges if e.dst == proc.id and e.projection.kind in numbered]
        try:
            processors.append(
                ProcessorDecl(
                    proc.id,
                    _domain(proc.domain, seq_edges),
                    _behavior(proc.behavior),
                    _policy(proc.policy),
                    proc.role,
                )
            )
        except ValueError as exc:
            where = _where(source, text, ("graph", "processors", i, proc.id))
            diagnostics.append(f"{where}: {exc}")
    if diagnostics:
        raise ScenarioError(source, diagnostics)
    graph = GraphSpec(tuple(processors), tuple(edges))
    problems = validate_graph(graph)
    if problems:
        where = _where(source, text, ("graph",))
        raise ScenarioError(source, [f"{where}: {problem}" for problem in problems])
    return graph


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    model: ScenarioFile = _validate(ScenarioFile, text, source)
    graph = to_graph(model.graph, source, text)
    diagnostics: list[str] = []
    inputs: dict[str, list[InputBatch]] = {}
    for pid, batches in model.inputs.items():
        where = _where(source, text, ("inputs", pid))
        if pid not in graph.processor_ids or graph.processor(pid).role is not ExternalRole.INGRESS:
            diagnostics.append(f"{where}: inputs for {pid}, which is not an ingress processor")
            continue
        domain = graph.domain_of(pid)
        parsed: list[InputBatch] = []
        for batch in batches:
            try:
                time = parse_time(domain, batch.time)
            except ValueError as exc:
                diagnostics.append(f"{where}: batch {batch.batch}: {exc}")
                continue
            parsed.append(InputBatch(batch.batch, time, tuple(batch.payloads), batch.at))
        inputs[pid] = parsed
    for failure in model.failures:
        unknown = [p for p in failure.processors if p not in graph.processor_ids]
        if unknown or not failure.processors:
            where = _where(source, text, ("failures",))
            diagnostics.append(
                f"{where}: failure at step {failure.step} must name declared processors"
            )
    sinks: dict[str, SinkSettings] = {}
    for pid, sink in model.external.sinks.items():
        if pid not in graph.processor_ids or graph.processor(pid).role is not ExternalRole.EGRESS:
            where = _where(source, text, ("external", "sinks", pid))
            diagnostics.append(f"{where}: sink settings for {pid}, which is not an egress")
            continue
        sinks[pid] = SinkSettings(sink.mode, sink.latency)
    storage = None
    if model.storage is not None:
        if not 0 <= model.storage.min_latency <= model.storage.max_latency:
            where = _where(source, text, ("storage",))
            diagnostics.append(f"{where}: storage latency range is empty")
        else:
            storage = StorageConfig(model.storage.min_latency, model.storage.max_latency)
    if diagnostics:
        raise ScenarioError(source, diagnostics)
    return Scenario(
        graph=graph,
        inputs=inputs,
        failures=tuple(FailureSpec(f.step, tuple(f.processors)) for f in model.failures),
        seed=model.seed,
        schedule=model.schedule,
        sinks=sinks,
        step_limit=model.limits.step_limit,
        storage=storage,
        description=model.description,
    )


def load_scenario(path: Path) -> Scenario:
    logger.debug("Loading scenario %s", path)
    return parse_scenario(path.read_text(), str(path))


# ── snapshots ─────────────────────────────────────────────────────


def _metadata(graph: GraphSpec, pid: str, model: CheckpointModel) -> CheckpointMetadata:
    domain = graph.domain_of(pid)
    f = parse_frontier(domain, model.f)

    def downstream(edges: dict[str, str]) -> dict[str, Frontier]:
        return {e: parse_frontier(graph.domain_of(graph.edge(e).dst), v) for e, v in edges.items()}

    return CheckpointMetadata(
        processor=pid,
        f=f,
        nbar=f if model.nbar is None else parse_frontier(domain, model.nbar),
        mbar={e: parse_frontier(domain, v) for e, v in model.mbar.items()},
        dbar=downstream(model.dbar),
        phi=downstream(model.phi),
    )


def parse_snapshot(text: str, source: str = "<snapshot>") -> SystemSnapshot:
    model: SnapshotFile = _validate(SnapshotFile, text, source)
    graph = to_graph(model.graph, source, text)
    available: dict[str, AvailableFrontiers] = {}
    metadata: dict[str, dict[Frontier, CheckpointMetadata]] = {}
    failed: set[str] = set()
    diagnostics: list[str] = []
    for pid in graph.processor_ids:
        domain = graph.domain_of(pid)
        entry = model.processors.get(pid, ProcessorFrontiersModel())
        where = _where(source, text, ("processors", pid))
        try:
            chain = tuple(parse_frontier(domain, f) for f in entry.frontiers)
            ceiling = None if entry.ceiling is None else parse_frontier(domain, entry.ceiling)
            available[pid] = AvailableFrontiers(pid, chain, ceiling)
            metadata[pid] = {}
            for checkpoint in model.checkpoints.get(pid, []):
                meta = _metadata(graph, pid, checkpoint)
                metadata[pid][meta.f] = meta
        except (ValueError, KeyError) as exc:
            diagnostics.append(f"{where}: {exc}")
            continue
        if entry.failed:
            failed.add(pid)
    unknown = sorted((set(model.processors) | set(model.checkpoints)) - set(graph.processor_ids))
    for pid in unknown:
        diagnostics.append(f"{_where(source, text, (pid,))}: unknown processor {pid}")
    if diagnostics:
        raise ScenarioError(source, diagnostics)
    return SystemSnapshot(graph, available, metadata, frozenset(failed))


def load_snapshot(path: Path) -> SystemSnapshot:
    return parse_snapshot(path.read_text(), str(path))


# ── serialization ─────────────────────────────────────────────────


def graph_to_dict(graph: GraphSpec) -> dict[str, Any]:
    processors = []
    for decl in graph.processors:
        domain = decl.domain
        processors.append(
            {
                "id": decl.id,
                "domain": {
                    "kind": domain.kind.value,
                    "edges": sorted(domain.edges),
                    "depth": domain.depth,
                    "ordering": domain.ordering.value,
                },
                "behavior": {
                    "kind": decl.behavior.kind.value,
                    "function": decl.behavior.function,
                    "reducer": decl.behavior.reducer,
                    "delay": decl.behavior.delay,
                    "iterations": decl.behavior.iterations,
                    "deterministic": decl.behavior.deterministic,
                },
                "policy": {
                    "kind": decl.policy.kind.value,
                    "period": decl.policy.period,
                    "log_outputs": decl.policy.log_outputs,
                    "track_estimates": decl.policy.track_estimates,
                },
                "role": decl.role.value,
            }
        )
    edges = [
        {
            "id": e.id,
            "src": e.src,
            "dst": e.dst,
            "projection": {"kind": e.projection.kind.value, "window": e.projection.window},
        }
        for e in graph.edges
    ]
    return {"processors": processors, "edges": edges}


def snapshot_to_dict(snapshot: SystemSnapshot) -> dict[str, Any]:
    """A snapshot in the file format read by ``parse_snapshot``."""
    processors: dict[str, Any] = {}
    checkpoints: dict[str, Any] = {}
    for pid in snapshot.graph.processor_ids:
        available = snapshot.available[pid]
        processors[pid] = {
            "frontiers": [f.text for f in available.frontiers],
            "ceiling": None if available.ceiling is None else available.ceiling.text,
            "failed": pid in snapshot.failed,
        }
        recorded = snapshot.metadata.get(pid, {})
        if recorded:
            checkpoints[pid] = [recorded[f].to_dict() for f in available.frontiers if f in recorded]
    return {
        "graph": graph_to_dict(snapshot.graph),
        "processors": processors,
        "checkpoints": checkpoints,
    }
