"""Tests for core/rollback.py — constraint checks, the fixed point, the oracle and resets."""

from __future__ import annotations

import math
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from core.behaviors import BehaviorKind, BehaviorSpec
from core.checkpoint_store import AvailableFrontiers, CheckpointMetadata, CheckpointStore
from core.config import StorageConfig
from core.graph_model import EdgeDecl, ExternalRole, GraphSpec, ProcessorDecl
from core.logical_time import Frontier, LogicalTime, TimeDomain, parse_frontier
from core.processor import Message, Processor
from core.rollback import (
    OracleLimitExceeded,
    RollbackAssignment,
    RollbackError,
    SystemSnapshot,
    brute_force_oracle,
    check_consistent,
    choose_frontiers,
    greatest_notification_frontiers,
    reset_state,
)
from core.scenario import load_snapshot
from policies.checkpoint_policies import CheckpointPolicy, policy_from_regime

SNAPSHOTS = Path(__file__).resolve().parent.parent / "snapshots"
EPOCHS = TimeDomain.epochs()


def _snapshot(name: str) -> SystemSnapshot:
    return load_snapshot(SNAPSHOTS / f"{name}.json")


def _texts(assignment: RollbackAssignment) -> dict[str, str]:
    return {pid: f.text for pid, f in assignment.f.items()}


def _assign(snapshot: SystemSnapshot, **frontiers: str) -> RollbackAssignment:
    f = {
        pid: parse_frontier(snapshot.graph.domain_of(pid), text)
        for pid, text in frontiers.items()
    }
    return RollbackAssignment(f, greatest_notification_frontiers(snapshot, f))


class TestCheckConsistent:
    def test_notification_constraint_catches_what_messages_miss(self) -> None:
        snapshot = _snapshot("notification_frontier")
        a = _assign(snapshot, p="EMPTY", q="{epoch:1}", r="{epoch:1}", x="{epoch:1}")
        violations = check_consistent(snapshot, a)
        assert [(v.constraint, v.processor) for v in violations] == [
            ("notification-processed", "x")
        ]
        assert violations[0].text == (
            "notification-processed at x: {epoch:1} is not within EMPTY"
        )

    def test_all_empty_is_always_consistent(self) -> None:
        snapshot = _snapshot("rdd_firewall")
        a = _assign(snapshot, q="EMPTY", r="EMPTY", p="EMPTY", y="EMPTY", x="EMPTY")
        assert check_consistent(snapshot, a) == []

    def test_discarded_message_outside_receiver(self) -> None:
        snapshot = _snapshot("rdd_firewall")
        a = _assign(snapshot, q="TOP", r="TOP", p="TOP", y="EMPTY", x="EMPTY")
        assert check_consistent(snapshot, a) == []
        a = _assign(snapshot, q="TOP", r="EMPTY", p="EMPTY", y="EMPTY", x="EMPTY")
        kinds = {(v.constraint, v.processor, v.edge) for v in check_consistent(snapshot, a)}
        assert ("discarded", "q", "e1") in kinds

    def test_unavailable_frontier_raises(self) -> None:
        snapshot = _snapshot("notification_frontier")
        a = _assign(snapshot, p="{epoch:1}", q="EMPTY", r="EMPTY", x="EMPTY")
        with pytest.raises(RollbackError, match="not an available frontier of p"):
            check_consistent(snapshot, a)

    def test_missing_metadata_raises(self) -> None:
        snapshot = _snapshot("notification_frontier")
        with pytest.raises(RollbackError, match="q has no checkpoint at"):
            snapshot.meta("q", parse_frontier(EPOCHS, "{epoch:5}"))


class TestChooseFrontiers:
    def test_notification_counterexample(self) -> None:
        snapshot = _snapshot("notification_frontier")
        a = choose_frontiers(snapshot)
        assert _texts(a) == {"p": "EMPTY", "q": "{epoch:1}", "r": "{epoch:1}", "x": "EMPTY"}
        assert a.fn["r"].is_empty
        assert check_consistent(snapshot, a) == []

    def test_logging_firewall_keeps_upstream_live(self) -> None:
        snapshot = _snapshot("rdd_firewall")
        a = choose_frontiers(snapshot)
        assert _texts(a) == {"q": "TOP", "r": "TOP", "p": "TOP", "y": "EMPTY", "x": "EMPTY"}
        assert check_consistent(snapshot, a) == []

    def test_loop_rolls_back_to_the_last_safe_iteration(self) -> None:
        snapshot = _snapshot("loop_rollback")
        a = choose_frontiers(snapshot)
        assert _texts(a) == {
            "i": "TOP",
            "q": "{tuple:1.4}",
            "y": "{tuple:1.3}",
            "x": "TOP",
        }
        assert check_consistent(snapshot, a) == []

    def test_steps_record_every_lowering(self) -> None:
        a = choose_frontiers(_snapshot("rdd_firewall"))
        assert a.iterations >= len(a.steps) == 1
        assert a.steps[0].endswith("x f=EMPTY fn=EMPTY")

    def test_full_seed_reaches_the_same_assignment(self) -> None:
        snapshot = _snapshot("notification_frontier")
        seeded = choose_frontiers(snapshot, snapshot.graph.processor_ids)
        assert seeded.f == choose_frontiers(snapshot).f

    def test_lines_list_every_processor(self) -> None:
        a = choose_frontiers(_snapshot("notification_frontier"))
        assert a.lines()[0] == "p f=EMPTY fn=EMPTY"
        assert len(a.lines()) == 4


class TestOracle:
    def test_unique_maximum_matches_choice(self) -> None:
        snapshot = _snapshot("notification_frontier")
        maximal = brute_force_oracle(snapshot)
        assert len(maximal) == 1
        assert maximal[0].f == choose_frontiers(snapshot).f

    def test_enumeration_bound(self) -> None:
        with pytest.raises(OracleLimitExceeded, match="exceed the oracle limit 1"):
            brute_force_oracle(_snapshot("notification_frontier"), limit=1)


# ── reset ─────────────────────────────────────────────────────────


def _epoch(n: int) -> LogicalTime:
    return LogicalTime.epoch(EPOCHS, n)


def _upto(n: int) -> Frontier:
    return Frontier.of(EPOCHS, [_epoch(n)])


class _Pipeline:
    """i → d → p → e → q with p a buffer under ``regime`` and q a stateless select."""

    def __init__(self, regime: str) -> None:
        ingress = ProcessorDecl(
            "i", EPOCHS, BehaviorSpec(BehaviorKind.INGRESS_SOURCE), role=ExternalRole.INGRESS
        )
        self.graph = GraphSpec(
            (
                ingress,
                ProcessorDecl(
                    "p", EPOCHS, BehaviorSpec(BehaviorKind.BUFFER), policy_from_regime(regime)
                ),
                ProcessorDecl("q", EPOCHS, BehaviorSpec(BehaviorKind.SELECT), CheckpointPolicy()),
            ),
            (EdgeDecl("d", "i", "p"), EdgeDecl("e", "p", "q")),
        )
        self.store = CheckpointStore(self.graph, config=StorageConfig(0, 0))
        self.p = Processor(self.graph.processor("p"), self.graph)
        self.q = Processor(self.graph.processor("q"), self.graph)
        for n in (0, 1):
            for message in self.p.deliver(Message(_epoch(n), n, "d")):
                self.q.receive(message)

    def assignment(self, **frontiers: Frontier) -> RollbackAssignment:
        f = {"i": Frontier.top(EPOCHS), "p": Frontier.top(EPOCHS), "q": Frontier.top(EPOCHS)}
        f.update(frontiers)
        return RollbackAssignment(f, f)


class TestResetState:
    def test_live_processor_at_top_keeps_state_and_resends_logs(self) -> None:
        pipeline = _Pipeline("batch")
        plan = reset_state("p", pipeline.assignment(q=_upto(0)), pipeline.store, pipeline.p)
        assert plan.state is None
        assert len(plan.history) == 2
        assert [m.payload for m in plan.resend["e"]] == [1]

    def test_empty_restarts_from_nothing(self) -> None:
        pipeline = _Pipeline("eager")
        plan = reset_state(
            "p", pipeline.assignment(p=Frontier.empty(EPOCHS)), pipeline.store, pipeline.p
        )
        assert plan.state == b""
        assert plan.history == ()
        assert plan.available == (Frontier.empty(EPOCHS),)

    def test_restores_persisted_record(self) -> None:
        pipeline = _Pipeline("eager")
        record = pipeline.store.take_checkpoint(pipeline.p, _upto(0), _upto(1))
        pipeline.store.persist_now(record)
        pipeline.p.fail()
        plan = reset_state("p", pipeline.assignment(p=_upto(0)), pipeline.store, pipeline.p)
        assert plan.state == record.state
        assert plan.available == (Frontier.empty(EPOCHS), _upto(0))
        assert plan.resend == {}

    def test_stateless_processor_restricts_its_live_history(self) -> None:
        pipeline = _Pipeline("eager")
        plan = reset_state("q", pipeline.assignment(q=_upto(0)), pipeline.store, pipeline.q)
        assert [e.event.time for e in plan.history] == [_epoch(0)]

    def test_failed_stateless_processor_restarts_empty(self) -> None:
        pipeline = _Pipeline("eager")
        pipeline.q.fail()
        plan = reset_state("q", pipeline.assignment(q=_upto(0)), pipeline.store, pipeline.q)
        assert plan.state == b""
        assert plan.history == ()

    def test_missing_record_raises(self) -> None:
        pipeline = _Pipeline("eager")
        with pytest.raises(RollbackError, match="no checkpoint of p"):
            reset_state("p", pipeline.assignment(p=_upto(0)), pipeline.store, pipeline.p)


# ── oracle agreement ──────────────────────────────────────────────

_SELECT = BehaviorSpec(BehaviorKind.SELECT)
_CEILINGS = [_upto(n) for n in range(4)] + [Frontier.top(EPOCHS)]
# Keeps the oracle's enumeration small enough for a property test.
_CANDIDATE_BUDGET = 500


def _lagging(n: int, lag: int) -> Frontier:
    return _upto(n - lag) if n >= lag else Frontier.empty(EPOCHS)


def _trim(chains: dict[str, list[int]], fixed: int) -> None:
    """Drop the latest checkpoint of the longest chain until the enumeration fits."""
    while fixed * math.prod(len(c) + 1 for c in chains.values()) > _CANDIDATE_BUDGET:
        longest = max(chains, key=lambda pid: len(chains[pid]))
        chains[longest].pop()


@st.composite
def _failed_dags(draw) -> SystemSnapshot:
    """Every processor of a random DAG failed, with sound metadata that grows along each chain.

    Processors without inputs may instead restore anywhere below a ceiling.
    """
    size = draw(st.integers(min_value=1, max_value=6))
    ids = [f"p{i}" for i in range(size)]
    pairs = [(a, b) for a in range(size) for b in range(a + 1, size)]
    wired = draw(st.lists(st.sampled_from(pairs), unique=True, max_size=8)) if pairs else []
    graph = GraphSpec(
        tuple(ProcessorDecl(pid, EPOCHS, _SELECT) for pid in ids),
        tuple(EdgeDecl(f"e{a}{b}", ids[a], ids[b]) for a, b in sorted(wired)),
    )

    ceilings: dict[str, Frontier] = {}
    for pid in [pid for pid in ids if not graph.in_edges(pid)][:2]:
        if draw(st.booleans()):
            ceilings[pid] = draw(st.sampled_from(_CEILINGS))
    chains = {
        pid: sorted(draw(st.sets(st.integers(min_value=0, max_value=3), max_size=4)))
        for pid in ids
        if pid not in ceilings
    }
    _trim(chains, 6 ** len(ceilings))

    available: dict[str, AvailableFrontiers] = {}
    metadata: dict[str, dict[Frontier, CheckpointMetadata]] = {}
    for pid in ids:
        metadata[pid] = {}
        if pid in ceilings:
            available[pid] = AvailableFrontiers(pid, (Frontier.empty(EPOCHS),), ceilings[pid])
            continue
        notify_lag = draw(st.integers(min_value=0, max_value=2))
        logged = draw(st.booleans())
        one_step = st.integers(min_value=0, max_value=1)
        discard_lag = draw(one_step)
        deliver_lag = {d.id: draw(one_step) for d in graph.in_edges(pid)}
        recorded = [_upto(n) for n in chains[pid]]
        available[pid] = AvailableFrontiers(pid, (Frontier.empty(EPOCHS), *recorded))
        for n, f in zip(chains[pid], recorded):
            outputs = graph.out_edges(pid)
            metadata[pid][f] = CheckpointMetadata(
                processor=pid,
                f=f,
                nbar=_lagging(n, notify_lag),
                mbar={d: _lagging(n, lag) for d, lag in deliver_lag.items()},
                dbar={
                    e.id: Frontier.empty(EPOCHS) if logged else _lagging(n, discard_lag)
                    for e in outputs
                },
                phi={e.id: f for e in outputs},
            )
    return SystemSnapshot(graph, available, metadata, frozenset(ids))


class TestOracleAgreement:
    @settings(max_examples=200, deadline=None)
    @given(_failed_dags())
    def test_choice_is_the_unique_maximum(self, snapshot: SystemSnapshot) -> None:
        chosen = choose_frontiers(snapshot)
        assert check_consistent(snapshot, chosen) == []
        maximal = [a.f for a in brute_force_oracle(snapshot)]
        assert chosen.f in maximal
        assert maximal == [chosen.f]

    @settings(max_examples=50, deadline=None)
    @given(_failed_dags())
    def test_recompute_from_every_processor_agrees(self, snapshot: SystemSnapshot) -> None:
        incremental = choose_frontiers(snapshot)
        recomputed = choose_frontiers(snapshot, snapshot.graph.processor_ids)
        assert recomputed.f == incremental.f
        assert recomputed.fn == incremental.fn

    def test_metadata_generated_for_the_oracle_is_sound(self) -> None:
        f = _upto(2)
        meta = CheckpointMetadata("p", f, _lagging(2, 2), {"d": _lagging(2, 1)}, {}, {})
        assert meta.problems() == []
        assert meta.nbar == _upto(0)
        assert _lagging(0, 1).is_empty
