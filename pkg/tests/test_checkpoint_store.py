"""Tests for core/checkpoint_store.py — records, metadata, durable storage and GC."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from core.behaviors import BehaviorKind, BehaviorSpec
from core.checkpoint_store import (
    AvailableFrontiers,
    CheckpointMetadata,
    CheckpointRejected,
    CheckpointStore,
    MetadataError,
    ceiling_metadata,
    default_metadata,
    external_ack_metadata,
    live_metadata,
    restores_anywhere,
)
from core.config import StorageConfig
from core.graph_model import (
    EdgeDecl,
    ExternalRole,
    GraphSpec,
    ProcessorDecl,
    ProjectionKind,
    ProjectionSpec,
)
from core.logical_time import Frontier, LogicalTime, TimeDomain
from core.processor import Message, Notification, Processor
from policies.checkpoint_policies import CheckpointPolicy, policy_from_regime

EPOCHS = TimeDomain.epochs()
LOOP = TimeDomain.structured(1)


def _epoch(n: int) -> LogicalTime:
    return LogicalTime.epoch(EPOCHS, n)


def _upto(n: int) -> Frontier:
    return Frontier.of(EPOCHS, [_epoch(n)])


def _graph(
    policy: CheckpointPolicy, kind: BehaviorKind = BehaviorKind.BUFFER, **behavior
) -> GraphSpec:
    ingress = ProcessorDecl(
        "i", EPOCHS, BehaviorSpec(BehaviorKind.INGRESS_SOURCE), role=ExternalRole.INGRESS
    )
    return GraphSpec(
        (
            ingress,
            ProcessorDecl("p", EPOCHS, BehaviorSpec(kind, **behavior), policy),
            ProcessorDecl("q", EPOCHS, BehaviorSpec(BehaviorKind.SELECT)),
        ),
        (EdgeDecl("d", "i", "p"), EdgeDecl("e", "p", "q")),
    )


def _fed(policy: CheckpointPolicy, *epochs: int, **behavior) -> tuple[CheckpointStore, Processor]:
    graph = _graph(policy, **behavior)
    processor = Processor(graph.processor("p"), graph)
    for n in epochs:
        processor.deliver(Message(_epoch(n), n * 10, "d"))
    return CheckpointStore(graph, config=StorageConfig(0, 0)), processor


class TestTakeCheckpoint:
    def test_records_restricted_state_and_default_metadata(self) -> None:
        store, processor = _fed(policy_from_regime("lazy"), 0, 1)
        record = store.take_checkpoint(processor, _upto(0), _upto(0))
        assert json.loads(record.state) == {"items": [["epoch:0", 0]]}
        assert [e.event.time for e in record.history] == [_epoch(0)]
        assert record.meta.mbar == {"d": _upto(0)}
        assert record.meta.dbar == {"e": _upto(0)}
        assert record.logs == {}

    def test_logging_policy_keeps_sent_messages_and_discards_nothing(self) -> None:
        store, processor = _fed(policy_from_regime("batch"), 0, 1)
        record = store.take_checkpoint(processor, _upto(1), _upto(1))
        assert [m.payload for m in record.logs["e"]] == [0, 10]
        assert record.meta.dbar["e"].is_empty

    def test_log_history_rebuilds_state_by_replay(self) -> None:
        store, processor = _fed(policy_from_regime("log_history"), 0, 1)
        record = store.take_checkpoint(processor, _upto(0), _upto(1))
        assert json.loads(record.state) == {"items": [["epoch:0", 0]]}
        assert record.meta.mbar["d"] == _upto(0)
        assert record.meta.nbar.is_empty

    def test_rejects_incomplete_frontier(self) -> None:
        store, processor = _fed(policy_from_regime("eager"), 0)
        with pytest.raises(CheckpointRejected, match="is not complete"):
            store.take_checkpoint(processor, _upto(1), _upto(0))

    def test_rejects_frontier_not_extending_chain(self) -> None:
        store, processor = _fed(policy_from_regime("eager"), 0, 1)
        store.storage_persist(store.take_checkpoint(processor, _upto(1), _upto(1)), now=0)
        with pytest.raises(CheckpointRejected, match="does not extend"):
            store.take_checkpoint(processor, _upto(0), _upto(1))

    def test_delayed_sender_without_exact_tracking_is_refused(self) -> None:
        graph = _graph(policy_from_regime("eager"), kind=BehaviorKind.SELECT, delay=1)
        decl = graph.processor("p")
        with pytest.raises(MetadataError, match="sends into the future"):
            default_metadata(decl, graph, _upto(0), {"e": _upto(1)})


class TestMetadata:
    def test_problems_flag_estimates_beyond_frontier(self) -> None:
        meta = CheckpointMetadata("p", _upto(0), nbar=_upto(1), mbar={"d": _upto(2)})
        problems = meta.problems()
        assert len(problems) == 2
        assert "exceeds {epoch:0}" in problems[0]

    def test_problems_flag_discarded_beyond_projection(self) -> None:
        meta = CheckpointMetadata(
            "p", _upto(1), nbar=_upto(1), dbar={"e": _upto(1)}, phi={"e": _upto(0)}
        )
        assert meta.problems() == ["discarded(e) {epoch:1} of p exceeds projection {epoch:0}"]

    def test_live_metadata_is_exact_at_top(self) -> None:
        store, processor = _fed(policy_from_regime("ephemeral"), 0, 2)
        meta = live_metadata(processor)
        assert meta.f.is_top
        assert meta.mbar["d"] == _upto(2)
        assert meta.dbar["e"] == _upto(2)
        assert meta.phi["e"].is_top

    def test_exact_nbar_counts_notifications(self) -> None:
        store, processor = _fed(policy_from_regime("log_history"), 0, kind=BehaviorKind.SUM)
        processor.deliver(Notification(_epoch(0)))
        record = store.take_checkpoint(processor, _upto(0), _upto(0))
        assert record.meta.nbar == _upto(0)

    def test_ceiling_and_external_metadata(self) -> None:
        graph = _graph(CheckpointPolicy())
        ceiling = ceiling_metadata(graph, "p", _upto(3))
        assert ceiling.dbar == {"e": _upto(3)} == ceiling.phi
        external = external_ack_metadata(graph, "q", _upto(1))
        assert external.mbar == {"e": _upto(1)}
        assert external.problems() == []


class TestRestoresAnywhere:
    def test_stateless_ephemeral_processor_qualifies(self) -> None:
        graph = _graph(CheckpointPolicy(), kind=BehaviorKind.SELECT)
        assert restores_anywhere(graph, "p")
        assert restores_anywhere(graph, "i")

    def test_stateful_behavior_does_not(self) -> None:
        assert not restores_anywhere(_graph(CheckpointPolicy()), "p")

    def test_checkpointing_policy_does_not(self) -> None:
        graph = _graph(policy_from_regime("eager"), kind=BehaviorKind.SELECT)
        assert not restores_anywhere(graph, "p")

    def test_send_delay_does_not(self) -> None:
        graph = _graph(CheckpointPolicy(), kind=BehaviorKind.SELECT, delay=1)
        assert not restores_anywhere(graph, "p")

    def test_loop_exit_edge_does_not(self) -> None:
        graph = GraphSpec(
            (
                ProcessorDecl("q", LOOP, BehaviorSpec(BehaviorKind.SELECT)),
                ProcessorDecl("x", EPOCHS, BehaviorSpec(BehaviorKind.SELECT)),
            ),
            (EdgeDecl("out", "q", "x", ProjectionSpec(ProjectionKind.LOOP_EGRESS)),),
        )
        assert not restores_anywhere(graph, "q")


class TestAvailableFrontiers:
    def test_must_start_empty(self) -> None:
        with pytest.raises(ValueError, match="must start at EMPTY"):
            AvailableFrontiers("p", (_upto(0),))

    def test_must_be_a_chain(self) -> None:
        empty = Frontier.empty(EPOCHS)
        with pytest.raises(ValueError, match="not a chain"):
            AvailableFrontiers("p", (empty, _upto(1), _upto(0)))

    def test_ceiling_admits_everything_below(self) -> None:
        available = AvailableFrontiers("p", (Frontier.empty(EPOCHS),), _upto(3))
        assert available.maximum == _upto(3)
        assert available.admits(_upto(2))
        assert not available.admits(_upto(4))


class TestDurableStorage:
    def test_acks_arrive_in_chain_order(self) -> None:
        graph = _graph(policy_from_regime("eager"))
        processor = Processor(graph.processor("p"), graph)
        for n in (0, 1):
            processor.deliver(Message(_epoch(n), n, "d"))
        store = CheckpointStore(graph, config=StorageConfig(0, 0))
        store.storage_persist(store.take_checkpoint(processor, _upto(0), _upto(1)), now=3)
        store.storage_persist(store.take_checkpoint(processor, _upto(1), _upto(1)), now=5)
        assert store.next_ack_due() == 3
        assert store.last_requested("p") == _upto(1)
        assert [r.frontier for r in store.acknowledge(4)] == [_upto(0)]
        assert [r.frontier for r in store.acknowledge(9)] == [_upto(1)]
        assert store.next_ack_due() is None
        assert store.available("p").frontiers == (Frontier.empty(EPOCHS), _upto(0), _upto(1))

    def test_live_processor_may_stay_at_top(self) -> None:
        store, _ = _fed(policy_from_regime("eager"))
        assert store.available("p", live=True).frontiers[-1].is_top
        assert store.available("p").frontiers == (Frontier.empty(EPOCHS),)

    def test_failure_loses_unacknowledged_records(self) -> None:
        store, processor = _fed(policy_from_regime("eager"), 0)
        store.storage_persist(store.take_checkpoint(processor, _upto(0), _upto(0)), now=0)
        assert store.discard_inflight("p") == 1
        assert store.acknowledge(10) == []

    def test_truncate_and_collect(self) -> None:
        store, processor = _fed(policy_from_regime("eager"), 0, 1, 2)
        for n in (0, 1, 2):
            store.persist_now(store.take_checkpoint(processor, _upto(n), _upto(2)))
        assert store.collect("p", _upto(1)) == [_upto(0)]
        store.truncate("p", _upto(1))
        assert [r.frontier for r in store.records("p")] == [_upto(1)]
        assert store.record_for("p", _upto(1)) is not None
        assert store.record_for("p", _upto(2)) is None

    def test_trim_logs_drops_received_prefix(self) -> None:
        store, processor = _fed(policy_from_regime("batch"), 0, 1, 2)
        store.persist_now(store.take_checkpoint(processor, _upto(2), _upto(2)))
        assert store.trim_logs("e", _upto(1)) == 2
        assert [m.payload for m in store.records("p")[0].logs["e"]] == [20]

    def test_save_writes_json_atomically(self, tmp_path: Path) -> None:
        store, processor = _fed(policy_from_regime("eager"), 0)
        store.persist_now(store.take_checkpoint(processor, _upto(0), _upto(0)))
        path = tmp_path / "out" / "checkpoints.json"
        store.save(path)
        saved = json.loads(path.read_text())
        assert saved["processors"]["p"][0]["f"] == "{epoch:0}"
        assert saved["processors"]["i"] == []
        assert list(path.parent.glob("*.tmp")) == []
