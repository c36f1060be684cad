"""Tests for policies/checkpoint_policies.py — regimes and the properties policies derive."""

from __future__ import annotations

import pytest

from policies.checkpoint_policies import (
    REGIMES,
    CheckpointPolicy,
    PolicyKind,
    policy_from_regime,
)


class TestRegimes:
    def test_every_regime_resolves(self) -> None:
        for name in REGIMES:
            assert isinstance(policy_from_regime(name), CheckpointPolicy)

    def test_every_regime_documents_its_rules(self) -> None:
        for name, regime in REGIMES.items():
            assert regime["description"], name
            assert regime["rules"], name

    def test_unknown_regime_lists_choices(self) -> None:
        with pytest.raises(ValueError, match="expected one of"):
            policy_from_regime("hourly")

    def test_batch_regime_logs_everything(self) -> None:
        policy = policy_from_regime("batch")
        assert policy.kind is PolicyKind.LOG_SENT_MESSAGES
        assert policy.logs_everything
        assert not policy.exact_metadata

    def test_log_history_regime_keeps_exact_metadata(self) -> None:
        policy = policy_from_regime("log_history")
        assert policy.exact_metadata
        assert policy.logs_everything

    def test_ephemeral_takes_no_checkpoints(self) -> None:
        assert not policy_from_regime("ephemeral").takes_checkpoints


class TestCheckpointPolicy:
    def test_lazy_period_counts_completions(self) -> None:
        policy = CheckpointPolicy(PolicyKind.LAZY_ON_COMPLETION, period=3)
        assert policy.completions_per_checkpoint == 3

    def test_period_ignored_outside_lazy(self) -> None:
        policy = CheckpointPolicy(PolicyKind.EAGER_PER_EVENT, period=3)
        assert policy.completions_per_checkpoint == 1

    def test_log_outputs_flag_makes_any_policy_log(self) -> None:
        assert CheckpointPolicy(PolicyKind.EAGER_PER_EVENT, log_outputs=True).logs_everything

    def test_rejects_zero_period(self) -> None:
        with pytest.raises(ValueError, match="at least 1"):
            CheckpointPolicy(PolicyKind.LAZY_ON_COMPLETION, period=0)
