"""Checkpoint policies and the named regimes a processor can adopt.

A dataflow may mix regimes freely, one per processor.  The REGIMES table
doubles as human-readable documentation of what each regime records and
when; scenario files refer to its keys by name.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass


class PolicyKind(str, enum.Enum):
    EPHEMERAL = "ephemeral"
    EAGER_PER_EVENT = "eager_per_event"
    LAZY_ON_COMPLETION = "lazy_on_completion"
    LOG_ALL_HISTORY = "log_all_history"
    LOG_SENT_MESSAGES = "log_sent_messages"


@dataclass(frozen=True)
class CheckpointPolicy:
    kind: PolicyKind = PolicyKind.EPHEMERAL
    period: int = 1                 # Completions between lazy checkpoints
    log_outputs: bool = False       # Keep every sent message alongside each record
    track_estimates: bool = False   # Record exact estimates instead of the approximations

    def __post_init__(self) -> None:
        if self.period < 1:
            raise ValueError("checkpoint period must be at least 1")

    @property
    def takes_checkpoints(self) -> bool:
        return self.kind is not PolicyKind.EPHEMERAL

    @property
    def logs_everything(self) -> bool:
        """True when every sent message is logged, so nothing is ever discarded."""
        return self.log_outputs or self.kind in (
            PolicyKind.LOG_SENT_MESSAGES,
            PolicyKind.LOG_ALL_HISTORY,
        )

    @property
    def exact_metadata(self) -> bool:
        return self.track_estimates or self.kind is PolicyKind.LOG_ALL_HISTORY

    @property
    def completions_per_checkpoint(self) -> int:
        return self.period if self.kind is PolicyKind.LAZY_ON_COMPLETION else 1


REGIMES = {
    "ephemeral": {
        "description": "Streaming operator that keeps no durable state.",
        "rules": [
            "No checkpoints and no logs; after a failure the processor restarts empty",
            "Stateless behaviors may instead resume at any completed frontier",
        ],
        "policy": {"kind": "ephemeral"},
    },
    "batch": {
        "description": "RDD-style firewall: log every output once its time completes.",
        "rules": [
            "A record is taken at every completion, with all sent messages logged",
            "Downstream failures are repaired from the logs without touching upstream",
        ],
        "policy": {"kind": "log_sent_messages"},
    },
    "lazy": {
        "description": "Periodic selective checkpoint at completed frontiers.",
        "rules": [
            "A record is taken after every `period` advances of the completed frontier",
            "Only state for completed times is saved; later times are re-executed",
        ],
        "policy": {"kind": "lazy_on_completion", "period": 1},
    },
    "eager": {
        "description": "Checkpoint as soon as any event completes a new frontier.",
        "rules": [
            "A record is taken whenever the completed frontier grows after an event",
        ],
        "policy": {"kind": "eager_per_event"},
    },
    "log_history": {
        "description": "Keep the whole event history; rebuild state by replay.",
        "rules": [
            "A record is taken at every completion from a replay of the filtered history",
            "Only deterministic behaviors may use this regime",
        ],
        "policy": {"kind": "log_all_history"},
    },
}


def policy_from_regime(name: str) -> CheckpointPolicy:
    """Resolve a regime name from REGIMES into a CheckpointPolicy."""
    try:
        raw = REGIMES[name]["policy"]
    except KeyError:
        raise ValueError(
            f"unknown checkpoint regime {name!r}; expected one of {sorted(REGIMES)}"
        ) from None
    return CheckpointPolicy(
        kind=PolicyKind(raw["kind"]),
        period=int(raw.get("period", 1)),
        log_outputs=bool(raw.get("log_outputs", False)),
        track_estimates=bool(raw.get("track_estimates", False)),
    )
