"""Simulated external output service with acknowledged or fire-and-forget delivery."""

from __future__ import annotations

import enum
import logging
import random
from dataclasses import dataclass
from typing import Any

from core.logical_time import LogicalTime

logger = logging.getLogger(__name__)


class SinkMode(str, enum.Enum):
    ACKED = "acked"
    EPHEMERAL = "ephemeral"


@dataclass(frozen=True)
class OutputBatch:
    sink: str
    time: LogicalTime
    key: str | None
    payloads: tuple[Any, ...]


class ExternalSink:
    """Accepts output batches; acked sinks confirm each after a random latency.

    Acked sinks deduplicate retries by key (the batch time); ephemeral sinks
    take everything and never confirm.
    """

    def __init__(
        self,
        name: str,
        mode: SinkMode = SinkMode.ACKED,
        latency: tuple[int, int] = (0, 0),
        rng: random.Random | None = None,
    ) -> None:
        self.name = name
        self.mode = mode
        self.latency = latency
        self._rng = rng or random.Random(0)
        self.received: list[OutputBatch] = []
        self._acked: set[str] = set()

    def receive(
        self, time: LogicalTime, payloads: list[Any], now: int
    ) -> tuple[OutputBatch, int | None]:
        """Record a batch; returns it and the step its ack is due (None when unacked)."""
        key = time.text if self.mode is SinkMode.ACKED else None
        batch = OutputBatch(self.name, time, key, tuple(payloads))
        if key in self._acked:
            logger.debug("  sink %s dropped duplicate %s", self.name, key)
            return batch, None
        self.received.append(batch)
        if self.mode is SinkMode.EPHEMERAL:
            return batch, None
        low, high = self.latency
        return batch, now + self._rng.randint(low, high)

    def acknowledge(self, batch: OutputBatch) -> None:
        if batch.key is not None:
            self._acked.add(batch.key)

    def is_acked(self, time: LogicalTime) -> bool:
        return time.text in self._acked
