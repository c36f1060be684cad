"""Simulated external input service: keeps batches until they are acknowledged."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any

from core.logical_time import Frontier, LogicalTime

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class InputBatch:
    batch: str
    time: LogicalTime
    payloads: tuple[Any, ...]
    at: int = 0


class ExternalSource:
    """Offers batches in list order and re-offers them after a rewind.

    A batch stays retained until an acknowledgement covers its time; only
    retained batches can be re-sent.
    """

    def __init__(self, name: str, batches: list[InputBatch]) -> None:
        self.name = name
        self.batches = list(batches)
        self._delivered: set[str] = set()
        self._acked: set[str] = set()

    # ── offering ──────────────────────────────────────────────────

    def available(self, now: int) -> InputBatch | None:
        """The next undelivered batch, if it has arrived by ``now``."""
        for batch in self.batches:
            if batch.batch in self._delivered:
                continue
            return batch if batch.at <= now else None
        return None

    def next_arrival(self) -> int | None:
        for batch in self.batches:
            if batch.batch not in self._delivered:
                return batch.at
        return None

    def pending_times(self) -> list[LogicalTime]:
        return [b.time for b in self.batches if b.batch not in self._delivered]

    def take(self, batch: InputBatch) -> None:
        self._delivered.add(batch.batch)

    # ── recovery and acks ─────────────────────────────────────────

    def rewind(self, frontier: Frontier) -> list[InputBatch]:
        """Mark delivered batches outside ``frontier`` for re-delivery."""
        resent: list[InputBatch] = []
        for batch in self.batches:
            if batch.batch in self._delivered and not frontier.contains(batch.time):
                if batch.batch in self._acked:
                    logger.warning(
                        "Source %s asked to re-send acknowledged batch %s", self.name, batch.batch
                    )
                    continue
                self._delivered.discard(batch.batch)
                resent.append(batch)
        if resent:
            logger.info(
                "Source %s re-offers %s", self.name, ", ".join(b.batch for b in resent)
            )
        return resent

    def ack(self, frontier: Frontier) -> list[InputBatch]:
        """Release delivered batches whose time lies in ``frontier``."""
        released = [
            b
            for b in self.batches
            if b.batch in self._delivered
            and b.batch not in self._acked
            and frontier.contains(b.time)
        ]
        for batch in released:
            self._acked.add(batch.batch)
        return released

    def ack_batch(self, batch_id: str) -> bool:
        if not any(b.batch == batch_id for b in self.batches):
            logger.warning("Source %s got an ack for unknown batch %s", self.name, batch_id)
            return False
        self._acked.add(batch_id)
        return True

    @property
    def retained(self) -> list[str]:
        return [b.batch for b in self.batches if b.batch not in self._acked]
