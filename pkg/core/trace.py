"""Run traces: one line per event, and the external-effects comparison between runs."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from core.behaviors import canonical_json

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OutputRecord:
    """A batch written to an external sink, as parsed back from a trace line."""

    sink: str
    time: str
    key: str | None
    payloads: tuple[Any, ...]


@dataclass(frozen=True)
class Divergence:
    sink: str
    time: str
    expected: tuple[Any, ...]
    actual: tuple[Any, ...]

    @property
    def text(self) -> str:
        return (
            f"divergence at {self.sink} {self.time}: expected {canonical_json(list(self.expected))}"
            f" got {canonical_json(list(self.actual))}"
        )


@dataclass
class Trace:
    lines: list[str] = field(default_factory=list)

    def add(self, kind: str, *fields: Any) -> None:
        self.lines.append(" ".join([kind, *(str(f) for f in fields)]))

    def output(self, sink: str, time: str, key: str | None, payloads: list[Any]) -> None:
        self.add("output", sink, time, key or "-", canonical_json(payloads))

    @property
    def text(self) -> str:
        return "".join(f"{line}\n" for line in self.lines)

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.text)

    @classmethod
    def read(cls, path: Path) -> Trace:
        return cls([line for line in path.read_text().splitlines() if line.strip()])

    def outputs(self) -> list[OutputRecord]:
        records: list[OutputRecord] = []
        for line in self.lines:
            if not line.startswith("output "):
                continue
            _, sink, time, key, payloads = line.split(" ", 4)
            records.append(
                OutputRecord(sink, time, None if key == "-" else key, tuple(json.loads(payloads)))
            )
        return records


def _external_effects(trace: Trace) -> dict[tuple[str, str], Counter[str]]:
    """Items written per (sink, time); keyed batches count once per key."""
    seen: set[tuple[str, str, str]] = set()
    effects: dict[tuple[str, str], Counter[str]] = {}
    for record in trace.outputs():
        if record.key is not None:
            dedup = (record.sink, record.time, record.key)
            if dedup in seen:
                continue
            seen.add(dedup)
        items = effects.setdefault((record.sink, record.time), Counter())
        items.update(canonical_json(p) for p in record.payloads)
    return effects


def compare_external(a: Trace, b: Trace) -> Divergence | None:
    """The first (sink, time) whose output multiset differs between ``a`` and ``b``."""
    left, right = _external_effects(a), _external_effects(b)
    for sink, time in sorted(set(left) | set(right)):
        expected = left.get((sink, time), Counter())
        actual = right.get((sink, time), Counter())
        if expected != actual:
            divergence = Divergence(
                sink,
                time,
                tuple(json.loads(p) for p in sorted(expected.elements())),
                tuple(json.loads(p) for p in sorted(actual.elements())),
            )
            logger.info("External effects diverge at %s %s", sink, time)
            return divergence
    return None
