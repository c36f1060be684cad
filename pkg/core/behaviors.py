"""Built-in processor behaviors and the registry that builds them by kind.

A behavior is the user code of a processor: it reacts to messages and
notifications, returns the messages it sends, and knows how to restrict its
state to a frontier (selective rollback) and how to encode it canonically.
State is always a JSON-compatible dict; per-time sections are keyed by the
canonical time text.
"""

from __future__ import annotations

import enum
import json
import random
from abc import ABC, abstractmethod
from collections.abc import Callable
from dataclasses import dataclass
from typing import Any, ClassVar

from core.logical_time import DomainKind, Frontier, LogicalTime, TimeDomain, parse_time

# Pseudo-edges: ingress processors read batches from SOURCE_EDGE, egress
# processors write batches to SINK_EDGE.  Neither is part of the graph.
SOURCE_EDGE = "@source"
SINK_EDGE = "@sink"

State = dict[str, Any]


class BehaviorKind(str, enum.Enum):
    SELECT = "select"
    SUM = "sum"
    BUFFER = "buffer"
    STATELESS_RELAY = "stateless_relay"
    EPOCH_BARRIER = "epoch_barrier"
    LOOP_INGRESS = "loop_ingress"
    LOOP_EGRESS_INCREMENT = "loop_egress_increment"
    KEYED_STATEFUL = "keyed_stateful"
    INGRESS_SOURCE = "ingress_source"
    EGRESS_SINK = "egress_sink"


MAP_FUNCTIONS: dict[str, Callable[[Any], Any]] = {
    "identity": lambda v: v,
    "increment": lambda v: v + 1,
    "double": lambda v: v * 2,
    "negate": lambda v: -v,
    "square": lambda v: v * v,
}
# Map functions that draw from the processor's random stream.
RANDOM_FUNCTIONS = frozenset({"jitter"})

REDUCERS: dict[str, Callable[[Any, Any], Any]] = {
    "sum": lambda acc, v: (acc or 0) + v,
    "count": lambda acc, _v: (acc or 0) + 1,
    "max": lambda acc, v: v if acc is None else max(acc, v),
    "min": lambda acc, v: v if acc is None else min(acc, v),
}


@dataclass(frozen=True)
class BehaviorSpec:
    kind: BehaviorKind
    function: str = "identity"
    reducer: str = "sum"
    delay: int = 0          # Select only: epochs to shift outputs into the future
    iterations: int = 0     # LoopEgressIncrement only: iterations before leaving the loop
    deterministic: bool = True

    def __post_init__(self) -> None:
        if self.function not in MAP_FUNCTIONS and self.function not in RANDOM_FUNCTIONS:
            raise ValueError(f"unknown map function {self.function!r}")
        if self.reducer not in REDUCERS:
            raise ValueError(f"unknown reducer {self.reducer!r}")
        if self.delay < 0 or self.iterations < 0:
            raise ValueError("delay and iterations must be non-negative")

    @property
    def is_deterministic(self) -> bool:
        return self.deterministic and self.function not in RANDOM_FUNCTIONS


@dataclass(frozen=True)
class Send:
    """A message produced by a behavior, stamped with a time of the sender's domain."""

    edge: str
    time: LogicalTime
    payload: Any


def canonical_json(value: Any) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"))


class Behavior(ABC):
    """Base class for processor behaviors."""

    kind: ClassVar[BehaviorKind]
    # Keeps nothing across times once a time's notification has been handled.
    stateless: ClassVar[bool] = True
    wants_notifications: ClassVar[bool] = False

    def __init__(
        self,
        spec: BehaviorSpec,
        domain: TimeDomain,
        outputs: tuple[str, ...] = (),
        exits: tuple[str, ...] = (),
        rng: random.Random | None = None,
    ) -> None:
        self.spec = spec
        self.domain = domain
        self.outputs = outputs
        self.exits = exits
        self.rng = rng or random.Random(0)

    @property
    def requests_notifications(self) -> bool:
        # sequence-number domains have no notifications
        return self.wants_notifications and self.domain.kind is not DomainKind.SEQUENCE

    def initial_state(self) -> State:
        return {}

    @abstractmethod
    def on_message(self, state: State, edge: str, time: LogicalTime, payload: Any) -> list[Send]:
        ...

    def on_notification(self, state: State, time: LogicalTime) -> list[Send]:
        return []

    def restrict(self, state: State, frontier: Frontier) -> State:
        """State as if only the events with times in ``frontier`` had been processed."""
        return {
            section: (
                {k: v for k, v in entries.items() if frontier.contains(self._time(k))}
                if isinstance(entries, dict)
                else entries
            )
            for section, entries in state.items()
        }

    def canonical(self, state: State) -> State:
        return state

    def encode(self, state: State) -> bytes:
        return canonical_json(self.canonical(state)).encode()

    def decode(self, blob: bytes) -> State:
        return json.loads(blob.decode()) if blob else self.initial_state()

    def _time(self, text: str) -> LogicalTime:
        return parse_time(self.domain, text)

    def _broadcast(
        self, time: LogicalTime, payload: Any, edges: tuple[str, ...] | None = None
    ) -> list[Send]:
        return [Send(edge, time, payload) for edge in (self.outputs if edges is None else edges)]

    def _map(self, payload: Any) -> Any:
        if self.spec.function in RANDOM_FUNCTIONS:
            return payload + self.rng.randint(0, 9)
        return MAP_FUNCTIONS[self.spec.function](payload)


class Select(Behavior):
    kind = BehaviorKind.SELECT

    def on_message(self, state: State, edge: str, time: LogicalTime, payload: Any) -> list[Send]:
        return self._broadcast(time.advance(self.spec.delay), self._map(payload))


class StatelessRelay(Behavior):
    kind = BehaviorKind.STATELESS_RELAY

    def on_message(self, state: State, edge: str, time: LogicalTime, payload: Any) -> list[Send]:
        return self._broadcast(time, payload)


class LoopIngress(Behavior):
    """Forwards into a loop; the edge projection adds the iteration counter."""

    kind = BehaviorKind.LOOP_INGRESS

    def on_message(self, state: State, edge: str, time: LogicalTime, payload: Any) -> list[Send]:
        return self._broadcast(time, payload)


class LoopEgressIncrement(Behavior):
    """Head of a loop: circulates messages until ``iterations``, then routes them out."""

    kind = BehaviorKind.LOOP_EGRESS_INCREMENT

    def on_message(self, state: State, edge: str, time: LogicalTime, payload: Any) -> list[Send]:
        counter = time.coords[-1]
        if counter is not None and counter >= self.spec.iterations:
            return self._broadcast(time, payload, self.exits)
        looping = tuple(e for e in self.outputs if e not in self.exits)
        return self._broadcast(time, self._map(payload), looping)


class Sum(Behavior):
    """Adds up the payloads of each time and emits the total when the time completes."""

    kind = BehaviorKind.SUM
    wants_notifications = True

    def initial_state(self) -> State:
        return {"sums": {}}

    def on_message(self, state: State, edge: str, time: LogicalTime, payload: Any) -> list[Send]:
        sums = state.setdefault("sums", {})
        sums[time.text] = sums.get(time.text, 0) + payload
        return []

    def on_notification(self, state: State, time: LogicalTime) -> list[Send]:
        total = state.setdefault("sums", {}).pop(time.text, None)
        if total is None:
            return []
        return self._broadcast(time, total)


class Buffer(Behavior):
    """Accumulates every message it sees, across times, and forwards it unchanged."""

    kind = BehaviorKind.BUFFER
    stateless = False

    def initial_state(self) -> State:
        return {"items": []}

    def on_message(self, state: State, edge: str, time: LogicalTime, payload: Any) -> list[Send]:
        state.setdefault("items", []).append([time.text, payload])
        return self._broadcast(time, payload)

    def restrict(self, state: State, frontier: Frontier) -> State:
        items = state.get("items", [])
        return {"items": [item for item in items if frontier.contains(self._time(item[0]))]}

    def canonical(self, state: State) -> State:
        items = state.get("items", [])
        return {"items": sorted(items, key=lambda item: (item[0], canonical_json(item[1])))}


class EpochBarrier(Behavior):
    """Holds each time's messages and releases them together at its notification."""

    kind = BehaviorKind.EPOCH_BARRIER
    wants_notifications = True

    def initial_state(self) -> State:
        return {"held": {}}

    def on_message(self, state: State, edge: str, time: LogicalTime, payload: Any) -> list[Send]:
        state.setdefault("held", {}).setdefault(time.text, []).append(payload)
        return []

    def on_notification(self, state: State, time: LogicalTime) -> list[Send]:
        held = state.setdefault("held", {}).pop(time.text, [])
        sends: list[Send] = []
        for payload in sorted(held, key=canonical_json):
            sends.extend(self._broadcast(time, payload))
        return sends


class KeyedStateful(Behavior):
    """Per-key running totals across times; each time's changes are emitted when it completes.

    Payloads are ``[key, value]`` pairs folded with the configured reducer.
    ``applied`` keeps each notified time's pairs so totals can be rebuilt for
    any frontier.
    """

    kind = BehaviorKind.KEYED_STATEFUL
    stateless = False
    wants_notifications = True

    def initial_state(self) -> State:
        return {"pending": {}, "applied": {}, "totals": {}}

    def on_message(self, state: State, edge: str, time: LogicalTime, payload: Any) -> list[Send]:
        key, value = payload
        state.setdefault("pending", {}).setdefault(time.text, []).append([str(key), value])
        return []

    def on_notification(self, state: State, time: LogicalTime) -> list[Send]:
        pending = sorted(state.setdefault("pending", {}).pop(time.text, []), key=canonical_json)
        if not pending:
            return []
        applied = state.setdefault("applied", {})
        applied.setdefault(time.text, []).extend(pending)
        totals = state.setdefault("totals", {})
        reducer = REDUCERS[self.spec.reducer]
        touched: set[str] = set()
        for key, value in pending:
            totals[key] = reducer(totals.get(key), value)
            touched.add(key)
        sends: list[Send] = []
        for key in sorted(touched):
            sends.extend(self._broadcast(time, [key, totals[key]]))
        return sends

    def _fold(self, applied: dict[str, list]) -> dict[str, Any]:
        reducer = REDUCERS[self.spec.reducer]
        totals: dict[str, Any] = {}
        for text in sorted(applied):
            for key, value in sorted(applied[text], key=canonical_json):
                totals[key] = reducer(totals.get(key), value)
        return totals

    def restrict(self, state: State, frontier: Frontier) -> State:
        def keep(section: str) -> dict[str, list]:
            entries = state.get(section, {})
            return {k: list(v) for k, v in entries.items() if frontier.contains(self._time(k))}

        applied = keep("applied")
        return {"pending": keep("pending"), "applied": applied, "totals": self._fold(applied)}

    def canonical(self, state: State) -> State:
        def ordered(section: str) -> dict[str, list]:
            return {k: sorted(v, key=canonical_json) for k, v in state.get(section, {}).items()}

        return {
            "pending": ordered("pending"),
            "applied": ordered("applied"),
            "totals": state.get("totals", {}),
        }


class IngressSource(Behavior):
    """Unpacks an external input batch into one message per payload."""

    kind = BehaviorKind.INGRESS_SOURCE

    def on_message(self, state: State, edge: str, time: LogicalTime, payload: Any) -> list[Send]:
        sends: list[Send] = []
        for item in payload:
            sends.extend(self._broadcast(time, item))
        return sends


class EgressSink(Behavior):
    """Writes completed times to the external sink as one batch per time.

    Sequence-number domains have no notifications, so every message is
    written as its own batch.
    """

    kind = BehaviorKind.EGRESS_SINK
    stateless = False
    wants_notifications = True

    def initial_state(self) -> State:
        return {"pending": {}}

    def on_message(self, state: State, edge: str, time: LogicalTime, payload: Any) -> list[Send]:
        if not self.requests_notifications:
            return [Send(SINK_EDGE, time, [payload])]
        state.setdefault("pending", {}).setdefault(time.text, []).append(payload)
        return []

    def on_notification(self, state: State, time: LogicalTime) -> list[Send]:
        batch = state.setdefault("pending", {}).pop(time.text, None)
        if batch is None:
            return []
        return [Send(SINK_EDGE, time, sorted(batch, key=canonical_json))]


BEHAVIORS: dict[BehaviorKind, type[Behavior]] = {
    cls.kind: cls
    for cls in (
        Select,
        Sum,
        Buffer,
        StatelessRelay,
        EpochBarrier,
        LoopIngress,
        LoopEgressIncrement,
        KeyedStateful,
        IngressSource,
        EgressSink,
    )
}


def build_behavior(
    spec: BehaviorSpec,
    domain: TimeDomain,
    outputs: tuple[str, ...] = (),
    exits: tuple[str, ...] = (),
    rng: random.Random | None = None,
) -> Behavior:
    """Instantiate the registered behavior for ``spec.kind``."""
    return BEHAVIORS[spec.kind](spec, domain, outputs, exits, rng)
