"""Logical times, time domains and the frontier algebra over downward-closed sets.

A frontier is stored as the antichain of its maximal elements.  Any coordinate
of an element may be the wildcard ``*`` (``None`` here), which stands for every
value of that coordinate, so "epoch 1 at any loop iteration" is the single
element ``tuple:1.*``.  Wildcards compare as an unbounded top value.
"""

from __future__ import annotations

import enum
from collections.abc import Iterable
from dataclasses import dataclass

WILDCARD = None

Coord = int | None


class DomainMismatch(Exception):
    """Raised when times or frontiers from different domains are combined."""


class DomainKind(str, enum.Enum):
    SEQUENCE = "sequence"
    EPOCHS = "epochs"
    STRUCTURED = "structured"


class Ordering(str, enum.Enum):
    PRODUCT = "product"
    LEXICOGRAPHIC = "lexicographic"


class Order(str, enum.Enum):
    LESS_EQUAL = "less-or-equal"
    GREATER = "greater"
    INCOMPARABLE = "incomparable"


@dataclass(frozen=True)
class TimeDomain:
    kind: DomainKind
    edges: frozenset[str] = frozenset()
    depth: int = 0
    ordering: Ordering = Ordering.LEXICOGRAPHIC

    def __post_init__(self) -> None:
        if self.depth < 0:
            raise ValueError("loop depth must be non-negative")
        if self.kind is not DomainKind.STRUCTURED and self.depth:
            raise ValueError(f"{self.kind.value} domains carry no loop counters")
        if self.kind is not DomainKind.SEQUENCE and self.edges:
            raise ValueError("only sequence-number domains name edges")

    @classmethod
    def sequence(cls, edges: Iterable[str]) -> TimeDomain:
        return cls(DomainKind.SEQUENCE, edges=frozenset(edges))

    @classmethod
    def epochs(cls) -> TimeDomain:
        return cls(DomainKind.EPOCHS)

    @classmethod
    def structured(
        cls, depth: int, ordering: Ordering = Ordering.LEXICOGRAPHIC
    ) -> TimeDomain:
        return cls(DomainKind.STRUCTURED, depth=depth, ordering=ordering)

    @property
    def width(self) -> int:
        """Number of coordinates carried by every time of the domain."""
        return 1 + self.depth

    @property
    def totally_ordered(self) -> bool:
        if self.kind is DomainKind.EPOCHS:
            return True
        return self.kind is DomainKind.STRUCTURED and self.ordering is Ordering.LEXICOGRAPHIC

    def describe(self) -> str:
        if self.kind is DomainKind.SEQUENCE:
            return f"sequence({','.join(sorted(self.edges))})"
        if self.kind is DomainKind.EPOCHS:
            return "epochs"
        return f"structured({self.depth},{self.ordering.value})"


@dataclass(frozen=True)
class LogicalTime:
    """A time, or a frontier element when some coordinates are wildcards."""

    domain: TimeDomain
    coords: tuple[Coord, ...]
    edge: str | None = None

    def __post_init__(self) -> None:
        if len(self.coords) != self.domain.width:
            raise ValueError(
                f"{self.domain.describe()} times have {self.domain.width} coordinates, "
                f"got {len(self.coords)}"
            )
        if self.domain.kind is DomainKind.SEQUENCE:
            if self.edge not in self.domain.edges:
                raise ValueError(f"edge {self.edge!r} is not in {self.domain.describe()}")
            if self.coords[0] is not None and self.coords[0] < 1:
                raise ValueError("sequence numbers start at 1")
        elif self.edge is not None:
            raise ValueError("only sequence-number times carry an edge")
        if any(c is not None and c < 0 for c in self.coords):
            raise ValueError("coordinates must be non-negative")
        if self.domain.kind is DomainKind.STRUCTURED and self.domain.totally_ordered:
            # in lexicographic order nothing after a wildcard can constrain the set
            if None in self.coords:
                cut = self.coords.index(None)
                normalized = self.coords[:cut] + (None,) * (len(self.coords) - cut)
                object.__setattr__(self, "coords", normalized)

    @classmethod
    def seq(cls, domain: TimeDomain, edge: str, number: Coord) -> LogicalTime:
        return cls(domain, (number,), edge)

    @classmethod
    def epoch(cls, domain: TimeDomain, number: Coord) -> LogicalTime:
        return cls(domain, (number,))

    @classmethod
    def structured(cls, domain: TimeDomain, epoch: Coord, *counters: Coord) -> LogicalTime:
        return cls(domain, (epoch, *counters))

    @property
    def is_concrete(self) -> bool:
        return None not in self.coords

    @property
    def epoch_number(self) -> Coord:
        return self.coords[0]

    @property
    def text(self) -> str:
        parts = ["*" if c is None else str(c) for c in self.coords]
        if self.domain.kind is DomainKind.SEQUENCE:
            return f"seq:{self.edge}:{parts[0]}"
        if self.domain.kind is DomainKind.EPOCHS:
            return f"epoch:{parts[0]}"
        return "tuple:" + ".".join(parts)

    def __str__(self) -> str:
        return self.text

    def advance(self, delta: int) -> LogicalTime:
        """Shift the epoch coordinate forward by ``delta``."""
        if not delta or self.coords[0] is None:
            return self
        return LogicalTime(self.domain, (self.coords[0] + delta, *self.coords[1:]), self.edge)

    def with_counter(self, domain: TimeDomain, counter: Coord) -> LogicalTime:
        """This time in ``domain`` with one extra innermost loop counter."""
        return LogicalTime(domain, (*self.coords, counter))

    def without_counter(self, domain: TimeDomain) -> LogicalTime:
        """This time in ``domain`` with the innermost loop counter dropped."""
        return LogicalTime(domain, self.coords[:-1])

    def incremented(self) -> LogicalTime:
        """The same time one loop iteration later."""
        last = self.coords[-1]
        if last is None:
            return self
        return LogicalTime(self.domain, (*self.coords[:-1], last + 1), self.edge)


# ── order ─────────────────────────────────────────────────────────


def _coord_le(x: Coord, y: Coord) -> bool:
    return y is None or (x is not None and x <= y)


def _le(a: LogicalTime, b: LogicalTime) -> bool:
    domain = a.domain
    if domain.kind is DomainKind.SEQUENCE:
        return a.edge == b.edge and _coord_le(a.coords[0], b.coords[0])
    if domain.kind is DomainKind.STRUCTURED and domain.ordering is Ordering.LEXICOGRAPHIC:
        for x, y in zip(a.coords, b.coords):
            if x == y:
                continue
            return _coord_le(x, y)
        return True
    return all(_coord_le(x, y) for x, y in zip(a.coords, b.coords))


def _check_domain(expected: TimeDomain, actual: TimeDomain) -> None:
    if expected != actual:
        raise DomainMismatch(
            f"cannot combine {expected.describe()} with {actual.describe()} "
            "(the dataflow graph wires incompatible time domains)"
        )


def leq(t1: LogicalTime, t2: LogicalTime) -> Order:
    """Compare two times of one domain."""
    _check_domain(t1.domain, t2.domain)
    if _le(t1, t2):
        return Order.LESS_EQUAL
    if _le(t2, t1):
        return Order.GREATER
    return Order.INCOMPARABLE


def time_le(t1: LogicalTime, t2: LogicalTime) -> bool:
    """Boolean form of :func:`leq`."""
    _check_domain(t1.domain, t2.domain)
    return _le(t1, t2)


def _meet(a: LogicalTime, b: LogicalTime) -> LogicalTime | None:
    """Greatest element below both, or None when their down-sets are disjoint."""
    domain = a.domain
    if domain.kind is DomainKind.SEQUENCE:
        if a.edge != b.edge:
            return None
        return a if _le(a, b) else b
    if domain.totally_ordered:
        return a if _le(a, b) else b
    coords = tuple(
        y if x is None else x if y is None else min(x, y) for x, y in zip(a.coords, b.coords)
    )
    return LogicalTime(domain, coords)


def _lex_predecessor(coords: tuple[Coord, ...]) -> tuple[Coord, ...] | None:
    """Coordinates of the element whose down-set is everything strictly below ``coords``."""
    for i in range(len(coords) - 1, -1, -1):
        c = coords[i]
        if c is None:
            return coords
        if c > 0:
            return coords[:i] + (c - 1,) + (None,) * (len(coords) - i - 1)
    return None


# ── frontiers ─────────────────────────────────────────────────────


@dataclass(frozen=True)
class Frontier:
    """A downward-closed set of times held as a canonical antichain.

    Build instances through :meth:`of`, :meth:`top` or :meth:`empty`; the
    constructor does not canonicalize.
    """

    domain: TimeDomain
    elements: tuple[LogicalTime, ...] = ()
    is_top: bool = False

    @classmethod
    def empty(cls, domain: TimeDomain) -> Frontier:
        return cls(domain)

    @classmethod
    def top(cls, domain: TimeDomain) -> Frontier:
        return cls(domain, is_top=True)

    @classmethod
    def of(cls, domain: TimeDomain, elements: Iterable[LogicalTime]) -> Frontier:
        unique: dict[str, LogicalTime] = {}
        for element in elements:
            _check_domain(domain, element.domain)
            unique.setdefault(element.text, element)
        candidates = [unique[k] for k in sorted(unique)]
        maximal = tuple(
            a for a in candidates if not any(b is not a and _le(a, b) for b in candidates)
        )
        if domain.kind is DomainKind.SEQUENCE:
            saturated = {e.edge for e in maximal if e.coords[0] is None}
            if domain.edges and saturated == domain.edges:
                return cls.top(domain)
        elif any(all(c is None for c in e.coords) for e in maximal):
            return cls.top(domain)
        return cls(domain, maximal)

    @property
    def is_empty(self) -> bool:
        return not self.is_top and not self.elements

    @property
    def text(self) -> str:
        if self.is_top:
            return "TOP"
        if not self.elements:
            return "EMPTY"
        return "{" + ",".join(e.text for e in self.elements) + "}"

    def __str__(self) -> str:
        return self.text

    def contains(self, t: LogicalTime) -> bool:
        _check_domain(self.domain, t.domain)
        if self.is_top:
            return True
        return any(_le(t, e) for e in self.elements)

    def issubset(self, other: Frontier) -> bool:
        _check_domain(self.domain, other.domain)
        if other.is_top:
            return True
        if self.is_top:
            return False
        return all(any(_le(a, b) for b in other.elements) for a in self.elements)

    def union(self, other: Frontier) -> Frontier:
        _check_domain(self.domain, other.domain)
        if self.is_top or other.is_top:
            return Frontier.top(self.domain)
        return Frontier.of(self.domain, self.elements + other.elements)

    def intersection(self, other: Frontier) -> Frontier:
        _check_domain(self.domain, other.domain)
        if self.is_top:
            return other
        if other.is_top:
            return self
        meets = (_meet(a, b) for a in self.elements for b in other.elements)
        return Frontier.of(self.domain, (m for m in meets if m is not None))

    def __le__(self, other: Frontier) -> bool:
        return self.issubset(other)

    def __lt__(self, other: Frontier) -> bool:
        return self.issubset(other) and self != other

    def __or__(self, other: Frontier) -> Frontier:
        return self.union(other)

    def __and__(self, other: Frontier) -> Frontier:
        return self.intersection(other)

    def map_elements(self, domain: TimeDomain, fn) -> Frontier:
        """Apply ``fn`` to every element and re-close in ``domain``; TOP and EMPTY are kept."""
        if self.is_top:
            return Frontier.top(domain)
        return Frontier.of(domain, (fn(e) for e in self.elements))

    def advance(self, delta: int) -> Frontier:
        if not delta:
            return self
        return self.map_elements(self.domain, lambda e: e.advance(delta))


def downward_close(domain: TimeDomain, times: Iterable[LogicalTime]) -> Frontier:
    """Smallest frontier containing every time in ``times``."""
    return Frontier.of(domain, times)


def frontier_contains(f: Frontier, t: LogicalTime) -> bool:
    return f.contains(t)


def frontier_subset(a: Frontier, b: Frontier) -> bool:
    return a.issubset(b)


def frontier_union(a: Frontier, b: Frontier) -> Frontier:
    return a.union(b)


def frontier_intersect(a: Frontier, b: Frontier) -> Frontier:
    return a.intersection(b)


def strictly_below(t: LogicalTime) -> Frontier:
    """Every time strictly less than ``t`` in a totally ordered domain."""
    if not t.domain.totally_ordered:
        raise ValueError(f"{t.domain.describe()} is not totally ordered")
    if not t.is_concrete:
        return Frontier.of(t.domain, [t])
    pred = _lex_predecessor(t.coords)
    if pred is None:
        return Frontier.empty(t.domain)
    return Frontier.of(t.domain, [LogicalTime(t.domain, pred)])


def complement_of_upset(domain: TimeDomain, minima: Iterable[LogicalTime]) -> Frontier:
    """Times not at or above any of ``minima``: the completed part of a domain."""
    minima = list(minima)
    if not minima:
        return Frontier.top(domain)
    for m in minima:
        _check_domain(domain, m.domain)
    if domain.kind is DomainKind.SEQUENCE:
        lowest: dict[str, int] = {}
        for m in minima:
            assert m.edge is not None and m.coords[0] is not None
            lowest[m.edge] = min(lowest.get(m.edge, m.coords[0]), m.coords[0])
        elements = []
        for edge in sorted(domain.edges):
            if edge not in lowest:
                elements.append(LogicalTime.seq(domain, edge, None))
            elif lowest[edge] > 1:
                elements.append(LogicalTime.seq(domain, edge, lowest[edge] - 1))
        return Frontier.of(domain, elements)
    if domain.totally_ordered:
        least = minima[0]
        for m in minima[1:]:
            if _le(m, least):
                least = m
        return strictly_below(least)
    completed = Frontier.top(domain)
    for m in minima:
        below = [
            LogicalTime(domain, tuple(c - 1 if i == j else None for j in range(domain.width)))
            for i, c in enumerate(m.coords)
            if c is not None and c > 0
        ]
        completed = completed & Frontier.of(domain, below)
    return completed


# ── text encoding ─────────────────────────────────────────────────


def _parse_coord(raw: str) -> Coord:
    return None if raw == "*" else int(raw)


def parse_time(domain: TimeDomain, text: str) -> LogicalTime:
    """Parse ``seq:<edge>:<n>``, ``epoch:<n>`` or ``tuple:<e>.<c1>...`` in ``domain``."""
    prefix, _, rest = text.strip().partition(":")
    if domain.kind is DomainKind.SEQUENCE and prefix == "seq":
        edge, _, number = rest.rpartition(":")
        return LogicalTime.seq(domain, edge, _parse_coord(number))
    if domain.kind is DomainKind.EPOCHS and prefix == "epoch":
        return LogicalTime.epoch(domain, _parse_coord(rest))
    if domain.kind is DomainKind.STRUCTURED and prefix == "tuple":
        return LogicalTime(domain, tuple(_parse_coord(c) for c in rest.split(".")))
    raise ValueError(f"{text!r} is not a time of {domain.describe()}")


def parse_frontier(domain: TimeDomain, text: str) -> Frontier:
    """Parse ``TOP``, ``EMPTY`` or ``{elem,elem}``."""
    raw = text.strip()
    if raw == "TOP":
        return Frontier.top(domain)
    if raw in ("EMPTY", "{}"):
        return Frontier.empty(domain)
    if not (raw.startswith("{") and raw.endswith("}")):
        raise ValueError(f"{text!r} is not a frontier")
    return Frontier.of(domain, (parse_time(domain, part) for part in raw[1:-1].split(",")))
