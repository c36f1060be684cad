"""Tests for core/logical_time.py — time order, frontier algebra and text parsing."""

from __future__ import annotations

import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from core.logical_time import (
    DomainMismatch,
    Frontier,
    LogicalTime,
    Order,
    TimeDomain,
    complement_of_upset,
    downward_close,
    frontier_contains,
    frontier_intersect,
    frontier_subset,
    frontier_union,
    leq,
    parse_frontier,
    parse_time,
    strictly_below,
)
from tests.strategies import EPOCHS, LEX, PRODUCT, domains, frontiers, times

SEQ = TimeDomain.sequence(["a", "b"])


def _t(domain: TimeDomain, *coords: int | None) -> LogicalTime:
    return LogicalTime(domain, tuple(coords))


class TestLeq:
    def test_sequence_numbers_compare_only_within_an_edge(self) -> None:
        a1 = LogicalTime.seq(SEQ, "a", 1)
        a2 = LogicalTime.seq(SEQ, "a", 2)
        b1 = LogicalTime.seq(SEQ, "b", 1)
        assert leq(a1, a2) is Order.LESS_EQUAL
        assert leq(a2, a1) is Order.GREATER
        assert leq(a1, b1) is Order.INCOMPARABLE

    def test_product_order_leaves_crossed_pairs_incomparable(self) -> None:
        assert leq(_t(PRODUCT, 1, 0), _t(PRODUCT, 0, 1)) is Order.INCOMPARABLE
        assert leq(_t(PRODUCT, 0, 0), _t(PRODUCT, 1, 1)) is Order.LESS_EQUAL

    def test_lexicographic_order_is_total(self) -> None:
        assert leq(_t(LEX, 0, 9), _t(LEX, 1, 0)) is Order.LESS_EQUAL

    def test_mixing_domains_raises(self) -> None:
        with pytest.raises(DomainMismatch, match="cannot combine"):
            leq(LogicalTime.epoch(EPOCHS, 0), _t(LEX, 0, 0))

    def test_sequence_numbers_start_at_one(self) -> None:
        with pytest.raises(ValueError, match="start at 1"):
            LogicalTime.seq(SEQ, "a", 0)

    @given(domains.flatmap(lambda d: st.tuples(times(d), times(d), times(d))))
    def test_order_is_transitive(self, triple: tuple[LogicalTime, ...]) -> None:
        a, b, c = triple
        if leq(a, b) is Order.LESS_EQUAL and leq(b, c) is Order.LESS_EQUAL:
            assert leq(a, c) is Order.LESS_EQUAL


class TestFrontier:
    def test_canonical_form_keeps_maximal_elements(self) -> None:
        f = Frontier.of(PRODUCT, [_t(PRODUCT, 0, 0), _t(PRODUCT, 1, 0), _t(PRODUCT, 0, 2)])
        assert f.text == "{tuple:0.2,tuple:1.0}"

    def test_wildcard_element_contains_every_iteration(self) -> None:
        f = Frontier.of(LEX, [_t(LEX, 1, None)])
        assert f.contains(_t(LEX, 1, 1000))
        assert not f.contains(_t(LEX, 2, 0))

    def test_all_wildcards_is_top(self) -> None:
        assert Frontier.of(PRODUCT, [_t(PRODUCT, None, None)]).is_top

    def test_every_sequence_edge_saturated_is_top(self) -> None:
        f = Frontier.of(SEQ, [LogicalTime.seq(SEQ, "a", None), LogicalTime.seq(SEQ, "b", None)])
        assert f.is_top

    def test_intersection_of_product_frontiers_takes_meets(self) -> None:
        a = Frontier.of(PRODUCT, [_t(PRODUCT, 1, None)])
        b = Frontier.of(PRODUCT, [_t(PRODUCT, None, 2)])
        assert (a & b).text == "{tuple:1.2}"

    def test_downward_close_of_nothing_is_empty(self) -> None:
        assert downward_close(EPOCHS, []).is_empty

    def test_function_forms_match_operators(self) -> None:
        one = parse_frontier(EPOCHS, "{epoch:1}")
        three = parse_frontier(EPOCHS, "{epoch:3}")
        assert frontier_contains(one, parse_time(EPOCHS, "epoch:0"))
        assert not frontier_contains(one, parse_time(EPOCHS, "epoch:2"))
        assert frontier_subset(one, three) and not frontier_subset(three, one)
        assert frontier_union(one, three) == three
        assert frontier_intersect(one, three) == one

    @given(domains.flatmap(lambda d: st.tuples(frontiers(d), frontiers(d))))
    def test_union_and_intersection_bound_their_operands(self, pair) -> None:
        a, b = pair
        assert a <= a | b and b <= a | b
        assert a & b <= a and a & b <= b
        assert a & b == b & a
        assert a | b == b | a

    @given(domains.flatmap(lambda d: st.tuples(frontiers(d), frontiers(d))))
    def test_subset_agrees_with_intersection(self, pair) -> None:
        a, b = pair
        assert (a <= b) == (a & b == a)

    @given(domains.flatmap(lambda d: st.tuples(frontiers(d), times(d, concrete=True))))
    def test_union_contains_what_either_contains(self, pair) -> None:
        f, t = pair
        g = Frontier.of(f.domain, [t])
        assert (f | g).contains(t)


def _universe(domain: TimeDomain) -> list[LogicalTime]:
    """Concrete times one past the generated coordinate range, so wildcards stay visible."""
    return [
        LogicalTime(domain, coords)
        for coords in itertools.product(range(10), repeat=domain.width)
    ]


def _members(f: Frontier) -> frozenset[str]:
    return frozenset(t.text for t in _universe(f.domain) if f.contains(t))


class TestFrontierEnumeration:
    @given(domains.flatmap(lambda d: st.tuples(frontiers(d), frontiers(d))))
    def test_union_is_set_union(self, pair) -> None:
        a, b = pair
        assert _members(frontier_union(a, b)) == _members(a) | _members(b)

    @given(domains.flatmap(lambda d: st.tuples(frontiers(d), frontiers(d))))
    def test_intersection_is_set_intersection(self, pair) -> None:
        a, b = pair
        assert _members(frontier_intersect(a, b)) == _members(a) & _members(b)

    @given(domains.flatmap(lambda d: st.tuples(frontiers(d), frontiers(d))))
    def test_subset_is_set_inclusion(self, pair) -> None:
        a, b = pair
        assert frontier_subset(a, b) == (_members(a) <= _members(b))
        assert (a == b) == (_members(a) == _members(b))

    @given(domains.flatmap(lambda d: st.tuples(frontiers(d), times(d, concrete=True))))
    def test_contains_matches_some_element_above(self, pair) -> None:
        f, t = pair
        above = f.is_top or any(leq(t, e) is Order.LESS_EQUAL for e in f.elements)
        assert frontier_contains(f, t) == above

    @given(domains.flatmap(lambda d: st.lists(times(d, concrete=True), max_size=4)))
    def test_downward_close_holds_exactly_what_lies_below(self, ts) -> None:
        if not ts:
            return
        domain = ts[0].domain
        closed = downward_close(domain, ts)
        expected = {
            u.text
            for u in _universe(domain)
            if any(leq(u, t) is Order.LESS_EQUAL for t in ts)
        }
        assert _members(closed) == expected


class TestAlgebraicLaws:
    @given(domains.flatmap(times))
    def test_leq_is_reflexive(self, t: LogicalTime) -> None:
        assert leq(t, t) is Order.LESS_EQUAL

    @given(domains.flatmap(lambda d: st.tuples(times(d), times(d))))
    def test_leq_is_antisymmetric(self, pair) -> None:
        a, b = pair
        if leq(a, b) is Order.LESS_EQUAL and leq(b, a) is Order.LESS_EQUAL:
            assert a == b

    @given(domains.flatmap(lambda d: st.tuples(times(d), times(d))))
    def test_leq_reports_both_directions_consistently(self, pair) -> None:
        a, b = pair
        forward, backward = leq(a, b), leq(b, a)
        if a != b:
            assert (forward is Order.GREATER) == (backward is Order.LESS_EQUAL)
        if forward is Order.INCOMPARABLE:
            assert backward is Order.INCOMPARABLE

    @given(domains.flatmap(frontiers))
    def test_union_and_intersection_are_idempotent(self, f: Frontier) -> None:
        assert f | f == f
        assert f & f == f

    @given(domains.flatmap(lambda d: st.tuples(frontiers(d), frontiers(d), frontiers(d))))
    def test_union_and_intersection_associate(self, triple) -> None:
        a, b, c = triple
        assert (a | b) | c == a | (b | c)
        assert (a & b) & c == a & (b & c)

    @given(domains.flatmap(lambda d: st.tuples(frontiers(d), frontiers(d))))
    def test_absorption(self, pair) -> None:
        a, b = pair
        assert a | (a & b) == a
        assert a & (a | b) == a


class TestCompletion:
    def test_strictly_below_in_lexicographic_domain(self) -> None:
        assert strictly_below(_t(LEX, 1, 4)).text == "{tuple:1.3}"
        assert strictly_below(_t(LEX, 1, 0)).text == "{tuple:0.*}"
        assert strictly_below(_t(LEX, 0, 0)).is_empty

    def test_strictly_below_rejects_partial_orders(self) -> None:
        with pytest.raises(ValueError, match="not totally ordered"):
            strictly_below(_t(PRODUCT, 1, 1))

    def test_no_possible_times_means_everything_complete(self) -> None:
        assert complement_of_upset(EPOCHS, []).is_top

    def test_epochs_complete_below_least_possible(self) -> None:
        minima = [LogicalTime.epoch(EPOCHS, 3), LogicalTime.epoch(EPOCHS, 2)]
        assert complement_of_upset(EPOCHS, minima).text == "{epoch:1}"

    def test_sequence_edges_without_pending_messages_saturate(self) -> None:
        f = complement_of_upset(SEQ, [LogicalTime.seq(SEQ, "a", 3)])
        assert f.text == "{seq:a:2,seq:b:*}"

    def test_product_completion_excludes_the_upset(self) -> None:
        f = complement_of_upset(PRODUCT, [_t(PRODUCT, 1, 1)])
        assert not f.contains(_t(PRODUCT, 1, 1))
        assert not f.contains(_t(PRODUCT, 2, 5))
        assert f.contains(_t(PRODUCT, 0, 7))
        assert f.contains(_t(PRODUCT, 9, 0))


class TestParsing:
    def test_parse_time_per_domain(self) -> None:
        assert parse_time(SEQ, "seq:b:4") == LogicalTime.seq(SEQ, "b", 4)
        assert parse_time(EPOCHS, "epoch:2") == LogicalTime.epoch(EPOCHS, 2)
        assert parse_time(LEX, "tuple:1.*") == _t(LEX, 1, None)

    def test_parse_time_rejects_foreign_prefix(self) -> None:
        with pytest.raises(ValueError, match="is not a time of epochs"):
            parse_time(EPOCHS, "tuple:1.0")

    def test_parse_frontier_special_forms(self) -> None:
        assert parse_frontier(EPOCHS, "TOP").is_top
        assert parse_frontier(EPOCHS, "EMPTY").is_empty
        assert parse_frontier(EPOCHS, "{}").is_empty
        assert parse_frontier(PRODUCT, "{tuple:0.2,tuple:1.0}").text == "{tuple:0.2,tuple:1.0}"

    def test_parse_frontier_rejects_bare_time(self) -> None:
        with pytest.raises(ValueError, match="is not a frontier"):
            parse_frontier(EPOCHS, "epoch:1")
