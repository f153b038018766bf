import itertools
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tensorcard.covering import (
    AttributeJoinPlan,
    Block,
    CoveringDesign,
    greedy_covering,
    load_design,
    plan_joins,
    verify_covering,
)
from tensorcard.errors import CoverageError, InfeasibleDesignError, ParseError, PlanError, TooLargeError

SEVEN_BLOCKS = [(1, 2, 3, 4), (1, 4, 5, 6), (1, 5, 6, 7), (2, 3, 4, 7), (2, 3, 5, 6)]
SEVEN_FILE = "7 4 2\n" + "\n".join(" ".join(map(str, b)) for b in SEVEN_BLOCKS) + "\n"


def design_of(blocks_1based, v, t, k=None):
    blocks = tuple(Block.of([a - 1 for a in b]) for b in blocks_1based)
    return CoveringDesign(v, k or max(map(len, blocks_1based)), t, blocks)


def brute_uncovered(blocks, v, t):
    sets = [set(b.members) for b in blocks]
    return [s for s in itertools.combinations(range(v), t) if not any(set(s) <= b for b in sets)]


class TestVerify:
    def test_seven_point_design_is_valid(self):
        assert verify_covering(design_of(SEVEN_BLOCKS, 7, 2)) == []

    def test_single_full_block(self):
        for t in range(1, 6):
            assert verify_covering(design_of([tuple(range(1, 7))], 6, t)) == []

    def test_removing_block_exposes_pairs(self):
        rest = [b for b in SEVEN_BLOCKS if b != (1, 5, 6, 7)]
        missing = verify_covering(design_of(rest, 7, 2))
        # frozen from exhaustive pair enumeration; 0-based
        assert missing == [(0, 6), (4, 6), (5, 6)]
        assert (4, 6) in missing

    def test_guard(self):
        d = CoveringDesign(60, 3, 8, (Block.of(range(3)),))
        with pytest.raises(TooLargeError):
            verify_covering(d)

    @settings(max_examples=60, deadline=None)
    @given(
        st.integers(3, 8).flatmap(
            lambda v: st.tuples(
                st.just(v),
                st.integers(1, v - 1),
                st.lists(st.sets(st.integers(0, v - 1), min_size=1), min_size=0, max_size=6),
            )
        )
    )
    def test_matches_brute_force(self, args):
        v, t, blocks = args
        d = CoveringDesign(v, 0, t, tuple(Block.of(b) for b in blocks))
        assert verify_covering(d) == brute_uncovered(d.blocks, v, t)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(3, 7).flatmap(lambda v: st.tuples(
        st.just(v), st.integers(1, v - 1),
        st.lists(st.sets(st.integers(0, v - 1), min_size=1), max_size=5),
        st.sets(st.integers(0, v - 1), min_size=1))))
    def test_adding_block_never_uncovers(self, args):
        v, t, blocks, extra = args
        d = CoveringDesign(v, 0, t, tuple(Block.of(b) for b in blocks))
        bigger = d.with_blocks(d.blocks + (Block.of(extra),))
        assert set(verify_covering(bigger)) <= set(verify_covering(d))


class TestGreedy:
    def test_everything_fits_one_block(self):
        d = greedy_covering([2, 2, 2], 8, 2)
        assert [b.members for b in d.blocks] == [(0, 1, 2)]

    def test_seven_binary_pairs(self):
        d = greedy_covering([2] * 7, 16, 2)
        assert len(d.blocks) >= 5
        assert all(len(b) <= 4 for b in d.blocks)
        assert verify_covering(d) == []

    def test_joined_domains(self):
        d = greedy_covering([10, 11, 6, 8, 7], 1000, 2)
        assert brute_uncovered(d.blocks, 5, 2) == []
        assert all(b.domain_size <= 1000 for b in d.blocks)

    def test_deterministic(self):
        a = greedy_covering([4, 4, 5, 5, 6, 8], 1200, 3)
        b = greedy_covering([4, 4, 5, 5, 6, 8], 1200, 3)
        assert a == b

    def test_infeasible_subset(self):
        with pytest.raises(InfeasibleDesignError) as exc:
            greedy_covering([10, 20, 3], 100, 2)
        assert exc.value.subset == (0, 1)

    def test_infeasible_singleton(self):
        with pytest.raises(InfeasibleDesignError):
            greedy_covering([10, 200], 100, 1)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(1, 6), min_size=2, max_size=7), st.integers(1, 3), st.integers(0, 3))
    def test_sound_and_within_budget(self, doms, t, slack):
        t = min(t, len(doms) - 1)
        need = max(math.prod(s) for s in itertools.combinations(doms, t))
        m_k = need * (1 + slack)
        d = greedy_covering(doms, m_k, t)
        assert brute_uncovered(d.blocks, len(doms), t) == []
        for b in d.blocks:
            assert b.domain_size == math.prod(doms[a] for a in b.members)
            assert b.domain_size <= m_k


class TestPlanJoins:
    def test_joins_small_domains(self):
        plan = plan_joins([10, 11, 3, 4, 7, 2, 2], target_balance=1.5)
        assert plan.groups == ((0,), (1,), (2, 5), (3, 6), (4,))
        assert plan.domain_sizes == (10, 11, 6, 8, 7)

    def test_equal_domains_identity(self):
        assert plan_joins([5, 5, 5, 5]).is_identity

    def test_lopsided_identity(self):
        plan = plan_joins([100, 2])
        # 2 * 100 exceeds 1.25 * median(51) and 1.25 * 100
        assert 2 * 100 > 1.25 * 51
        assert plan.is_identity

    def test_empty(self):
        assert plan_joins([]).groups == ()

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.integers(1, 30), min_size=1, max_size=8), st.floats(1.0, 3.0))
    def test_postconditions(self, doms, balance):
        plan = plan_joins(doms, balance)
        members = sorted(a for g in plan.groups for a in g)
        assert members == list(range(len(doms)))
        for g, size in zip(plan.groups, plan.domain_sizes):
            assert size == math.prod(doms[a] for a in g)
            if len(g) > 1:
                assert size <= balance * max(doms)
        assert plan == plan_joins(doms, balance)


class TestPlanType:
    def test_overlap_rejected(self):
        with pytest.raises(PlanError):
            AttributeJoinPlan(((0, 1), (1, 2)), (2, 2, 2))

    def test_locate(self):
        plan = AttributeJoinPlan.from_groups([(3, 1)], [2, 3, 4, 5])
        assert plan.groups == ((0,), (1, 3), (2,))
        assert plan.locate(3) == (1, 1)
        assert plan.domain_sizes == (2, 15, 4)

    def test_json_round_trip(self):
        plan = plan_joins([10, 11, 3, 4, 7, 2, 2], 1.5)
        assert AttributeJoinPlan.from_json(plan.to_json()) == plan


class TestLoad:
    def test_seven_point_file(self):
        d = load_design(SEVEN_FILE)
        assert d.valid is True
        assert (d.v, d.k, d.t) == (7, 4, 2)
        assert [b.members for b in d.blocks][0] == (0, 1, 2, 3)

    def test_trivial(self):
        assert load_design("3 3 2\n1 2 3\n").valid is True

    def test_last_line_deleted(self):
        text = SEVEN_FILE.rstrip("\n").rsplit("\n", 1)[0] + "\n"
        with pytest.raises(CoverageError) as exc:
            load_design(text)
        # frozen from exhaustive enumeration; 0-based
        assert exc.value.uncovered == [(1, 4), (1, 5), (2, 4), (2, 5)]

    def test_block_1567_deleted(self):
        text = SEVEN_FILE.replace("1 5 6 7\n", "")
        with pytest.raises(CoverageError) as exc:
            load_design(text)
        assert (4, 6) in exc.value.uncovered
        assert "{5,7}" in str(exc.value)

    def test_unverified(self):
        d = load_design("7 4 2\n1 2 3 4\n", verify=False)
        assert d.valid is None

    def test_comments_and_blank_lines(self):
        d = load_design("# header next\n3 2 1\n\n1 2  # first\n3\n")
        assert [b.members for b in d.blocks] == [(0, 1), (2,)]

    @pytest.mark.parametrize(
        "text,line",
        [("7 4\n", 1), ("3 3 2\n1 x 3\n", 2), ("3 3 2\n1 2 4\n", 2), ("3 3 2\n1 1 2\n", 2), ("", 1)],
    )
    def test_parse_errors_carry_line(self, text, line):
        with pytest.raises(ParseError) as exc:
            load_design(text)
        assert exc.value.line == line

    def test_budget_violation(self):
        with pytest.raises(InfeasibleDesignError):
            load_design("3 2 1\n1 2\n3\n", domain_sizes=[10, 10, 10], m_k=50)

    def test_text_round_trip(self):
        d = greedy_covering([2] * 7, 16, 2)
        again = load_design(d.to_text(), domain_sizes=[2] * 7)
        assert [b.members for b in again.blocks] == [b.members for b in d.blocks]

    def test_domain_count_mismatch(self):
        with pytest.raises(PlanError):
            load_design(SEVEN_FILE, domain_sizes=[2, 2])
