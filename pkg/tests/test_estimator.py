import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from synth import conditional_table, mixture_columns

from tensorcard.catalog import BinSpec, EncodedTable, build_block_tensor, encode_columns
from tensorcard.covering import Block, CoveringDesign, greedy_covering
from tensorcard.errors import CoverageError, QueryError, SchemaError
from tensorcard.estimator import (
    BlockModel,
    CompiledQuery,
    EstimatorIndex,
    OpCounts,
    Predicate,
    Query,
    block_count,
    block_density,
    compile_query,
    correlation_matrix,
    estimate,
    fuse,
    order_blocks,
    range_coefficients,
    scaled_residual,
    select_blocks,
    selected_blocks,
    train_index,
    update_weights,
    warm_start_retrain,
)
from tensorcard.tensor_core import ALSOptions, CPModel
from tensorcard.workbench import generate_workload, oracle_count, run_benchmark

SEVEN_BLOCKS = [(1, 2, 3, 4), (1, 4, 5, 6), (1, 5, 6, 7), (2, 3, 4, 7), (2, 3, 5, 6)]


def bare_index(blocks, v):
    bms = [BlockModel(Block.of(b), None, i) for i, b in enumerate(blocks)]
    return EstimatorIndex(tuple(bms), np.eye(v), 1.0)


def reference_selection(blocks, t_q, alpha=0.01):
    """Plain set-based greedy with decay, written independently of the bitmask version."""
    remains = set(t_q)
    scores = [0.0] * len(blocks)
    picked = []
    while remains:
        for i, b in enumerate(blocks):
            scores[i] = scores[i] * alpha + len(set(b) & remains)
        cands = [i for i in range(len(blocks)) if i not in picked]
        best = max(cands, key=lambda i: (scores[i], -i))
        picked.append(best)
        remains -= set(blocks[best])
    return picked


def eq_query(schema, values):
    return Query(tuple(Predicate(schema[a].name, "eq", v) for a, v in values.items()))


def random_point_query(rng, schema, attrs):
    return eq_query(schema, {a: schema[a].dictionary.values[rng.integers(len(schema[a].dictionary))] for a in attrs})


@pytest.fixture(scope="module")
def conditional():
    schema, table = conditional_table()
    design = CoveringDesign(5, 3, 1, tuple(Block.of(m, table.domains) for m in [(0, 1), (0, 2), (0, 3, 4)]))
    index, reports = train_index(table, design, 12, ALSOptions(max_iters=2000, tol=1e-12, seed=3), schema=schema)
    return schema, table, index, reports


@pytest.fixture(scope="module")
def mixture():
    cols = mixture_columns(8000, 5)
    schema, table = encode_columns([f"a{i}" for i in range(6)], cols)
    design = greedy_covering(table.domains, 400, 3)
    index, _ = train_index(table, design, 16, ALSOptions(max_iters=300, tol=1e-8, seed=1), schema=schema)
    return schema, table, index


class TestOrdering:
    def equal_pair_table(self):
        # A uniform on {0,1}, B == A, C independent of A with exact quarter counts
        a = np.repeat([0, 1], 50)
        c = np.tile(np.repeat([0, 1], 25), 2)
        return EncodedTable(100, (a, a.copy(), c), (2, 2, 2))

    def test_marginal_error_values(self):
        t = self.equal_pair_table()
        cor = correlation_matrix(t)

        def direct(j, h):
            total = 0.0
            for x, y in itertools.product(range(2), range(2)):
                fjh = np.mean((t.columns[j] == x) & (t.columns[h] == y))
                total += abs(fjh - np.mean(t.columns[j] == x) * np.mean(t.columns[h] == y))
            return total

        assert cor[0, 1] == pytest.approx(direct(0, 1)) == pytest.approx(1.0)
        assert cor[0, 2] == pytest.approx(direct(0, 2)) == pytest.approx(0.0)
        assert cor[1, 2] == pytest.approx(0.0)
        assert np.all(np.diag(cor) == 1.0)
        assert np.array_equal(cor, cor.T)

    def test_correlated_block_first(self):
        t = self.equal_pair_table()
        idx = order_blocks(t, [Block.of([0, 2]), Block.of([0, 1])])
        assert [bm.block.members for bm in idx.blocks] == [(0, 1), (0, 2)]
        assert idx.scores == pytest.approx((1.0, 0.5))

    def test_independent_ties_keep_input_order(self):
        a = np.repeat([0, 1], 8)
        b = np.tile(np.repeat([0, 1], 4), 2)
        c = np.tile([0, 1], 8)
        t = EncodedTable(16, (a, b, c), (2, 2, 2))
        blocks = [Block.of([1, 2]), Block.of([0, 2]), Block.of([0, 1])]
        idx = order_blocks(t, blocks)
        assert [bm.block for bm in idx.blocks] == blocks
        assert np.allclose(idx.cor, np.eye(3))

    def test_single_block(self):
        t = self.equal_pair_table()
        idx = order_blocks(t, [Block.of([0, 1, 2])])
        assert [bm.block.members for bm in idx.blocks] == [(0, 1, 2)]

    def test_alpha_bounds(self):
        with pytest.raises(ValueError):
            EstimatorIndex((), np.eye(1), 1.0, alpha=1.0)


class TestSelection:
    def test_two_block_cover(self):
        idx = bare_index([[a - 1 for a in b] for b in SEVEN_BLOCKS], 7)
        got = selected_blocks(idx, {0, 2, 4, 6})
        assert [tuple(a + 1 for a in b.members) for b in got] == [(1, 5, 6, 7), (1, 2, 3, 4)]

    def test_subset_of_one_block(self):
        idx = bare_index([[a - 1 for a in b] for b in SEVEN_BLOCKS], 7)
        assert select_blocks(idx, {3, 4, 5}) == [1]

    def test_uncoverable(self):
        idx = bare_index([(0, 1), (1, 2)], 4)
        with pytest.raises(CoverageError) as exc:
            select_blocks(idx, {0, 3})
        assert "3" in str(exc.value)

    def test_exhaustive_on_seven_binary(self):
        design = greedy_covering([2] * 7, 16, 2)
        idx = bare_index([b.members for b in design.blocks], 7)
        for r in range(1, 8):
            for t_q in itertools.combinations(range(7), r):
                sel = selected_blocks(idx, t_q)
                assert set(t_q) <= set().union(*(b.members for b in sel))
                assert len(set(b.members for b in sel)) == len(sel)
                if r <= 2:
                    assert len(sel) == 1

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.sets(st.integers(0, 7), min_size=1, max_size=4), min_size=1, max_size=8),
        st.sets(st.integers(0, 7), min_size=1),
    )
    def test_matches_reference(self, blocks, t_q):
        t_q = {a for a in t_q if any(a in b for b in blocks)} or {next(iter(blocks[0]))}
        blocks = [sorted(b) for b in blocks]
        idx = bare_index(blocks, 8)
        assert select_blocks(idx, t_q) == reference_selection(blocks, t_q)
        assert select_blocks(idx, t_q) == select_blocks(idx, sum(1 << a for a in t_q))


class TestRangeCoefficients:
    def test_lower_bound(self):
        np.testing.assert_allclose(range_coefficients(BinSpec((0.0, 10.0, 20.0)), 3.0, math.inf, True), [0.7, 1.0])

    def test_everything(self):
        spec = BinSpec((0.0, 1.0, 5.0, 6.0))
        assert range_coefficients(spec, -math.inf, math.inf).tolist() == [1.0, 1.0, 1.0]

    def test_outside(self):
        spec = BinSpec((0.0, 1.0, 5.0))
        assert not range_coefficients(spec, 7.0, 9.0).any()
        assert not range_coefficients(spec, 3.0, 2.0).any()

    def test_fourteen_bins_fraction_only_at_ends(self):
        edges = np.cumsum(np.r_[0.0, np.random.default_rng(2).uniform(0.5, 3.0, 14)])
        spec = BinSpec(tuple(edges))
        eps = 1e-3
        xi = range_coefficients(spec, edges[2] + eps, edges[9] - eps)
        frac = [i for i, x in enumerate(xi) if 0.0 < x < 1.0]
        assert frac == [2, 8]
        assert xi[:2].tolist() == [0.0, 0.0] and xi[9:].tolist() == [0.0] * 5
        assert xi[3:8].tolist() == [1.0] * 5

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.floats(0.1, 5.0), min_size=1, max_size=12),
        st.floats(-5.0, 70.0),
        st.floats(0.0, 30.0),
    )
    def test_interval_oracle(self, widths, lo, length):
        edges = np.cumsum([0.0] + widths)
        hi = lo + length
        xi = range_coefficients(BinSpec(tuple(edges)), lo, hi)
        for i in range(len(widths)):
            overlap = max(0.0, min(edges[i + 1], hi) - max(edges[i], lo))
            assert xi[i] == pytest.approx(overlap / widths[i], abs=1e-9)
        assert sum(0.0 < x < 1.0 for x in xi) <= 2


class TestDensity:
    def test_rounds_to_true_count(self, conditional):
        schema, table, index, reports = conditional
        bm = next(b for b in index.blocks if b.block.members == (0, 3, 4))
        assert reports[bm.block_id].max_abs_error < 0.5
        tensor = build_block_tensor(table, bm.block).array()
        for cell in np.ndindex(*tensor.shape):
            cq = compile_query(index, eq_query(schema, {a: schema[a].dictionary.values[c] for a, c in zip((0, 3, 4), cell)}))
            assert round(block_density(bm, cq, table.n_rows) * table.n_rows) == tensor[cell]

    def test_empty_restriction(self, conditional):
        schema, table, index, _ = conditional
        bm = next(b for b in index.blocks if b.block.members == (0, 1))
        cq = compile_query(index, eq_query(schema, {2: schema[2].dictionary.values[0]}))
        assert block_density(bm, cq, table.n_rows) == pytest.approx(1.0)

    def test_clamped(self, conditional):
        _, table, index, _ = conditional
        for bm in index.blocks:
            for cell in itertools.product(*(range(table.domains[a]) for a in bm.block.members)):
                d = block_density(bm, CompiledQuery(dict(zip(bm.block.members, cell))), table.n_rows)
                assert 0.0 <= d <= 1.0

    def test_single_block_op_counts(self, mixture):
        schema, table, index = mixture
        rng = np.random.default_rng(0)
        for _ in range(100):
            bm = index.blocks[rng.integers(len(index.blocks))]
            k = int(rng.integers(1, len(bm.block) + 1))
            attrs = sorted(rng.choice(bm.block.members, size=k, replace=False).tolist())
            cq = compile_query(index, random_point_query(rng, schema, attrs))
            counter = OpCounts()
            block_count(bm, cq.constraints, attrs, counter)
            assert counter.mults == (k + 1) * bm.rank
            assert counter.adds == bm.rank - 1
            assert counter.divs == 0


class TestFuse:
    def test_two_and_three_block_exactness(self, conditional):
        schema, table, index, _ = conditional
        for attrs in ((0, 1, 2), (0, 1, 2, 3, 4)):
            for codes in itertools.product(*(range(table.domains[a]) for a in attrs)):
                q = eq_query(schema, {a: schema[a].dictionary.values[c] for a, c in zip(attrs, codes)})
                est = estimate(index, q)
                assert est.blocks_used == len(attrs) - 1 - (len(attrs) == 5)
                assert math.floor(est.count + 0.5) == oracle_count(schema, table, q)

    def test_single_block_reduction(self, conditional):
        schema, table, index, _ = conditional
        rng = np.random.default_rng(3)
        for _ in range(30):
            q = random_point_query(rng, schema, [0, 3, 4])
            cq = compile_query(index, q)
            (l,) = select_blocks(index, cq.mask)
            assert fuse(index, cq, [l]) == block_density(index.blocks[l], cq, index.total_records) * index.total_records

    def test_zero_denominator(self):
        # second block's model puts no mass on the shared attribute's value 1
        bms = [
            BlockModel(Block.of([0, 1]), CPModel(np.array([4.0]), (np.array([[0.5], [0.5]]), np.array([[0.5], [0.5]]))), 0),
            BlockModel(Block.of([1, 2]), CPModel(np.array([4.0]), (np.array([[1.0], [0.0]]), np.array([[0.5], [0.5]]))), 1),
        ]
        idx = EstimatorIndex(tuple(bms), np.eye(3), 4.0)
        cq = CompiledQuery({0: 0, 1: 1, 2: 0})
        assert fuse(idx, cq, select_blocks(idx, cq.mask)) == 0.0
        assert estimate(idx, cq).count == 0.0

    def test_clamp_to_total(self):
        # a deliberately inflated model: point count 8 > N = 4
        bm = BlockModel(Block.of([0]), CPModel(np.array([8.0]), (np.array([[1.0], [0.0]]),)), 0)
        idx = EstimatorIndex((bm,), np.eye(1), 4.0)
        assert estimate(idx, CompiledQuery({0: 0})).count == 4.0
        neg = BlockModel(Block.of([0]), CPModel(np.array([-3.0]), (np.array([[1.0], [0.0]]),)), 0)
        assert estimate(idx.with_blocks([neg]), CompiledQuery({0: 0})).count == 0.0


class TestEstimate:
    def test_no_predicates(self, mixture):
        _, table, index = mixture
        assert estimate(index, Query()).count == table.n_rows

    def test_small_queries_use_one_block(self, mixture):
        schema, _, index = mixture
        rng = np.random.default_rng(1)
        for attrs in itertools.combinations(range(6), 3):
            assert estimate(index, random_point_query(rng, schema, attrs)).blocks_used == 1

    def test_four_filter_accounting(self, mixture):
        schema, _, index = mixture
        rng = np.random.default_rng(2)
        for _ in range(100):
            attrs = sorted(rng.choice(6, size=4, replace=False).tolist())
            est = estimate(index, random_point_query(rng, schema, attrs))
            n_b = est.blocks_used
            r = max(bm.rank for bm in index.blocks)
            assert est.ops.divs == n_b
            assert est.ops.mults <= 2 * n_b * 4 * r + n_b - 1

    def test_unknown_value_is_zero(self, mixture):
        schema, _, index = mixture
        assert estimate(index, eq_query(schema, {0: "never seen"})).count == 0.0

    def test_bad_queries(self, mixture):
        schema, _, index = mixture
        with pytest.raises(QueryError):
            compile_query(index, Query((Predicate("a0", "lt", 3),)))
        with pytest.raises(QueryError):
            Predicate("a0", "ne", 3)
        with pytest.raises(SchemaError):
            compile_query(index, Query((Predicate("zz", "eq", 1),)))

    def test_deterministic_selection(self, mixture):
        schema, _, index = mixture
        q = random_point_query(np.random.default_rng(4), schema, range(6))
        assert estimate(index, q).selection == estimate(index, q).selection

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 6))
    def test_fast_path_matches_generic(self, mixture, seed, k):
        schema, _, index = mixture
        rng = np.random.default_rng(seed)
        attrs = sorted(rng.choice(6, size=k, replace=False).tolist())
        cq = compile_query(index, random_point_query(rng, schema, attrs))
        got = estimate(index, cq)
        counter = OpCounts()
        sel = select_blocks(index, cq.mask)
        want = fuse(index, cq, sel, counter)
        assert got.selection == tuple(sel)
        assert got.count == pytest.approx(want, rel=1e-12, abs=1e-9)
        assert got.ops == counter
        assert 0.0 <= got.count <= index.total_records


class TestUpdates:
    def test_exact_scaling(self, mixture):
        schema, _, index = mixture
        new = update_weights(index, index.total_records * 100 / 95)
        rng = np.random.default_rng(6)
        for old_bm, new_bm in zip(index.blocks, new.blocks):
            for a, b in zip(old_bm.model.factors, new_bm.model.factors):
                assert np.array_equal(a, b)
            np.testing.assert_allclose(new_bm.model.weights, old_bm.model.weights * 100 / 95, rtol=1e-15)
        for _ in range(100):
            attrs = sorted(rng.choice(6, size=int(rng.integers(1, 7)), replace=False).tolist())
            q = random_point_query(rng, schema, attrs)
            before, after = estimate(index, q).count, estimate(new, q).count
            if before == 0:
                assert after == 0
            else:
                assert abs(after / before - 100 / 95) < 1e-9

    def test_identity_and_errors(self, mixture):
        _, _, index = mixture
        assert update_weights(index, index.total_records) is index
        with pytest.raises(ValueError):
            update_weights(index, 0)
        with pytest.raises(ValueError):
            update_weights(index, -5)

    def test_retrain_unchanged(self, conditional):
        schema, table, index, reports = conditional
        opts = ALSOptions(max_iters=50, tol=1e-6, seed=3)
        new, rep = warm_start_retrain(index, table, opts)
        for bm in index.blocks:
            assert rep[bm.block_id].iterations <= 2
            assert rep[bm.block_id].frobenius_error <= scaled_residual(bm, table, table.n_rows) + 1e-9

    def test_schema_mismatch(self, conditional):
        _, _, index, _ = conditional
        other = EncodedTable(1, (np.zeros(1, int),) * 5, (3, 4, 3, 3, 3))
        with pytest.raises(SchemaError):
            warm_start_retrain(index, other)

    def test_appended_rows(self):
        base_n, extra_n = 12000, 600
        base = mixture_columns(base_n, 1, params_seed=77)
        extra = mixture_columns(extra_n, 2, params_seed=77)
        cols = [np.concatenate([a, b]) for a, b in zip(base, extra)]
        schema, full = encode_columns([f"a{i}" for i in range(6)], cols)
        old = EncodedTable(base_n, tuple(c[:base_n] for c in full.columns), full.domains)
        design = greedy_covering(full.domains, 400, 3)
        opts = ALSOptions(max_iters=400, tol=1e-9, seed=2)
        index, _ = train_index(old, design, 24, opts, schema=schema)
        weight_only = update_weights(index, full.n_rows)
        retrained, reports = warm_start_retrain(index, full, opts)
        for bm in weight_only.blocks:
            assert reports[bm.block_id].frobenius_error <= scaled_residual(bm, full, full.n_rows) + 1e-9
        wl = generate_workload(schema, full, 300, seed=8, max_filters=3)
        w_med = run_benchmark(weight_only, wl, timing=False).quantiles["p50"]
        r_med = run_benchmark(retrained, wl, timing=False).quantiles["p50"]
        assert r_med <= w_med

    def test_distribution_shift(self):
        base = mixture_columns(6000, 1, params_seed=10)
        shifted = mixture_columns(3000, 2, params_seed=11)
        cols = [np.concatenate([a, b]) for a, b in zip(base, shifted)]
        schema, full = encode_columns([f"a{i}" for i in range(6)], cols)
        old = EncodedTable(6000, tuple(c[:6000] for c in full.columns), full.domains)
        design = greedy_covering(full.domains, 400, 3)
        opts = ALSOptions(max_iters=200, tol=1e-9, seed=2)
        index, _ = train_index(old, design, 16, opts, schema=schema)
        _, reports = warm_start_retrain(index, full, opts)
        for bm in index.blocks:
            assert reports[bm.block_id].frobenius_error < scaled_residual(bm, full, full.n_rows)
