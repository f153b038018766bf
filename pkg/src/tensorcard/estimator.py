"""Online estimation over a covering of CP-decomposed block tensors.

Blocks are ranked offline by how strongly their attributes are correlated;
per query, a greedy cover of the constrained attributes is chosen and the
per-block counts are chained as ``f(B_1∩Q) * prod_j f(B_j∩Q) / f(prev∩B_j∩Q)``.

Counts are evaluated as ``sum_r w[r] * prod(row_j[r])`` where a constrained
axis contributes either one factor row (point predicate) or a coefficient-
weighted sum of rows (range predicate, or a predicate on one member of a
joined super-attribute).  Unconstrained axes contribute the constant 1 thanks
to L1-normalized factor columns.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .catalog import CATEGORICAL, CONTINUOUS, BinSpec, EncodedTable, Schema, build_block_tensor, pairwise_marginal
from .covering import AttributeJoinPlan, Block, CoveringDesign
from .errors import CoverageError, ParseError, QueryError, SchemaError
from .tensor_core import ALSOptions, CPModel, FitReport, cp_als_fit, reconstruct_full

DEFAULT_ALPHA = 0.01
OPS = ("eq", "lt", "le", "gt", "ge")
_LOWER = ("gt", "ge")
_UPPER = ("lt", "le")


# -- queries ------------------------------------------------------------------


@dataclass(frozen=True)
class Predicate:
    attr: object
    op: str
    value: object

    def __post_init__(self):
        if self.op not in OPS:
            raise QueryError(f"unknown operator {self.op!r}; expected one of {OPS}")

    def to_json(self):
        return {"attr": self.attr, "op": self.op, "value": self.value}


@dataclass(frozen=True)
class Query:
    predicates: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "predicates", tuple(self.predicates))

    @classmethod
    def from_json(cls, obj) -> "Query":
        """Accept a dict or JSON text ``{"predicates": [{"attr", "op", "value"}, ...]}``."""
        if isinstance(obj, (str, bytes)):
            try:
                obj = json.loads(obj)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed query JSON: {exc.msg}", position=exc.pos) from None
        if not isinstance(obj, dict) or not isinstance(obj.get("predicates", []), list):
            raise QueryError("query must be an object with a 'predicates' list")
        preds = []
        for p in obj.get("predicates", []):
            try:
                preds.append(Predicate(p["attr"], p["op"], p["value"]))
            except (KeyError, TypeError):
                raise QueryError(f"predicate {p!r} needs 'attr', 'op' and 'value'") from None
        return cls(tuple(preds))

    def to_json(self):
        return {"predicates": [p.to_json() for p in self.predicates]}

    def __len__(self):
        return len(self.predicates)


def resolve_predicates(schema: Schema, query: Query) -> dict:
    """Validate and group predicates per base attribute.

    Returns ``{attr: ("eq", value)}`` for categorical attributes and
    ``{attr: ("range", lo, hi, lo_open, hi_open)}`` for continuous ones.
    """
    eqs, lows, highs = {}, {}, {}
    for p in query.predicates:
        a = schema.index(p.attr)
        kind = schema[a].kind
        if p.op == "eq":
            if kind != CATEGORICAL:
                raise QueryError(f"equality on continuous attribute {schema[a].name!r}")
            if a in eqs:
                raise QueryError(f"attribute {schema[a].name!r} constrained twice")
            eqs[a] = p.value
            continue
        if kind != CONTINUOUS:
            raise QueryError(f"range predicate on categorical attribute {schema[a].name!r}")
        try:
            value = float(p.value)
        except (TypeError, ValueError):
            raise QueryError(f"range constant {p.value!r} is not numeric") from None
        side = lows if p.op in _LOWER else highs
        if a in side:
            raise QueryError(f"attribute {schema[a].name!r} has two bounds on the same side")
        side[a] = (value, p.op in ("gt", "lt"))
    out = {a: ("eq", v) for a, v in eqs.items()}
    for a in set(lows) | set(highs):
        lo, lo_open = lows.get(a, (-math.inf, False))
        hi, hi_open = highs.get(a, (math.inf, False))
        out[a] = ("range", lo, hi, lo_open, hi_open)
    return out


def range_coefficients(spec: BinSpec, lo: float, hi: float, lo_open: bool = False, hi_open: bool = False):
    """Fraction of each bin covered by ``[lo, hi]`` under a uniform intra-bin density.

    Openness of the endpoints does not change the covered length; it is
    accepted so callers can pass predicates through unchanged.
    """
    b = spec.edges
    if lo > hi:
        return np.zeros(len(spec))
    left = np.maximum(b[:-1], lo)
    right = np.minimum(b[1:], hi)
    return np.clip((right - left) / (b[1:] - b[:-1]), 0.0, 1.0)


# -- counters -----------------------------------------------------------------


@dataclass
class OpCounts:
    mults: int = 0
    adds: int = 0
    divs: int = 0

    def to_dict(self):
        return {"mults": self.mults, "adds": self.adds, "divs": self.divs}


@dataclass(frozen=True)
class Estimate:
    count: float
    blocks_used: int
    ops: OpCounts
    selection: tuple = ()

    def to_dict(self):
        return {"estimate": self.count, "blocks_used": self.blocks_used, **self.ops.to_dict()}


# -- index --------------------------------------------------------------------


@dataclass(frozen=True)
class BlockModel:
    """A block's CP model plus lookup tables for the per-query hot path.

    ``stacked`` holds every factor matrix one above the other (C-contiguous),
    so the rows for several point predicates come out of a single gather.
    """

    block: Block
    model: CPModel | None
    block_id: int = 0
    axis: dict = field(default=None, init=False, repr=False, compare=False)
    mask: int = field(default=0, init=False, repr=False, compare=False)
    offsets: dict = field(default=None, init=False, repr=False, compare=False)
    stacked: np.ndarray = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.model is not None and self.model.ndim != len(self.block):
            raise SchemaError(f"model has {self.model.ndim} axes, block has {len(self.block)}")
        object.__setattr__(self, "axis", {a: i for i, a in enumerate(self.block.members)})
        object.__setattr__(self, "mask", sum(1 << a for a in self.block.members))
        if self.model is not None:
            starts = np.cumsum([0] + [f.shape[0] for f in self.model.factors[:-1]])
            object.__setattr__(self, "offsets", {a: int(o) for a, o in zip(self.block.members, starts)})
            object.__setattr__(self, "stacked", np.ascontiguousarray(np.vstack(self.model.factors)))

    @property
    def member_set(self) -> frozenset:
        return frozenset(self.block.members)

    @property
    def rank(self) -> int:
        return self.model.rank if self.model is not None else 0


@dataclass(frozen=True)
class EstimatorIndex:
    """Trained blocks in importance order plus everything estimation needs."""

    blocks: tuple
    cor: np.ndarray
    total_records: float
    alpha: float = DEFAULT_ALPHA
    scores: tuple = ()
    schema: Schema | None = None
    plan: AttributeJoinPlan | None = None
    domains: tuple = ()

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        cor = np.array(self.cor, dtype=np.float64)
        cor.setflags(write=False)
        object.__setattr__(self, "cor", cor)
        object.__setattr__(self, "blocks", tuple(self.blocks))
        covered = 0
        for bm in self.blocks:
            covered |= bm.mask
        object.__setattr__(self, "_covered", covered)
        object.__setattr__(self, "_masks", tuple(bm.mask for bm in self.blocks))
        object.__setattr__(self, "_fast", self._point_tables())

    def _point_tables(self):
        """Flat arrays for the compiled equality-only path (None when unavailable)."""
        if kernels.point_estimate is None or not self.blocks:
            return None
        if any(bm.model is None for bm in self.blocks) or self._covered >> 64:
            return None
        v = self._covered.bit_length()
        offsets = np.full((len(self.blocks), v), -1, dtype=np.int64)
        for l, bm in enumerate(self.blocks):
            for a, off in bm.offsets.items():
                offsets[l, a] = off
        masks = np.array(self._masks, dtype=np.uint64)
        weights = [np.ascontiguousarray(bm.model.weights, dtype=np.float64) for bm in self.blocks]
        return masks, weights, [bm.stacked for bm in self.blocks], offsets

    def with_blocks(self, blocks, total_records=None) -> "EstimatorIndex":
        return replace(
            self,
            blocks=tuple(blocks),
            total_records=self.total_records if total_records is None else total_records,
        )


def marginal_error(joint: np.ndarray, fj: np.ndarray, fh: np.ndarray) -> float:
    """Sum of |f(j,h) - f(j) f(h)| over the pair's joint domain."""
    return float(np.abs(joint - np.outer(fj, fh)).sum())


def correlation_matrix(table: EncodedTable) -> np.ndarray:
    v = table.n_cols
    cor = np.eye(v)
    for j in range(v):
        for h in range(j + 1, v):
            cor[j, h] = cor[h, j] = marginal_error(*pairwise_marginal(table, j, h))
    return cor


def order_blocks(
    table: EncodedTable,
    blocks: Sequence,
    alpha: float = DEFAULT_ALPHA,
    schema: Schema | None = None,
    plan: AttributeJoinPlan | None = None,
) -> EstimatorIndex:
    """Rank blocks by mean pairwise marginal error of their attributes (descending, stable).

    ``blocks`` may hold :class:`BlockModel` or bare :class:`Block` objects.
    """
    bms = [b if isinstance(b, BlockModel) else BlockModel(b, None, i) for i, b in enumerate(blocks)]
    cor = correlation_matrix(table)
    scores = []
    for bm in bms:
        m = list(bm.block.members)
        scores.append(float(cor[np.ix_(m, m)].sum()) / len(m) ** 2)
    order = sorted(range(len(bms)), key=lambda i: -scores[i])
    return EstimatorIndex(
        blocks=tuple(bms[i] for i in order),
        cor=cor,
        total_records=float(table.n_rows),
        alpha=alpha,
        scores=tuple(scores[i] for i in order),
        schema=schema,
        plan=plan,
        domains=table.domains,
    )


# -- query compilation --------------------------------------------------------


@dataclass(frozen=True)
class CompiledQuery:
    """Per super-attribute constraint: an int (one factor row) or a coefficient vector."""

    constraints: Mapping
    empty: bool = False
    mask: int = field(default=0, init=False, repr=False, compare=False)

    codes: np.ndarray = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "mask", sum(1 << a for a in self.constraints))
        if self.constraints and all(isinstance(c, (int, np.integer)) for c in self.constraints.values()):
            codes = np.full(max(self.constraints) + 1, -1, dtype=np.int64)
            for a, c in self.constraints.items():
                codes[a] = c
            object.__setattr__(self, "codes", codes)

    @property
    def attrs(self) -> frozenset:
        return frozenset(self.constraints)


def _members(mask: int) -> list:
    out, a = [], 0
    while mask:
        if mask & 1:
            out.append(a)
        mask >>= 1
        a += 1
    return out


def compile_query(index: EstimatorIndex, query: Query) -> CompiledQuery:
    """Translate raw predicates into constraints on the index's super-attributes."""
    schema = index.schema
    if schema is None:
        raise SchemaError("index has no schema; cannot encode raw query constants")
    resolved = resolve_predicates(schema, query)
    plan = index.plan or AttributeJoinPlan.identity(schema.domain_sizes)
    member_constraint = {}
    for a, spec in resolved.items():
        attr = schema[a]
        if spec[0] == "eq":
            code = attr.dictionary.code(spec[1])
            if code is None:
                return CompiledQuery({}, empty=True)
            member_constraint[a] = code
        else:
            xi = range_coefficients(attr.bins, *spec[1:])
            if not xi.any():
                return CompiledQuery({}, empty=True)
            member_constraint[a] = xi
    constraints = {}
    for gi, group in enumerate(plan.groups):
        hit = [a for a in group if a in member_constraint]
        if not hit:
            continue
        if len(group) == 1:
            constraints[gi] = member_constraint[group[0]]
            continue
        if len(hit) == len(group) and all(isinstance(member_constraint[a], int) for a in group):
            code = 0
            for a in group:
                code = code * plan.member_domains[a] + member_constraint[a]
            constraints[gi] = code
            continue
        vec = np.ones(1)
        for a in group:
            d = plan.member_domains[a]
            c = member_constraint.get(a)
            if c is None:
                part = np.ones(d)
            elif isinstance(c, int):
                part = np.zeros(d)
                part[c] = 1.0
            else:
                part = c
            vec = np.kron(vec, part)
        constraints[gi] = vec
    return CompiledQuery(constraints)


# -- evaluation ---------------------------------------------------------------


def block_count(bm: BlockModel, constraints: Mapping, attrs, counter: OpCounts | None = None) -> float:
    """Raw (unclamped) count of the block restricted to ``attrs`` ⊆ block members."""
    model = bm.model
    R = model.rank
    points, vectors = [], []
    for a in attrs:
        c = constraints[a]
        if isinstance(c, (int, np.integer)):
            points.append(bm.offsets[a] + c)
        else:
            vectors.append((a, c))
    if not vectors:
        if counter is not None:
            counter.mults += (len(points) + 1) * R
            counter.adds += R - 1
        return kernels.gather_contract(model.weights, bm.stacked, points)
    rows = bm.stacked[points] if points else np.empty((0, R))
    if vectors:
        extra = []
        for a, c in vectors:
            off = bm.offsets[a]
            extra.append(kernels.axis_aggregate(bm.stacked[off : off + c.size], c))
            if counter is not None:
                nnz = int(np.count_nonzero(c))
                frac = int(np.count_nonzero((c != 0.0) & (c != 1.0)))
                counter.adds += max(nnz - 1, 0) * R
                counter.mults += frac * R
        rows = np.vstack([rows] + extra)
    if counter is not None:
        counter.mults += (len(attrs) + 1) * R
        counter.adds += R - 1
    return kernels.rank_contract(model.weights, rows)


def block_density(bm: BlockModel, query: CompiledQuery, total_records: float, counter=None) -> float:
    """Probability of the query restricted to this block, clamped to [0, 1]."""
    c = block_count(bm, query.constraints, _members(query.mask & bm.mask), counter)
    return min(max(c / total_records, 0.0), 1.0)


def select_blocks(index: EstimatorIndex, t_q) -> list:
    """Greedy cover of ``t_q``: per round decay scores by alpha, add each block's overlap
    with the still-uncovered attributes, take the top score (earliest block on ties).
    Returns indices into ``index.blocks`` in selection order."""
    remains = t_q if isinstance(t_q, int) else sum(1 << a for a in set(t_q))
    missing = remains & ~index._covered
    if missing:
        attrs = _members(missing)
        raise CoverageError(f"attributes {attrs} are not covered by any block", [tuple(attrs)])
    masks = index._masks
    alpha = index.alpha
    scores = [0.0] * len(masks)
    taken = [False] * len(masks)
    chosen = []
    while remains:
        best, best_score = -1, -math.inf
        for l, m in enumerate(masks):
            scores[l] = scores[l] * alpha + (m & remains).bit_count()
            if not taken[l] and scores[l] > best_score:
                best, best_score = l, scores[l]
        taken[best] = True
        chosen.append(best)
        remains &= ~masks[best]
    return chosen


def selected_blocks(index: EstimatorIndex, t_q) -> list:
    """:func:`select_blocks` as :class:`Block` objects."""
    return [index.blocks[l].block for l in select_blocks(index, t_q)]


def fuse(index: EstimatorIndex, query: CompiledQuery, selection: Sequence[int], counter: OpCounts | None = None) -> float:
    """Chain per-block counts along ``selection``; result clamped to [0, N]."""
    counter = counter if counter is not None else OpCounts()
    covered = 0
    est = None
    for j, l in enumerate(selection):
        bm = index.blocks[l]
        hit = query.mask & bm.mask
        num = max(block_count(bm, query.constraints, _members(hit), counter), 0.0)
        if j == 0:
            den = 1.0
        else:
            den = max(block_count(bm, query.constraints, _members(hit & covered), counter), 0.0)
        counter.divs += 1
        if den <= 0.0:
            return 0.0
        term = num / den
        if est is None:
            est = term
        else:
            est = est * term
            counter.mults += 1
        covered |= bm.mask
    if est is None:
        return float(index.total_records)
    return min(max(est, 0.0), float(index.total_records))


def estimate(index: EstimatorIndex, query) -> Estimate:
    """Estimated cardinality of ``query`` (a :class:`Query` or an already compiled one)."""
    compiled = query if isinstance(query, CompiledQuery) else compile_query(index, query)
    counter = OpCounts()
    if compiled.empty:
        return Estimate(0.0, 0, counter)
    if not compiled.constraints:
        return Estimate(float(index.total_records), 0, counter)
    fast = index._fast
    if fast is not None and compiled.codes is not None and not compiled.mask & ~index._covered:
        masks, weights, stacked, offsets = fast
        count, selection, mults, adds, divs = kernels.point_estimate(
            masks, weights, stacked, offsets, compiled.mask, compiled.codes, index.alpha, float(index.total_records)
        )
        return Estimate(count, len(selection), OpCounts(mults, adds, divs), selection)
    selection = select_blocks(index, compiled.mask)
    count = fuse(index, compiled, selection, counter)
    return Estimate(count, len(selection), counter, tuple(selection))


# -- training and updates -----------------------------------------------------


def _block_seed(seed: int, block_id: int) -> int:
    return int(np.random.SeedSequence([seed, block_id]).generate_state(1)[0])


def _fit_one(args):
    tensor, rank, opts, init = args
    return cp_als_fit(tensor, rank, opts, init=init)


def _fit_all(jobs_args, jobs):
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_fit_one, jobs_args))
    return [_fit_one(a) for a in jobs_args]


def rank_for(ranks, block_id: int) -> int:
    if isinstance(ranks, Mapping):
        return int(ranks.get(block_id, ranks.get(str(block_id), ranks.get("default"))))
    return int(ranks)


def train_index(
    table: EncodedTable,
    design: CoveringDesign,
    ranks,
    opts: ALSOptions | None = None,
    alpha: float = DEFAULT_ALPHA,
    schema: Schema | None = None,
    plan: AttributeJoinPlan | None = None,
    jobs: int = 1,
):
    """Build, fit and order one CP model per design block.

    ``ranks`` is an int or a mapping ``block_id -> R`` with an optional
    ``"default"``.  Returns ``(index, reports)`` with reports keyed by block id.
    """
    opts = opts or ALSOptions()
    work = []
    for bid, block in enumerate(design.blocks):
        tensor = build_block_tensor(table, block)
        work.append((tensor, rank_for(ranks, bid), replace(opts, seed=_block_seed(opts.seed, bid)), None))
    results = _fit_all(work, jobs)
    bms, reports = [], {}
    for bid, (block, (model, report)) in enumerate(zip(design.blocks, results)):
        bms.append(BlockModel(block, model, bid))
        reports[bid] = report
    return order_blocks(table, bms, alpha, schema, plan), reports


def update_weights(index: EstimatorIndex, new_total: float) -> EstimatorIndex:
    """Rescale every block's weights by ``new_total / N`` (factors untouched)."""
    if not new_total > 0:
        raise ValueError(f"new total must be positive, got {new_total}")
    if new_total == index.total_records:
        return index
    c = new_total / index.total_records
    blocks = [replace(bm, model=bm.model.scaled(c)) for bm in index.blocks]
    return index.with_blocks(blocks, total_records=float(new_total))


def warm_start_retrain(index: EstimatorIndex, table: EncodedTable, opts: ALSOptions | None = None, jobs: int = 1):
    """Refit every block on ``table`` starting from the weight-rescaled old factors.

    Returns ``(index, reports)``; each report's residual is no worse than the
    rescaled old model's residual on the new tensor.
    """
    opts = opts or ALSOptions()
    if index.domains and tuple(table.domains) != tuple(index.domains):
        raise SchemaError(f"table domains {table.domains} do not match index domains {index.domains}")
    scaled = update_weights(index, float(table.n_rows))
    work = []
    for bm in scaled.blocks:
        tensor = build_block_tensor(table, bm.block)
        work.append((tensor, bm.rank, replace(opts, seed=_block_seed(opts.seed, bm.block_id)), bm.model))
    results = _fit_all(work, jobs)
    bms, reports = [], {}
    for bm, (model, report) in zip(scaled.blocks, results):
        bms.append(replace(bm, model=model))
        reports[bm.block_id] = report
    bms.sort(key=lambda b: b.block_id)
    new = order_blocks(table, bms, index.alpha, index.schema, index.plan)
    return new, reports


def scaled_residual(bm: BlockModel, table: EncodedTable, total: float) -> float:
    """Frobenius residual of the block's model, rescaled to ``total``, against ``table``."""
    t = build_block_tensor(table, bm.block).array()
    m = bm.model.scaled(total / bm.model.weights.sum()) if bm.model.weights.sum() else bm.model
    return float(np.linalg.norm(t - reconstruct_full(m).array()))
