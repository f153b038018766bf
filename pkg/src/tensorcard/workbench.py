"""Ground truth, workload generation and accuracy/latency reporting."""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .catalog import CATEGORICAL, EncodedTable, Schema
from .errors import DataError, GenerationError, MetricError, ParseError
from .estimator import EstimatorIndex, Predicate, Query, compile_query, estimate, resolve_predicates

QUANTILES = (0.5, 0.95, 0.99)


def oracle_count(schema: Schema, table: EncodedTable, query: Query) -> int:
    """Exact row count by full scan over the unjoined table.

    Equalities compare dictionary codes; ranges compare the raw continuous values.
    """
    mask = np.ones(table.n_rows, dtype=bool)
    for a, spec in resolve_predicates(schema, query).items():
        if spec[0] == "eq":
            code = schema[a].dictionary.code(spec[1])
            if code is None:
                return 0
            mask &= table.columns[a] == code
        else:
            _, lo, hi, lo_open, hi_open = spec
            x = table.raw[a]
            mask &= (x > lo) if lo_open else (x >= lo)
            mask &= (x < hi) if hi_open else (x <= hi)
    return int(mask.sum())


def qerror(estimate_: float, truth: int) -> float:
    """``max(est/truth, truth/max(1, est))`` with the estimate rounded half-up."""
    if truth < 1:
        raise MetricError("q-error needs a true count >= 1; score zero-result queries with zero_accuracy")
    est = math.floor(estimate_ + 0.5)
    return max(est / truth, truth / max(1, est))


def zero_accuracy(estimates) -> float:
    """Fraction of zero-result queries whose estimate is below 0.5."""
    est = list(estimates)
    if not est:
        raise MetricError("zero accuracy is undefined for an empty workload")
    return sum(1 for e in est if e < 0.5) / len(est)


def nearest_rank(values, p: float) -> float:
    s = sorted(values)
    if not s:
        raise MetricError("quantile of an empty sample")
    return s[max(math.ceil(p * len(s)) - 1, 0)]


# -- workloads ----------------------------------------------------------------


@dataclass(frozen=True)
class WorkloadItem:
    query: Query
    truth: int

    @property
    def is_zero(self) -> bool:
        return self.truth == 0

    def to_json(self):
        return {**self.query.to_json(), "truth": self.truth}


@dataclass(frozen=True)
class Workload:
    items: tuple
    seed: int | None = None
    params: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def dumps(self) -> str:
        """JSON lines: one query object per line with its ``truth``."""
        return "".join(json.dumps(it.to_json(), sort_keys=True) + "\n" for it in self.items)

    @classmethod
    def loads(cls, text: str, schema: Schema | None = None, table: EncodedTable | None = None) -> "Workload":
        """Parse JSON lines; missing truths are filled by the oracle when a table is given."""
        items = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed workload JSON: {exc.msg}", line=lineno) from None
            q = Query.from_json(obj)
            truth = obj.get("truth")
            if truth is None:
                if table is None:
                    raise DataError(f"line {lineno}: no truth and no table to compute it")
                truth = oracle_count(schema, table, q)
            items.append(WorkloadItem(q, int(truth)))
        return cls(tuple(items))


def _draw_predicates(schema, table, rng, p, min_filters, max_filters):
    n = table.n_rows
    while True:
        include = rng.random(len(schema)) < p
        k = int(include.sum())
        if k >= min_filters and (max_filters is None or k <= max_filters):
            break
    preds = []
    for a in np.flatnonzero(include):
        a = int(a)
        attr = schema[a]
        if attr.kind == CATEGORICAL:
            row = int(rng.integers(n))
            preds.append(Predicate(attr.name, "eq", attr.dictionary.values[table.columns[a][row]]))
            continue
        x = table.raw[a]
        shape = int(rng.integers(3))
        if shape == 2:
            lo, hi = sorted((float(x[rng.integers(n)]), float(x[rng.integers(n)])))
            preds += [Predicate(attr.name, "ge", lo), Predicate(attr.name, "le", hi)]
        elif shape == 0:
            preds.append(Predicate(attr.name, "ge", float(x[rng.integers(n)])))
        else:
            preds.append(Predicate(attr.name, "le", float(x[rng.integers(n)])))
    return Query(tuple(preds))


def generate_workload(
    schema: Schema,
    table: EncodedTable,
    count: int,
    p: float = 0.5,
    seed: int = 0,
    keep_zeros: bool = False,
    only_zeros: bool = False,
    min_filters: int = 2,
    max_filters: int | None = None,
    max_redraws: int = 10_000,
) -> Workload:
    """Random conjunctive queries; each attribute joins a query with probability ``p``.

    Equality constants and range endpoints are values of uniformly chosen rows.
    Queries with fewer than ``min_filters`` filters are redrawn.  Zero-result
    queries are dropped unless ``keep_zeros``; ``only_zeros`` keeps nothing else.
    ``max_redraws`` consecutive rejected draws raise :class:`GenerationError`.
    """
    if not 0 < p < 1:
        raise ValueError("inclusion probability must lie in (0, 1)")
    if min_filters > len(schema):
        raise GenerationError(f"cannot place {min_filters} filters on {len(schema)} attributes")
    rng = np.random.default_rng(seed)
    items, misses = [], 0
    while len(items) < count:
        q = _draw_predicates(schema, table, rng, p, min_filters, max_filters)
        truth = oracle_count(schema, table, q)
        wanted = truth == 0 if only_zeros else (truth > 0 or keep_zeros)
        if not wanted:
            misses += 1
            if misses >= max_redraws:
                kind = "zero" if only_zeros else "nonzero"
                raise GenerationError(f"no {kind} query found in {max_redraws} consecutive draws")
            continue
        misses = 0
        items.append(WorkloadItem(q, truth))
    params = {
        "count": count,
        "p": p,
        "keep_zeros": keep_zeros,
        "only_zeros": only_zeros,
        "min_filters": min_filters,
        "max_filters": max_filters,
    }
    return Workload(tuple(items), seed, params)


# -- reports ------------------------------------------------------------------


@dataclass(frozen=True)
class QErrorReport:
    quantiles: dict | None
    zero_accuracy: float | None
    mean_latency_ms: float | None
    records: tuple
    n_queries: int
    n_zero: int
    metadata: dict = field(default_factory=dict)
    throughput_qps: float | None = None

    def to_dict(self):
        out = {
            "n_queries": self.n_queries,
            "n_zero": self.n_zero,
            "mean_latency_ms": self.mean_latency_ms,
            "records": list(self.records),
            "metadata": self.metadata,
        }
        if self.quantiles is not None:
            out["quantiles"] = self.quantiles
        if self.zero_accuracy is not None:
            out["zero_accuracy"] = self.zero_accuracy
        if self.throughput_qps is not None:
            out["throughput_qps_parallel"] = self.throughput_qps
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def summarize(records, latencies=None, metadata=None, throughput=None) -> QErrorReport:
    qs = [r["qerror"] for r in records if r["truth"] > 0]
    zs = [r["estimate"] for r in records if r["truth"] == 0]
    quant = {f"p{round(p * 100)}": nearest_rank(qs, p) for p in QUANTILES} if qs else None
    return QErrorReport(
        quantiles=quant,
        zero_accuracy=zero_accuracy(zs) if zs else None,
        mean_latency_ms=(sum(latencies) / len(latencies) * 1e3) if latencies else None,
        records=tuple(records),
        n_queries=len(records),
        n_zero=len(zs),
        metadata=dict(metadata or {}),
        throughput_qps=throughput,
    )


def run_benchmark(
    index: EstimatorIndex,
    workload: Workload,
    timing: bool = True,
    metadata=None,
    parallel: int = 0,
) -> QErrorReport:
    """Estimate every workload query sequentially, timing only :func:`estimate`.

    Queries are compiled before the clock starts.  ``parallel > 0`` adds a
    separate throughput pass on that many threads, reported apart from latency.
    """
    compiled = [compile_query(index, it.query) for it in workload]
    records, lat = [], []
    clock = time.perf_counter
    for it, cq in zip(workload, compiled):
        t0 = clock()
        res = estimate(index, cq)
        t1 = clock()
        lat.append(t1 - t0)
        rec = {"estimate": res.count, "truth": it.truth, "blocks_used": res.blocks_used}
        rec["qerror"] = qerror(res.count, it.truth) if it.truth > 0 else None
        if timing:
            rec["latency_ms"] = (t1 - t0) * 1e3
        records.append(rec)
    throughput = None
    if parallel and compiled:
        t0 = clock()
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            list(pool.map(lambda cq: estimate(index, cq), compiled))
        throughput = len(compiled) / (clock() - t0)
    return summarize(records, lat if timing else None, metadata, throughput if timing else None)


def mean_latency_ms(index: EstimatorIndex, queries, repeats: int = 1) -> float:
    """Mean wall time of :func:`estimate` over precompiled ``queries``."""
    compiled = [q if not isinstance(q, Query) else compile_query(index, q) for q in queries]
    clock = time.perf_counter
    t0 = clock()
    for _ in range(repeats):
        for cq in compiled:
            estimate(index, cq)
    return (clock() - t0) / (repeats * len(compiled)) * 1e3
