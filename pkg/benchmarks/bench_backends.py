"""Compare the compiled and NumPy estimation backends.

Each backend runs in its own interpreter (the backend is fixed at import via
``TENSORCARD_BACKEND``).  Reports mean microseconds per estimate for
equality-only and range workloads at several ranks, plus raw kernel timings.

    python3 benchmarks/bench_backends.py [--rows 20000] [--ranks 64 1000 10000]
"""

import argparse
import json
import os
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))


def worker(rows, ranks, queries):
    from synth import mixture_columns

    from tensorcard import kernels
    from tensorcard.catalog import CONTINUOUS, SchemaOptions, encode_columns
    from tensorcard.covering import greedy_covering
    from tensorcard.estimator import compile_query, train_index
    from tensorcard.tensor_core import ALSOptions, expand_rank
    from tensorcard.workbench import generate_workload, mean_latency_ms

    cols = mixture_columns(rows, 2024)
    rng = np.random.default_rng(0)
    cols.append(rng.gamma(2.0, 3.0, size=rows) + cols[0])
    names = [f"a{i}" for i in range(6)] + ["x"]
    schema, table = encode_columns(names, cols, SchemaOptions(kinds={"x": CONTINUOUS}, bins=8))
    design = greedy_covering(table.domains, 1200, 3)
    index, _ = train_index(table, design, 16, ALSOptions(max_iters=50, seed=1), schema=schema)
    wl = generate_workload(schema, table, queries, seed=3)
    point = [it.query for it in wl if all(p.op == "eq" for p in it.query.predicates)]
    ranged = [it.query for it in wl if any(p.op != "eq" for p in it.query.predicates)]

    out = {"backend": kernels.BACKEND, "blocks": len(design.blocks), "estimate_us": {}}
    for R in ranks:
        big = index.with_blocks([replace(b, model=expand_rank(b.model, R)) for b in index.blocks])
        row = {}
        for label, qs in (("point", point), ("range", ranged)):
            cq = [compile_query(big, q) for q in qs]
            row[label] = min(mean_latency_ms(big, cq, 3) for _ in range(3)) * 1e3
        out["estimate_us"][str(R)] = row

    kern = {}
    rng = np.random.default_rng(1)
    for R in ranks:
        w = rng.random(R)
        stacked = rng.random((40, R))
        idx = [3, 11, 25]
        factor = np.ascontiguousarray(stacked[:8])
        coeffs = np.linspace(0.2, 1.0, 8)
        n = 2000
        t0 = time.perf_counter()
        for _ in range(n):
            kernels.gather_contract(w, stacked, idx)
        t1 = time.perf_counter()
        for _ in range(n):
            kernels.axis_aggregate(factor, coeffs)
        t2 = time.perf_counter()
        kern[str(R)] = {"gather_contract": (t1 - t0) / n * 1e6, "axis_aggregate": (t2 - t1) / n * 1e6}
    out["kernel_us"] = kern
    out["queries"] = {"point": len(point), "range": len(ranged)}
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=20_000)
    ap.add_argument("--ranks", type=int, nargs="+", default=[64, 1000, 10_000])
    ap.add_argument("--queries", type=int, default=300)
    ap.add_argument("--json", help="also write the raw results here")
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()

    if args.worker:
        print(json.dumps(worker(args.rows, args.ranks, args.queries)))
        return

    results = {}
    for backend in ("cython", "python"):
        env = dict(os.environ, TENSORCARD_BACKEND=backend)
        cmd = [sys.executable, __file__, "--worker", "--rows", str(args.rows), "--queries", str(args.queries),
               "--ranks", *map(str, args.ranks)]
        res = json.loads(subprocess.run(cmd, env=env, check=True, capture_output=True, text=True).stdout)
        if res["backend"] != backend:
            print(f"note: {backend} backend unavailable, got {res['backend']}", file=sys.stderr)
            continue
        results[backend] = res

    print(f"{'R':>7} {'workload':>9} " + " ".join(f"{b + ' us':>12}" for b in results) + "  speedup")
    for R in map(str, args.ranks):
        for label in ("point", "range"):
            vals = [results[b]["estimate_us"][R][label] for b in results]
            speed = f"{vals[1] / vals[0]:7.2f}x" if len(vals) == 2 else ""
            print(f"{R:>7} {label:>9} " + " ".join(f"{v:12.2f}" for v in vals) + "  " + speed)
    print()
    print(f"{'R':>7} {'kernel':>16} " + " ".join(f"{b + ' us':>12}" for b in results))
    for R in map(str, args.ranks):
        for k in ("gather_contract", "axis_aggregate"):
            print(f"{R:>7} {k:>16} " + " ".join(f"{results[b]['kernel_us'][R][k]:12.2f}" for b in results))
    if args.json:
        Path(args.json).write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
