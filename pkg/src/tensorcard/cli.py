"""Command line: train, estimate, bench, update, verify-cover, inspect.

Every subcommand takes an optional ``--config`` (TOML or JSON); explicit flags
override config values.  Exit statuses: 0 ok, 2 configuration, 3 data,
4 infeasible design, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__, kernels
from .catalog import SchemaOptions, apply_join_plan, encode_with_schema, ingest_csv
from .covering import AttributeJoinPlan, CoveringDesign, greedy_covering, load_design, plan_joins, verify_covering
from .errors import ConfigError, InfeasibleDesignError, TensorCardError
from .estimator import DEFAULT_ALPHA, Query, estimate, train_index, update_weights, warm_start_retrain
from .store import load_index, read_manifest, save_index
from .tensor_core import ALSOptions
from .workbench import Workload, generate_workload, run_benchmark

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


@dataclass
class RunConfig:
    data: str | None = None
    output: str | None = None
    kinds: dict = field(default_factory=dict)
    bins: int = 14
    bin_strategy: str = "equal_frequency"
    design_file: str | None = None
    m_k: float | None = None
    t: int | None = None
    join: str = "none"
    join_groups: list = field(default_factory=list)
    join_balance: float = 1.25
    rank: int = 16
    ranks: dict = field(default_factory=dict)
    max_iters: int = 200
    tol: float = 1e-6
    retries: int = 0
    ridge: float = 1e-9
    alpha: float = DEFAULT_ALPHA
    seed: int = 0
    jobs: int = 1

    def validate(self):
        if self.data is None:
            raise ConfigError("no data file given (config 'data' or --data)")
        if self.output is None:
            raise ConfigError("no output directory given (config 'output' or --out)")
        greedy = self.m_k is not None or self.t is not None
        if bool(self.design_file) == greedy:
            raise ConfigError("give exactly one design source: design.file, or design.m_k with design.t")
        if greedy and (self.m_k is None or self.t is None):
            raise ConfigError("a greedy design needs both design.m_k and design.t")
        if self.join not in ("none", "auto", "explicit"):
            raise ConfigError(f"join must be none, auto or explicit, not {self.join!r}")
        if self.join == "explicit" and not self.join_groups:
            raise ConfigError("join = 'explicit' needs join.groups")
        if self.rank < 1 or any(int(r) < 1 for r in self.ranks.values()):
            raise ConfigError("ranks must be at least 1")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")

    def als(self) -> ALSOptions:
        return ALSOptions(self.max_iters, self.tol, self.seed, self.retries, self.ridge)

    def rank_map(self):
        if not self.ranks:
            return self.rank
        return {"default": self.rank, **{int(k): int(v) for k, v in self.ranks.items()}}


_CONFIG_KEYS = {
    ("data",): "data",
    ("output",): "output",
    ("alpha",): "alpha",
    ("seed",): "seed",
    ("jobs",): "jobs",
    ("schema", "kinds"): "kinds",
    ("schema", "bins"): "bins",
    ("schema", "bin_strategy"): "bin_strategy",
    ("design", "file"): "design_file",
    ("design", "m_k"): "m_k",
    ("design", "t"): "t",
    ("join", "mode"): "join",
    ("join", "groups"): "join_groups",
    ("join", "balance"): "join_balance",
    ("rank", "default"): "rank",
    ("rank", "blocks"): "ranks",
    ("als", "max_iters"): "max_iters",
    ("als", "tol"): "tol",
    ("als", "retries"): "retries",
    ("als", "ridge"): "ridge",
}


def read_config(path) -> dict:
    p = Path(path)
    try:
        text = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        if p.suffix == ".json":
            return json.loads(text)
        return tomllib.loads(text.decode())
    except (json.JSONDecodeError, tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None


def config_from(obj: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for keys, attr in _CONFIG_KEYS.items():
        node = obj
        for k in keys:
            if not isinstance(node, dict) or k not in node:
                break
            node = node[k]
        else:
            setattr(cfg, attr, node)
    unknown = set(obj) - {k[0] for k in _CONFIG_KEYS}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return cfg


def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None


def _plan(cfg: RunConfig, schema) -> AttributeJoinPlan:
    doms = schema.domain_sizes
    if cfg.join == "none":
        return AttributeJoinPlan.identity(doms)
    if cfg.join == "auto":
        return plan_joins(doms, cfg.join_balance)
    groups = [[schema.index(a) for a in g] for g in cfg.join_groups]
    return AttributeJoinPlan.from_groups(groups, doms)


def _design(cfg: RunConfig, domains) -> CoveringDesign:
    if cfg.design_file:
        design = load_design(_read_text(cfg.design_file), verify=True, domain_sizes=domains, m_k=cfg.m_k)
        if design.v != len(domains):
            raise InfeasibleDesignError(f"design has v={design.v} but the table has {len(domains)} (super-)attributes")
        return design
    return greedy_covering(domains, cfg.m_k, int(cfg.t))


def _emit(obj, out=None):
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    sys.stdout.write(text)
    if out:
        Path(out).write_text(text)


# -- subcommands --------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = config_from(read_config(args.config)) if args.config else RunConfig()
    for flag, attr in (("data", "data"), ("out", "output"), ("seed", "seed"), ("rank", "rank"),
                       ("m_k", "m_k"), ("t", "t"), ("design", "design_file"), ("jobs", "jobs"),
                       ("join", "join"), ("max_iters", "max_iters")):
        val = getattr(args, flag)
        if val is not None:
            setattr(cfg, attr, val)
    cfg.validate()
    schema, table = ingest_csv(_read_text(cfg.data), SchemaOptions(cfg.kinds, cfg.bins, cfg.bin_strategy))
    plan = _plan(cfg, schema)
    joined = table if plan.is_identity else apply_join_plan(table, plan)
    design = _design(cfg, joined.domains)
    t0 = time.perf_counter()
    index, reports = train_index(joined, design, cfg.rank_map(), cfg.als(), cfg.alpha, schema, plan, cfg.jobs)
    elapsed = time.perf_counter() - t0
    root = save_index(index, cfg.output, design, reports, {"seed": cfg.seed})
    (root / "timing.json").write_text(json.dumps({"train_seconds": elapsed}) + "\n")
    worst = max(r.max_abs_error for r in reports.values())
    print(
        f"trained {len(design.blocks)} blocks on {table.n_rows} rows in {elapsed:.2f}s "
        f"({elapsed / len(design.blocks):.2f}s per block); worst max_abs_error {worst:.4g}; wrote {root}"
    )
    return 0


def _query_text(arg: str) -> str:
    if arg == "-":
        return sys.stdin.read()
    if arg.startswith("@"):
        return _read_text(arg[1:])
    return arg


def cmd_estimate(args) -> int:
    index = load_index(args.model)
    res = estimate(index, Query.from_json(_query_text(args.query)))
    _emit(res.to_dict())
    return 0


def cmd_bench(args) -> int:
    index = load_index(args.model)
    manifest = read_manifest(args.model)
    schema = index.schema
    table = encode_with_schema(schema, _read_text(args.data)) if args.data else None
    if args.workload:
        workload = Workload.loads(_read_text(args.workload), schema, table)
        source = {"workload": Path(args.workload).name}
    else:
        if table is None:
            raise ConfigError("bench needs --workload or --data to generate one")
        workload = generate_workload(
            schema, table, args.count, args.p, args.seed,
            keep_zeros=args.keep_zeros, only_zeros=args.only_zeros, max_filters=args.max_filters,
        )
        source = {"generated": workload.params, "seed": args.seed}
        if args.save_workload:
            Path(args.save_workload).write_text(workload.dumps())
    meta = {
        **source,
        "ranks": {str(b["id"]): b["rank"] for b in manifest["blocks"]},
        "design": manifest.get("design"),
        "train_seed": manifest.get("seed"),
    }
    if not args.no_timing:
        meta["host"] = {"python": platform.python_version(), "machine": platform.machine(), "backend": kernels.BACKEND}
        meta["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    report = run_benchmark(index, workload, timing=not args.no_timing, metadata=meta, parallel=args.parallel)
    text = report.to_json()
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return 0


def cmd_update(args) -> int:
    src = Path(args.model)
    dst = Path(args.out) if args.out else src.with_name(src.name + "-updated")
    if dst.resolve() == src.resolve():
        raise ConfigError("update writes a new directory; --out must differ from the model directory")
    index = load_index(src)
    manifest = read_manifest(src)
    reports = None
    if args.retrain:
        if not args.data:
            raise ConfigError("--retrain needs --data with the full current table")
        table = encode_with_schema(index.schema, _read_text(args.data))
        if index.plan is not None and not index.plan.is_identity:
            table = apply_join_plan(table, index.plan)
        opts = ALSOptions(max_iters=args.max_iters, tol=args.tol, seed=manifest.get("seed") or 0)
        index, reports = warm_start_retrain(index, table, opts)
        mode = "retrain"
    else:
        if args.total is not None:
            total = args.total
        elif args.data:
            total = encode_with_schema(index.schema, _read_text(args.data)).n_rows
        else:
            raise ConfigError("--weights-only needs --total or --data")
        old = index.total_records
        index = update_weights(index, float(total))
        mode = f"weights scaled by {index.total_records / old:.6g}"
    design = None
    if manifest.get("design"):
        d = manifest["design"]
        design = CoveringDesign(d["v"], d["k"], d["t"], (), d["m_k"])
    save_index(index, dst, design, reports, {"seed": manifest.get("seed")})
    print(f"{mode}; N = {index.total_records:g}; wrote {dst}")
    return 0


def cmd_verify_cover(args) -> int:
    text = _read_text(args.design)
    doms = [int(x) for x in args.domains.split(",")] if args.domains else None
    design = load_design(text, verify=False)
    if doms is not None:
        if len(doms) != design.v:
            raise ConfigError(f"--domains lists {len(doms)} sizes but the design has v={design.v}")
        design = load_design(text, verify=False, domain_sizes=doms, m_k=args.m_k)
    missing = verify_covering(design)
    over = [[a + 1 for a in b.members] for b in design.over_budget()]
    valid = not missing and not over
    _emit({
        "v": design.v, "k": design.k, "t": design.t, "blocks": len(design.blocks),
        "valid": valid,
        "uncovered": [[a + 1 for a in s] for s in missing],
        "over_budget": over,
    })
    return 0 if valid else InfeasibleDesignError.exit_code


def cmd_inspect(args) -> int:
    _emit(read_manifest(args.model))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tensorcard", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit one CP model per design block")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--design", help="design file (1-based blocks)")
    p.add_argument("--m-k", dest="m_k", type=float)
    p.add_argument("--t", type=int)
    p.add_argument("--rank", type=int)
    p.add_argument("--join", choices=("none", "auto", "explicit"))
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate", help="estimate one query")
    p.add_argument("model")
    p.add_argument("query", help="query JSON, @file, or - for stdin")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("bench", help="q-error / zero-accuracy / latency report")
    p.add_argument("model")
    p.add_argument("--workload", help="JSON-lines workload file")
    p.add_argument("--data", help="CSV for generating a workload or filling missing truths")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--p", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--keep-zeros", action="store_true")
    p.add_argument("--only-zeros", action="store_true")
    p.add_argument("--max-filters", type=int)
    p.add_argument("--save-workload")
    p.add_argument("--parallel", type=int, default=0, help="threads for a separate throughput pass")
    p.add_argument("--no-timing", action="store_true", help="omit latencies and host data (byte-stable report)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("update", help="write an updated copy of a model directory")
    p.add_argument("model")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--weights-only", action="store_true")
    mode.add_argument("--retrain", action="store_true")
    p.add_argument("--data", help="CSV of the full current table")
    p.add_argument("--total", type=float, help="new record count (weights-only)")
    p.add_argument("--max-iters", dest="max_iters", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out")
    p.set_defaults(func=cmd_update)

    p = sub.add_parser("verify-cover", help="check a design file")
    p.add_argument("design")
    p.add_argument("--domains", help="comma-separated domain sizes for the budget check")
    p.add_argument("--m-k", dest="m_k", type=float)
    p.set_defaults(func=cmd_verify_cover)

    p = sub.add_parser("inspect", help="print a model manifest")
    p.add_argument("model")
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TensorCardError as exc:
        print(f"tensorcard {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
