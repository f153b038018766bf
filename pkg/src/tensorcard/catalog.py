"""Tabular ingestion: value dictionaries, bins, joined super-attributes, block tensors."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .covering import AttributeJoinPlan, Block
from .errors import DataValueError, EmptyInputError, ParseError, PlanError, SchemaError, TooLargeError
from .tensor_core import DEFAULT_GUARD, DenseTensor

CATEGORICAL = "categorical"
CONTINUOUS = "continuous"


@dataclass(frozen=True)
class ValueDictionary:
    """Distinct raw values in first-appearance order; a value's code is its position."""

    values: tuple
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        vals = tuple(v.item() if isinstance(v, np.generic) else v for v in self.values)
        object.__setattr__(self, "values", vals)
        idx = {v: i for i, v in enumerate(vals)}
        if len(idx) != len(self.values):
            raise SchemaError("dictionary values must be distinct")
        object.__setattr__(self, "_index", idx)

    def __len__(self):
        return len(self.values)

    def code(self, value):
        """Code of ``value`` or ``None`` when absent.  Falls back to ``str(value)``
        so JSON numbers match CSV-ingested strings."""
        c = self._index.get(value)
        if c is None and not isinstance(value, str):
            c = self._index.get(str(value))
        return c

    def encode(self, column) -> np.ndarray:
        out = np.empty(len(column), dtype=np.int64)
        for i, v in enumerate(column):
            c = self._index.get(v)
            if c is None:
                raise SchemaError(f"value {v!r} is not in the dictionary")
            out[i] = c
        return out


@dataclass(frozen=True)
class BinSpec:
    """Bin ``i`` is ``[b_i, b_{i+1})``; the last bin is closed on the right."""

    boundaries: tuple

    def __post_init__(self):
        b = tuple(float(x) for x in self.boundaries)
        if len(b) < 2 or any(hi <= lo for lo, hi in zip(b, b[1:])):
            raise SchemaError(f"bin boundaries must be strictly increasing: {b}")
        object.__setattr__(self, "boundaries", b)

    def __len__(self):
        return len(self.boundaries) - 1

    @property
    def edges(self) -> np.ndarray:
        return np.asarray(self.boundaries)

    def assign(self, values) -> np.ndarray:
        """Bin index per value; values outside ``[b_0, b_m]`` go to the edge bins."""
        x = np.asarray(values, dtype=np.float64)
        idx = np.searchsorted(self.edges, x, side="right") - 1
        return np.clip(idx, 0, len(self) - 1)

    @classmethod
    def equal_frequency(cls, values, n_bins: int) -> "BinSpec":
        x = np.asarray(values, dtype=np.float64)
        b = np.unique(np.quantile(x, np.linspace(0.0, 1.0, n_bins + 1)))
        if b.size < 2:
            v = float(x[0])
            b = np.array([v, v + 1.0])
        return cls(tuple(b))

    @classmethod
    def equal_width(cls, values, n_bins: int) -> "BinSpec":
        x = np.asarray(values, dtype=np.float64)
        lo, hi = float(x.min()), float(x.max())
        if hi <= lo:
            hi = lo + 1.0
        return cls(tuple(np.linspace(lo, hi, n_bins + 1)))


@dataclass(frozen=True)
class Attribute:
    name: str
    kind: str
    dictionary: ValueDictionary | None = None
    bins: BinSpec | None = None

    @property
    def domain_size(self) -> int:
        return len(self.dictionary) if self.kind == CATEGORICAL else len(self.bins)

    def to_json(self):
        out = {"name": self.name, "kind": self.kind}
        if self.kind == CATEGORICAL:
            out["dictionary"] = list(self.dictionary.values)
        else:
            out["boundaries"] = list(self.bins.boundaries)
        return out

    @classmethod
    def from_json(cls, obj):
        if obj["kind"] == CATEGORICAL:
            return cls(obj["name"], CATEGORICAL, dictionary=ValueDictionary(tuple(obj["dictionary"])))
        if obj["kind"] == CONTINUOUS:
            return cls(obj["name"], CONTINUOUS, bins=BinSpec(tuple(obj["boundaries"])))
        raise SchemaError(f"unknown attribute kind {obj['kind']!r}")


@dataclass(frozen=True)
class Schema:
    attributes: tuple

    def __post_init__(self):
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise SchemaError("attribute names must be unique")
        object.__setattr__(self, "_by_name", {n: i for i, n in enumerate(names)})

    def __len__(self):
        return len(self.attributes)

    def __getitem__(self, i) -> Attribute:
        return self.attributes[i]

    @property
    def names(self) -> list:
        return [a.name for a in self.attributes]

    @property
    def domain_sizes(self) -> tuple:
        return tuple(a.domain_size for a in self.attributes)

    def index(self, name) -> int:
        if isinstance(name, int) and not isinstance(name, bool):
            if not 0 <= name < len(self):
                raise SchemaError(f"attribute index {name} out of range")
            return name
        try:
            return self._by_name[name]
        except KeyError:
            raise SchemaError(f"unknown attribute {name!r}") from None

    def to_json(self):
        return {"attributes": [a.to_json() for a in self.attributes]}

    @classmethod
    def from_json(cls, obj):
        return cls(tuple(Attribute.from_json(a) for a in obj["attributes"]))

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class EncodedTable:
    """Integer codes per column.  ``raw`` keeps continuous columns' original values
    (the oracle evaluates ranges on them); ``plan`` is set on joined tables."""

    n_rows: int
    columns: tuple
    domains: tuple
    raw: Mapping = field(default_factory=dict)
    plan: AttributeJoinPlan | None = None

    def __post_init__(self):
        cols = tuple(np.asarray(c, dtype=np.int64) for c in self.columns)
        for c in cols:
            c.setflags(write=False)
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "domains", tuple(int(d) for d in self.domains))
        for j, (c, d) in enumerate(zip(cols, self.domains)):
            if c.shape != (self.n_rows,):
                raise SchemaError(f"column {j} has length {c.shape[0]}, expected {self.n_rows}")
            if self.n_rows and (c.min() < 0 or c.max() >= d):
                raise SchemaError(f"column {j} has codes outside 0..{d - 1}")

    @property
    def n_cols(self) -> int:
        return len(self.columns)

    def code_matrix(self) -> np.ndarray:
        return np.stack(self.columns, axis=1)

    def concat(self, other: "EncodedTable") -> "EncodedTable":
        if other.domains != self.domains:
            raise SchemaError("cannot append a table with different domains")
        raw = {k: np.concatenate([self.raw[k], other.raw[k]]) for k in self.raw}
        cols = tuple(np.concatenate([a, b]) for a, b in zip(self.columns, other.columns))
        return EncodedTable(self.n_rows + other.n_rows, cols, self.domains, raw, self.plan)


@dataclass(frozen=True)
class SchemaOptions:
    kinds: Mapping = field(default_factory=dict)
    bins: int = 14
    bin_strategy: str = "equal_frequency"


def _parse_float(value, row, name):
    try:
        return float(value)
    except ValueError:
        raise DataValueError(f"row {row}: column {name!r} value {value!r} is not numeric") from None


def encode_columns(names: Sequence[str], columns: Sequence, opts: SchemaOptions | None = None):
    """Build a schema from raw columns and encode them.  Returns ``(Schema, EncodedTable)``."""
    opts = opts or SchemaOptions()
    if not columns or len(columns[0]) == 0:
        raise EmptyInputError("table has no rows")
    n = len(columns[0])
    attrs, codes, raw = [], [], {}
    for j, (name, col) in enumerate(zip(names, columns)):
        kind = opts.kinds.get(name, CATEGORICAL)
        if kind == CATEGORICAL:
            d = ValueDictionary(tuple(dict.fromkeys(col)))
            attrs.append(Attribute(name, CATEGORICAL, dictionary=d))
            codes.append(d.encode(col))
        elif kind == CONTINUOUS:
            x = np.asarray([_parse_float(v, i + 2, name) for i, v in enumerate(col)]) if (
                len(col) and isinstance(col[0], str)
            ) else np.asarray(col, dtype=np.float64)
            if opts.bin_strategy == "equal_frequency":
                spec = BinSpec.equal_frequency(x, opts.bins)
            elif opts.bin_strategy == "equal_width":
                spec = BinSpec.equal_width(x, opts.bins)
            else:
                raise SchemaError(f"unknown bin strategy {opts.bin_strategy!r}")
            attrs.append(Attribute(name, CONTINUOUS, bins=spec))
            codes.append(spec.assign(x))
            raw[j] = x
        else:
            raise SchemaError(f"unknown kind {kind!r} for column {name!r}")
    schema = Schema(tuple(attrs))
    return schema, EncodedTable(n, tuple(codes), schema.domain_sizes, raw)


def _read_csv(content: str):
    reader = csv.reader(io.StringIO(content), delimiter=",", quotechar='"')
    rows = list(reader)
    if not rows:
        raise EmptyInputError("CSV has no header")
    header = rows[0]
    body = [r for r in rows[1:] if r]
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise ParseError(f"expected {len(header)} fields, found {len(r)}", line=i)
    if not body:
        raise EmptyInputError("CSV has a header but no rows")
    cols = [[r[j] for r in body] for j in range(len(header))]
    return header, cols


def ingest_csv(content: str, opts: SchemaOptions | None = None):
    """Parse CSV text (comma-separated, double-quoted, header row) into a schema and codes."""
    header, cols = _read_csv(content)
    opts = opts or SchemaOptions()
    unknown = set(opts.kinds) - set(header)
    if unknown:
        raise SchemaError(f"schema options name unknown columns {sorted(unknown)}")
    return encode_columns(header, cols, opts)


def encode_with_schema(schema: Schema, content: str | None = None, columns=None) -> EncodedTable:
    """Encode new rows with an existing schema (for updates and retraining)."""
    if content is not None:
        header, columns = _read_csv(content)
        if header != schema.names:
            raise SchemaError(f"CSV header {header} does not match schema {schema.names}")
    n = len(columns[0])
    codes, raw = [], {}
    for j, (attr, col) in enumerate(zip(schema.attributes, columns)):
        if attr.kind == CATEGORICAL:
            codes.append(attr.dictionary.encode(col))
        else:
            x = np.asarray([_parse_float(v, i + 2, attr.name) for i, v in enumerate(col)]) if (
                n and isinstance(col[0], str)
            ) else np.asarray(col, dtype=np.float64)
            codes.append(attr.bins.assign(x))
            raw[j] = x
    return EncodedTable(n, tuple(codes), schema.domain_sizes, raw)


def apply_join_plan(table: EncodedTable, plan: AttributeJoinPlan) -> EncodedTable:
    """One column per plan group, coded mixed-radix over the members (first member slowest)."""
    listed = [a for g in plan.groups for a in g]
    if len(set(listed)) != len(listed):
        raise PlanError("join groups overlap")
    if any(not 0 <= a < table.n_cols for a in listed) or len(listed) != table.n_cols:
        raise PlanError("join plan does not match the table's columns")
    cols, doms = [], []
    for g in plan.groups:
        code = np.zeros(table.n_rows, dtype=np.int64)
        dom = 1
        for a in g:
            code = code * table.domains[a] + table.columns[a]
            dom *= table.domains[a]
        cols.append(code)
        doms.append(dom)
    raw = {plan.groups.index(g): table.raw[g[0]] for g in plan.groups if len(g) == 1 and g[0] in table.raw}
    return EncodedTable(table.n_rows, tuple(cols), tuple(doms), raw, plan)


def decode_join(table: EncodedTable) -> EncodedTable:
    """Invert :func:`apply_join_plan` back to the original columns."""
    plan = table.plan
    if plan is None:
        return table
    n_orig = sum(len(g) for g in plan.groups)
    cols = [None] * n_orig
    for gi, g in enumerate(plan.groups):
        parts = np.unravel_index(table.columns[gi], tuple(plan.member_domains[a] for a in g))
        for a, p in zip(g, parts):
            cols[a] = p
    return EncodedTable(table.n_rows, tuple(cols), plan.member_domains)


def build_block_tensor(table: EncodedTable, block: Block, guard: int = DEFAULT_GUARD) -> DenseTensor:
    """Count tensor over the block's attributes (axis order = ``block.members``)."""
    shape = tuple(table.domains[a] for a in block.members)
    size = math.prod(shape)
    if size > guard:
        raise TooLargeError(f"block {block.members} needs {size} cells, guard is {guard}")
    flat = np.ravel_multi_index(tuple(table.columns[a] for a in block.members), shape)
    counts = np.bincount(flat, minlength=size).astype(np.float64)
    return DenseTensor(shape, counts, float(table.n_rows))


def pairwise_marginal(table: EncodedTable, j: int, h: int):
    """Joint probability matrix of columns ``j`` and ``h`` plus both marginals."""
    if j == h:
        raise ValueError("pairwise_marginal needs two distinct columns")
    dj, dh = table.domains[j], table.domains[h]
    flat = table.columns[j] * dh + table.columns[h]
    joint = np.bincount(flat, minlength=dj * dh).reshape(dj, dh) / table.n_rows
    return joint, joint.sum(axis=1), joint.sum(axis=0)
