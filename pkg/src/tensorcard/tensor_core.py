"""Dense count tensors and their CP decompositions.

A block's joint distribution is stored as a dense row-major count tensor and
approximated by ``sum_r w[r] * A1[:, r] (x) ... (x) Am[:, r]`` with every factor
column L1-normalized (signed sum 1), so that ``sum(w)`` equals the tensor total
and summing out an axis simply drops its factor.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .errors import (
    DegenerateColumnError,
    InvalidTensorError,
    NumericError,
    ParseError,
    ShapeError,
    TooLargeError,
)

DEFAULT_GUARD = 10**8
CPD1_MAGIC = b"CPD1"


def _frozen(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DenseTensor:
    """Row-major dense tensor.  Count tensors are built with :meth:`from_counts`."""

    shape: tuple
    data: np.ndarray
    total: float

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        object.__setattr__(self, "shape", shape)
        data = _frozen(np.asarray(self.data).ravel())
        object.__setattr__(self, "data", data)
        if data.size != math.prod(shape):
            raise InvalidTensorError(
                f"data has {data.size} entries but shape {shape} needs {math.prod(shape)}"
            )
        if not np.all(np.isfinite(data)):
            raise InvalidTensorError("tensor has non-finite entries")
        s = float(data.sum())
        if not math.isclose(s, float(self.total), rel_tol=1e-9, abs_tol=1e-9):
            raise InvalidTensorError(f"total {self.total} does not match entry sum {s}")

    @classmethod
    def from_array(cls, arr) -> "DenseTensor":
        arr = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise InvalidTensorError("tensor has non-finite entries")
        return cls(arr.shape, arr.ravel(), float(arr.sum()))

    @classmethod
    def from_counts(cls, arr) -> "DenseTensor":
        t = cls.from_array(arr)
        if t.data.size and t.data.min() < 0:
            raise InvalidTensorError("count tensor has negative entries")
        return t

    @property
    def ndim(self):
        return len(self.shape)

    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)


@dataclass(frozen=True)
class CPModel:
    """Weights ``w`` (length R) and one ``|axis| x R`` factor matrix per axis."""

    weights: np.ndarray
    factors: tuple

    def __post_init__(self):
        w = _frozen(np.asarray(self.weights).ravel())
        fs = tuple(_frozen(np.atleast_2d(np.asarray(f))) for f in self.factors)
        for j, f in enumerate(fs):
            if f.shape[1] != w.size:
                raise ShapeError(f"factor {j} has {f.shape[1]} columns, expected rank {w.size}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "factors", fs)

    @property
    def rank(self) -> int:
        return self.weights.size

    @property
    def shape(self) -> tuple:
        return tuple(f.shape[0] for f in self.factors)

    @property
    def ndim(self) -> int:
        return len(self.factors)

    def scaled(self, c: float) -> "CPModel":
        return CPModel(self.weights * c, self.factors)


@dataclass(frozen=True)
class FitReport:
    frobenius_error: float
    max_abs_error: float
    iterations: int
    converged: bool
    history: tuple = field(default=(), repr=False)
    attempts: int = 1
    dropped_components: int = 0

    def to_dict(self):
        return {
            "frobenius_error": self.frobenius_error,
            "max_abs_error": self.max_abs_error,
            "iterations": self.iterations,
            "converged": self.converged,
            "attempts": self.attempts,
            "dropped_components": self.dropped_components,
        }


@dataclass(frozen=True)
class ALSOptions:
    max_iters: int = 200
    tol: float = 1e-6
    seed: int = 0
    retries: int = 0
    ridge: float = 1e-9


def khatri_rao(mats: Sequence[np.ndarray]) -> np.ndarray:
    """Column-wise Kronecker product; the first matrix varies slowest."""
    out = mats[0]
    for m in mats[1:]:
        out = (out[:, None, :] * m[None, :, :]).reshape(-1, out.shape[1])
    return out


def _dense(weights, factors) -> np.ndarray:
    if len(factors) == 1:
        return factors[0] @ weights
    rest = khatri_rao(factors[1:])
    return ((factors[0] * weights) @ rest.T).reshape(tuple(f.shape[0] for f in factors))


def reconstruct_full(model: CPModel, guard: int = DEFAULT_GUARD) -> DenseTensor:
    """Materialize the model as a dense tensor (negative entries preserved)."""
    size = math.prod(model.shape)
    if size > guard:
        raise TooLargeError(f"reconstruction needs {size} entries, guard is {guard}")
    arr = _dense(model.weights, model.factors)
    return DenseTensor(model.shape, arr.ravel(), float(arr.sum()))


def reconstruct_entry(model: CPModel, index: Sequence[int]) -> float:
    if len(index) != model.ndim:
        raise IndexError(f"index has {len(index)} positions, model has {model.ndim} axes")
    acc = np.array(model.weights)
    for j, (i, f) in enumerate(zip(index, model.factors)):
        if not 0 <= i < f.shape[0]:
            raise IndexError(f"position {i} out of bounds for axis {j} of length {f.shape[0]}")
        acc = acc * f[i]
    return float(acc.sum())


def axis_aggregate(model: CPModel, axis: int, coefficients) -> np.ndarray:
    """Per-component dot product of ``coefficients`` with the factor columns of ``axis``."""
    f = model.factors[axis]
    c = np.ascontiguousarray(coefficients, dtype=np.float64)
    if c.ndim != 1 or c.shape[0] != f.shape[0]:
        raise ShapeError(f"expected {f.shape[0]} coefficients for axis {axis}, got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("coefficients must be finite")
    return kernels.axis_aggregate(f, c)


def normalize_l1(model: CPModel, eps: float = 1e-12) -> CPModel:
    """Rescale every factor column to signed sum 1, folding the scale into ``w``."""
    w = np.array(model.weights)
    out = []
    for j, f in enumerate(model.factors):
        s = f.sum(axis=0)
        bad = np.flatnonzero(np.abs(s) < eps)
        if bad.size:
            raise DegenerateColumnError(j, int(bad[0]), float(s[bad[0]]))
        out.append(f / s)
        w = w * s
    return CPModel(w, tuple(out))


def expand_rank(model: CPModel, rank: int) -> CPModel:
    """An equivalent model with ``rank`` components (each original one split evenly).

    Used to benchmark latency against R without paying for a rank-R fit.
    """
    if rank < model.rank:
        raise ValueError("expand_rank can only grow the rank")
    src = np.arange(rank) % model.rank
    copies = np.bincount(src, minlength=model.rank)
    w = model.weights[src] / copies[src]
    return CPModel(w, tuple(f[:, src] for f in model.factors))


def _check_fit_input(tensor) -> np.ndarray:
    if isinstance(tensor, DenseTensor):
        x = tensor.array()
    else:
        x = np.asarray(tensor, dtype=np.float64)
    if x.ndim == 0 or any(d == 0 for d in x.shape):
        raise InvalidTensorError(f"tensor shape {x.shape} has an empty axis")
    if not np.all(np.isfinite(x)):
        raise InvalidTensorError("tensor has non-finite entries")
    return x


def _als_run(x, factors, opts):
    """Plain ALS from ``factors``; returns the best (weights, factors) seen and history."""
    m = x.ndim
    R = factors[0].shape[1]
    shape = x.shape
    unfold = [np.moveaxis(x, n, 0).reshape(shape[n], -1) for n in range(m)]
    xnorm = float(np.linalg.norm(x))
    weights = np.ones(R)

    def residual(wts, fs):
        return float(np.linalg.norm(x - _dense(wts, fs)))

    best_err = residual(weights, factors)
    best = (weights.copy(), [f.copy() for f in factors])
    history = [best_err]
    converged = best_err <= 1e-12 * max(xnorm, 1.0)
    it = 0
    eye = np.eye(R)
    while not converged and it < opts.max_iters:
        it += 1
        for n in range(m):
            others = [factors[k] for k in range(m) if k != n]
            gram = np.ones((R, R))
            for o in others:
                gram *= o.T @ o
            rhs = unfold[n] @ khatri_rao(others)
            sol = np.linalg.solve(gram + opts.ridge * eye, rhs.T).T
            norms = np.linalg.norm(sol, axis=0)
            norms[norms == 0] = 1.0
            factors[n] = sol / norms
            weights = norms
        err = residual(weights, factors)
        history.append(err)
        prev = history[-2]
        if err < best_err:
            best_err = err
            best = (weights.copy(), [f.copy() for f in factors])
        # improvement of the residual relative to the data norm
        if err <= 1e-12 * max(xnorm, 1.0) or (prev - err) < opts.tol * max(xnorm, 1e-300):
            converged = True
    return best, history, it, converged


def _random_factors(shape, R, rng):
    return [rng.random((d, R)) for d in shape]


def _spread(model: CPModel):
    """Factors with the weights pushed into the first axis (ALS starting point)."""
    fs = [np.array(f) for f in model.factors]
    fs[0] = fs[0] * model.weights
    return fs


def cp_als_fit(tensor, rank: int, opts: ALSOptions | None = None, init: CPModel | None = None):
    """Fit a rank-``rank`` CP model by alternating least squares.

    Parameters
    ----------
    tensor : DenseTensor or array_like
        Nonempty tensor with finite entries.
    rank : int
        Number of rank-1 components ``R``.
    opts : ALSOptions, optional
        Iteration cap, relative-improvement tolerance, seed, restarts, ridge.
    init : CPModel, optional
        Warm start; the first attempt resumes from this model instead of a
        random draw.

    Returns
    -------
    (CPModel, FitReport)
        The L1-normalized model with the lowest residual over all attempts.
    """
    opts = opts or ALSOptions()
    if rank < 1:
        raise ValueError("rank must be at least 1")
    x = _check_fit_input(tensor)
    if init is not None and (init.shape != x.shape or init.rank != rank):
        raise ShapeError("warm-start model does not match tensor shape and rank")

    best = None
    for attempt in range(opts.retries + 1):
        if attempt == 0 and init is not None:
            start = _spread(init)
        else:
            rng = np.random.default_rng([opts.seed, attempt])
            start = _random_factors(x.shape, rank, rng)
        (w, fs), history, iters, converged = _als_run(x, start, opts)
        try:
            model = normalize_l1(CPModel(w, tuple(fs)))
        except DegenerateColumnError:
            model = None
        cand = (history and min(history), model, (w, fs), history, iters, converged, attempt)
        if best is None or _better(cand, best):
            best = cand
        if model is not None and converged:
            break

    _, model, (w, fs), history, iters, converged, attempt = best
    dropped = 0
    if model is None:
        model, dropped = _drop_degenerate(w, fs)
        converged = False
    total = float(x.sum())
    model = _total_preserving(x, model, total, opts.ridge)
    err = float(np.linalg.norm(x - _dense(model.weights, model.factors)))
    if init is not None:
        try:
            warm = _total_preserving(x, normalize_l1(init), total, opts.ridge)
        except DegenerateColumnError:
            warm = None
        if warm is not None:
            warm_err = float(np.linalg.norm(x - _dense(warm.weights, warm.factors)))
            if warm_err < err:
                model, err = warm, warm_err
    recon = _dense(model.weights, model.factors)
    report = FitReport(
        frobenius_error=float(np.linalg.norm(x - recon)),
        max_abs_error=float(np.abs(x - recon).max()),
        iterations=iters,
        converged=converged,
        history=tuple(history),
        attempts=attempt + 1,
        dropped_components=dropped,
    )
    return model, report


def _total_preserving(x, model: CPModel, total: float, ridge: float) -> CPModel:
    """Least-squares weights for fixed L1-normalized factors subject to ``sum(w) == total``.

    With unit column sums the reconstruction sums to ``sum(w)``, so this pins
    the model's total to the tensor's at the smallest possible residual cost.
    """
    fs = model.factors
    R = model.rank
    gram = np.ones((R, R))
    for f in fs:
        gram *= f.T @ f
    gram += ridge * np.eye(R)
    unfold0 = x.reshape(x.shape[0], -1)
    rest = khatri_rao(fs[1:]) if len(fs) > 1 else np.ones((1, R))
    b = np.einsum("ir,ij,jr->r", fs[0], unfold0, rest)
    try:
        w_ls = np.linalg.solve(gram, b)
        u = np.linalg.solve(gram, np.ones(R))
    except np.linalg.LinAlgError:
        return model.scaled(total / model.weights.sum()) if model.weights.sum() else model
    denom = u.sum()
    if abs(denom) < 1e-300:
        return model
    w = w_ls - u * ((w_ls.sum() - total) / denom)
    return CPModel(w, fs)


def _better(a, b):
    # a model that normalizes always beats one that does not
    if (a[1] is None) != (b[1] is None):
        return a[1] is not None
    return a[0] < b[0]


def _drop_degenerate(w, fs, eps=1e-12):
    sums = np.stack([f.sum(axis=0) for f in fs])
    keep = np.all(np.abs(sums) >= eps, axis=0)
    if not keep.any():
        raise NumericError("every CP component is degenerate under L1 normalization")
    model = normalize_l1(CPModel(w[keep], tuple(f[:, keep] for f in fs)), eps)
    return model, int((~keep).sum())


# -- CPD1 binary format -------------------------------------------------------


def dumps_cpd1(model: CPModel) -> bytes:
    buf = io.BytesIO()
    buf.write(CPD1_MAGIC)
    buf.write(struct.pack("<II", model.rank, model.ndim))
    buf.write(struct.pack(f"<{model.ndim}I", *model.shape))
    buf.write(model.weights.astype("<f8").tobytes())
    for f in model.factors:
        buf.write(np.asarray(f, dtype="<f8").ravel(order="F").tobytes())
    return buf.getvalue()


def loads_cpd1(blob: bytes) -> CPModel:
    if blob[:4] != CPD1_MAGIC:
        raise ParseError("missing CPD1 magic", position=0)
    if len(blob) < 12:
        raise ParseError("truncated CPD1 header", position=len(blob))
    rank, m = struct.unpack_from("<II", blob, 4)
    off = 12
    shape = struct.unpack_from(f"<{m}I", blob, off)
    off += 4 * m
    need = off + 8 * (rank + rank * sum(shape))
    if len(blob) != need:
        raise ParseError(f"CPD1 payload is {len(blob)} bytes, expected {need}", position=len(blob))
    w = np.frombuffer(blob, dtype="<f8", count=rank, offset=off)
    off += 8 * rank
    factors = []
    for d in shape:
        f = np.frombuffer(blob, dtype="<f8", count=d * rank, offset=off).reshape((d, rank), order="F")
        factors.append(f)
        off += 8 * d * rank
    return CPModel(w.astype(np.float64), tuple(factors))
