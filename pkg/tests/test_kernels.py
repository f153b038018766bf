import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tensorcard import _pykernels, kernels

BACKENDS = kernels.available_backends()
compiled = pytest.mark.skipif("cython" not in BACKENDS, reason="compiled kernels not built")

finite = st.floats(-10, 10, allow_nan=False)


@st.composite
def rows_and_weights(draw):
    R = draw(st.integers(1, 40))
    m = draw(st.integers(0, 6))
    w = draw(arrays(np.float64, R, elements=finite))
    rows = draw(arrays(np.float64, (m, R), elements=finite))
    return w, rows


def test_python_backend_always_available():
    assert "python" in BACKENDS
    assert kernels.BACKEND in BACKENDS


@settings(max_examples=100, deadline=None)
@given(rows_and_weights())
def test_rank_contract_reference(args):
    w, rows = args
    want = sum(w[r] * np.prod(rows[:, r]) for r in range(w.size))
    for impl in BACKENDS.values():
        assert impl.rank_contract(w, rows) == pytest.approx(want, rel=1e-9, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12).flatmap(lambda d: st.tuples(
    arrays(np.float64, (d, 5), elements=finite), arrays(np.float64, d, elements=st.floats(0, 1)))))
def test_axis_aggregate_reference(args):
    factor, coeffs = args
    want = coeffs @ factor
    for impl in BACKENDS.values():
        np.testing.assert_allclose(impl.axis_aggregate(factor, coeffs), want, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), st.lists(st.integers(0, 19), max_size=24), st.integers(0, 2**32 - 1))
def test_gather_contract_agrees(R, idx, seed):
    rng = np.random.default_rng(seed)
    stacked = rng.random((20, R))
    w = rng.random(R)
    want = _pykernels.rank_contract(w, stacked[idx])
    for impl in BACKENDS.values():
        assert impl.gather_contract(w, stacked, idx) == pytest.approx(want, rel=1e-12)


def test_shape_checks():
    for impl in BACKENDS.values():
        with pytest.raises(ValueError):
            impl.rank_contract(np.ones(3), np.ones((2, 4)))
        with pytest.raises(ValueError):
            impl.axis_aggregate(np.ones((3, 2)), np.ones(4))


def test_empty_rows_sum_weights():
    w = np.array([1.5, 2.5])
    for impl in BACKENDS.values():
        assert impl.rank_contract(w, np.empty((0, 2))) == 4.0


@compiled
def test_point_estimate_too_many_attributes():
    ck = BACKENDS["cython"]
    with pytest.raises(ValueError):
        ck.point_estimate(
            np.zeros(1, dtype=np.uint64), [np.ones(1)], [np.ones((1, 1))],
            np.full((1, 65), -1, dtype=np.int64), 1, np.zeros(1, dtype=np.int64), 0.01, 1.0,
        )


def test_env_forces_fallback():
    env = dict(os.environ, TENSORCARD_BACKEND="python")
    code = "from tensorcard import kernels; print(kernels.BACKEND, kernels.point_estimate)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["python", "None"]
