"""Backend selection for the per-query hot loops.

The compiled extension is used when it was built; set ``TENSORCARD_BACKEND=python``
to force the NumPy fallback (the test-suite checks both agree).
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("TENSORCARD_BACKEND", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # noqa: F811
    except ImportError:
        _impl = _pykernels
    else:
        BACKEND = "cython"

rank_contract = _impl.rank_contract
axis_aggregate = _impl.axis_aggregate
gather_contract = _impl.gather_contract
# selection plus fusion for equality-only queries; compiled backend only
point_estimate = getattr(_impl, "point_estimate", None)


def available_backends():
    found = {"python": _pykernels}
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        found["cython"] = _ckernels
    return found
