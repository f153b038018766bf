"""NumPy implementations of the estimation kernels (fallback backend)."""

import numpy as np


def rank_contract(w, rows):
    if rows.shape[0] and rows.shape[1] != w.shape[0]:
        raise ValueError("rows must have one column per rank component")
    return float(np.dot(rows.prod(axis=0), w))


def axis_aggregate(factor, coeffs):
    if coeffs.shape[0] != factor.shape[0]:
        raise ValueError("coefficient length must match the axis length")
    nz = np.flatnonzero(coeffs)
    if nz.size == 0:
        return np.zeros(factor.shape[1])
    return coeffs[nz] @ factor[nz]


def gather_contract(w, stacked, idx):
    return rank_contract(w, stacked[idx])
