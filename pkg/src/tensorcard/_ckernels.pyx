# cython: boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled estimation kernels. Must match ``_pykernels`` to rounding."""

import numpy as np


def rank_contract(const double[::1] w, const double[:, ::1] rows):
    """sum_r w[r] * prod_j rows[j, r], multiplying from 1.0 then by w[r]."""
    cdef Py_ssize_t R = w.shape[0]
    cdef Py_ssize_t m = rows.shape[0]
    cdef Py_ssize_t r, j
    cdef double acc, total = 0.0
    if m and rows.shape[1] != R:
        raise ValueError("rows must have one column per rank component")
    for r in range(R):
        acc = 1.0
        for j in range(m):
            acc = acc * rows[j, r]
        total += acc * w[r]
    return total


def axis_aggregate(const double[:, ::1] factor, const double[::1] coeffs):
    """sum_i coeffs[i] * factor[i, :], skipping zeros and unit multiplies."""
    cdef Py_ssize_t d = factor.shape[0]
    cdef Py_ssize_t R = factor.shape[1]
    cdef Py_ssize_t i, r
    cdef double c
    if coeffs.shape[0] != d:
        raise ValueError("coefficient length must match the axis length")
    out = np.zeros(R, dtype=np.float64)
    cdef double[::1] o = out
    for i in range(d):
        c = coeffs[i]
        if c == 0.0:
            continue
        if c == 1.0:
            for r in range(R):
                o[r] += factor[i, r]
        else:
            for r in range(R):
                o[r] += c * factor[i, r]
    return out


def gather_contract(const double[::1] w, const double[:, ::1] stacked, list idx):
    """rank_contract over the rows ``stacked[idx]`` without materializing them."""
    cdef Py_ssize_t R = w.shape[0]
    cdef Py_ssize_t m = len(idx)
    cdef Py_ssize_t r, j
    cdef double acc, total = 0.0
    cdef Py_ssize_t[16] small
    cdef Py_ssize_t n = stacked.shape[0]
    if stacked.shape[1] != R:
        raise ValueError("rows must have one column per rank component")
    if m > 16:
        return rank_contract(w, np.ascontiguousarray(np.asarray(stacked)[idx]))
    for j in range(m):
        small[j] = idx[j]
        if small[j] < 0 or small[j] >= n:
            raise IndexError("row index out of range")
    for r in range(R):
        acc = 1.0
        for j in range(m):
            acc = acc * stacked[small[j], r]
        total += acc * w[r]
    return total


cdef inline int _popcount(unsigned long long x):
    cdef int c = 0
    while x:
        x &= x - 1
        c += 1
    return c


cdef double _contract(const double[::1] w, const double[:, ::1] f, const long long* rows, int m):
    cdef Py_ssize_t R = w.shape[0]
    cdef Py_ssize_t r
    cdef int j
    cdef double acc, total = 0.0
    for r in range(R):
        acc = 1.0
        for j in range(m):
            acc = acc * f[rows[j], r]
        total += acc * w[r]
    return total


def point_estimate(const unsigned long long[::1] masks, list weights, list stacked,
                   const long long[:, ::1] offsets, unsigned long long qmask,
                   const long long[::1] codes, double alpha, double total):
    """Selection plus fused count for an equality-only query over at most 64 attributes.

    Mirrors ``select_blocks`` followed by ``fuse``; returns
    ``(count, selection, mults, adds, divs)``.
    """
    cdef Py_ssize_t nb = masks.shape[0]
    cdef Py_ssize_t v = offsets.shape[1]
    cdef Py_ssize_t l, best, a
    cdef unsigned long long remains = qmask, covered = 0, hit, sub
    cdef double best_score, num, den, est = 1.0
    cdef long long mults = 0, adds = 0, divs = 0, R
    cdef int m, j = 0
    cdef const double[::1] w
    cdef const double[:, ::1] f
    cdef long long rows[64]
    cdef double small_scores[256]
    cdef unsigned char small_taken[256]
    cdef double* scores = small_scores
    cdef unsigned char* taken = small_taken
    if v > 64:
        raise ValueError("the compiled path supports at most 64 attributes")
    cdef double[::1] big_scores
    cdef unsigned char[::1] big_taken
    if nb > 256:
        big_scores = np.zeros(nb)
        big_taken = np.zeros(nb, dtype=np.uint8)
        scores = &big_scores[0]
        taken = &big_taken[0]
    else:
        for l in range(nb):
            scores[l] = 0.0
            taken[l] = 0
    selection = []
    # selection (every constrained attribute is known to be covered)
    while remains:
        best = -1
        best_score = -1.0
        for l in range(nb):
            scores[l] = scores[l] * alpha + _popcount(masks[l] & remains)
            if not taken[l] and scores[l] > best_score:
                best = l
                best_score = scores[l]
        taken[best] = 1
        selection.append(best)
        remains &= ~masks[best]
    # fusion
    for j in range(len(selection)):
        l = selection[j]
        w = weights[l]
        f = stacked[l]
        R = w.shape[0]
        hit = qmask & masks[l]
        for pass_ in range(2 if j else 1):
            sub = hit if pass_ == 0 else hit & covered
            m = 0
            for a in range(v):
                if (sub >> a) & 1:
                    rows[m] = offsets[l, a] + codes[a]
                    m += 1
            mults += (m + 1) * R
            adds += R - 1
            if pass_ == 0:
                num = _contract(w, f, rows, m)
                if num < 0.0:
                    num = 0.0
            else:
                den = _contract(w, f, rows, m)
        if j == 0:
            den = 1.0
        elif den < 0.0:
            den = 0.0
        divs += 1
        if den <= 0.0:
            return 0.0, tuple(selection), mults, adds, divs
        if j == 0:
            est = num / den
        else:
            est = est * (num / den)
            mults += 1
        covered |= masks[l]
    if est < 0.0:
        est = 0.0
    if est > total:
        est = total
    return est, tuple(selection), mults, adds, divs
