# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: tridiagonal factor/solve, affine IMEX sweeps, chattering schedules.

Semantics are identical to ``relaxctrl._kernels._fallback``; the test suite
checks both backends against each other.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, isfinite, fabs, NAN

cnp.import_array()


def thomas_factor(const double[::1] sub, const double[::1] diag, const double[::1] sup):
    cdef Py_ssize_t n = diag.shape[0]
    cdef Py_ssize_t i
    inv_denom_arr = np.empty(n, dtype=np.float64)
    cprime_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] inv_denom = inv_denom_arr
    cdef double[::1] cprime = cprime_arr
    cdef double denom
    denom = diag[0]
    if denom == 0.0:
        raise ZeroDivisionError("singular tridiagonal pivot at row 0")
    inv_denom[0] = 1.0 / denom
    if n > 1:
        cprime[0] = sup[0] * inv_denom[0]
    for i in range(1, n):
        denom = diag[i] - sub[i] * cprime[i - 1]
        if denom == 0.0:
            raise ZeroDivisionError(f"singular tridiagonal pivot at row {i}")
        inv_denom[i] = 1.0 / denom
        if i < n - 1:
            cprime[i] = sup[i] * inv_denom[i]
    return inv_denom_arr, cprime_arr


cdef inline void _solve_inplace(const double[::1] sub, const double[::1] inv_denom,
                                const double[::1] cprime, double[::1] x) nogil:
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t i
    x[0] = x[0] * inv_denom[0]
    for i in range(1, n):
        x[i] = (x[i] - sub[i] * x[i - 1]) * inv_denom[i]
    for i in range(n - 2, -1, -1):
        x[i] = x[i] - cprime[i] * x[i + 1]


def thomas_solve(const double[::1] sub, const double[::1] inv_denom,
                 const double[::1] cprime, const double[::1] rhs):
    out = np.array(rhs, dtype=np.float64, copy=True)
    cdef double[::1] x = out
    _solve_inplace(sub, inv_denom, cprime, x)
    return out


def imex_sweep(const double[::1] sub, const double[::1] inv_denom, const double[::1] cprime,
               const double[::1] y0, const double[:, ::1] coef, const double[:, ::1] source,
               double dt):
    cdef Py_ssize_t nsteps = coef.shape[0]
    cdef Py_ssize_t n = y0.shape[0]
    cdef Py_ssize_t j, i
    cdef Py_ssize_t diverged = -1
    traj = np.full((nsteps + 1, n), np.nan, dtype=np.float64)
    cdef double[:, ::1] Y = traj
    cdef double v
    for i in range(n):
        Y[0, i] = y0[i]
    for j in range(nsteps):
        for i in range(n):
            Y[j + 1, i] = (1.0 + dt * coef[j, i]) * Y[j, i] + dt * source[j, i]
        _solve_inplace(sub, inv_denom, cprime, Y[j + 1])
        for i in range(n):
            v = Y[j + 1, i]
            if not isfinite(v):
                diverged = j + 1
                break
        if diverged >= 0:
            for i in range(n):
                Y[j + 1, i] = NAN
            break
    return traj, diverged


def apportion(const double[:, ::1] weights, const cnp.int64_t[::1] slots):
    cdef Py_ssize_t R = weights.shape[0]
    cdef Py_ssize_t S = weights.shape[1]
    cdef Py_ssize_t r, s, best, given
    cdef double exact, snapped, frac_best
    counts_arr = np.zeros((R, S), dtype=np.int64)
    frac_arr = np.zeros(S, dtype=np.float64)
    taken_arr = np.zeros(S, dtype=np.uint8)
    cdef cnp.int64_t[:, ::1] counts = counts_arr
    cdef double[::1] frac = frac_arr
    cdef cnp.uint8_t[::1] taken = taken_arr
    cdef cnp.int64_t total, remainder
    for r in range(R):
        total = 0
        for s in range(S):
            exact = slots[r] * weights[r, s]
            snapped = floor(exact + 0.5)
            if fabs(exact - snapped) <= 1e-9:
                exact = snapped
            counts[r, s] = <cnp.int64_t>floor(exact)
            frac[s] = exact - counts[r, s]
            taken[s] = 0
            total += counts[r, s]
        remainder = slots[r] - total
        given = 0
        while given < remainder:
            best = -1
            frac_best = -1.0
            for s in range(S):
                if taken[s] == 0 and frac[s] > frac_best:
                    frac_best = frac[s]
                    best = s
            if best < 0:
                break
            counts[r, best] += 1
            taken[best] = 1
            given += 1
    return counts_arr


def interleave(const cnp.int64_t[:, ::1] counts, const cnp.int64_t[::1] slots):
    cdef Py_ssize_t R = counts.shape[0]
    cdef Py_ssize_t S = counts.shape[1]
    cdef Py_ssize_t r, s, j, best, pos = 0
    cdef cnp.int64_t total = 0
    cdef cnp.int64_t cur_best
    for r in range(R):
        total += slots[r]
    seq_arr = np.empty(total, dtype=np.int64)
    cur_arr = np.zeros(S, dtype=np.int64)
    cdef cnp.int64_t[::1] seq = seq_arr
    cdef cnp.int64_t[::1] cur = cur_arr
    for r in range(R):
        for s in range(S):
            cur[s] = 0
        for j in range(slots[r]):
            best = 0
            for s in range(S):
                cur[s] += counts[r, s]
            cur_best = cur[0]
            for s in range(1, S):
                if cur[s] > cur_best:
                    cur_best = cur[s]
                    best = s
            cur[best] -= slots[r]
            seq[pos] = best
            pos += 1
    return seq_arr
