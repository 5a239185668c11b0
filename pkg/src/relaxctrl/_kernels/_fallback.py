"""Pure-Python implementations of the compiled kernels in ``_core.pyx``.

Same algorithms, same operation order; used when the extension is not built
or when ``RELAXCTRL_PURE_PYTHON=1``.
"""

from __future__ import annotations

import math

import numpy as np


def thomas_factor(sub, diag, sup):
    n = diag.shape[0]
    inv_denom = np.empty(n)
    cprime = np.zeros(n)
    denom = float(diag[0])
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
    return inv_denom, cprime


def _solve_inplace(sub, inv_denom, cprime, x):
    n = x.shape[0]
    x[0] = x[0] * inv_denom[0]
    for i in range(1, n):
        x[i] = (x[i] - sub[i] * x[i - 1]) * inv_denom[i]
    for i in range(n - 2, -1, -1):
        x[i] = x[i] - cprime[i] * x[i + 1]


def thomas_solve(sub, inv_denom, cprime, rhs):
    out = np.array(rhs, dtype=np.float64, copy=True)
    _solve_inplace(sub, inv_denom, cprime, out)
    return out


def imex_sweep(sub, inv_denom, cprime, y0, coef, source, dt):
    nsteps = coef.shape[0]
    n = y0.shape[0]
    traj = np.full((nsteps + 1, n), np.nan)
    traj[0] = y0
    diverged = -1
    for j in range(nsteps):
        with np.errstate(over="ignore", invalid="ignore"):
            row = (1.0 + dt * coef[j]) * traj[j] + dt * source[j]
            _solve_inplace(sub, inv_denom, cprime, row)
        if not np.all(np.isfinite(row)):
            diverged = j + 1
            break
        traj[j + 1] = row
    return traj, diverged


def apportion(weights, slots):
    R, S = weights.shape
    counts = np.zeros((R, S), dtype=np.int64)
    for r in range(R):
        frac = np.zeros(S)
        total = 0
        for s in range(S):
            exact = slots[r] * weights[r, s]
            snapped = math.floor(exact + 0.5)
            if abs(exact - snapped) <= 1e-9:
                exact = float(snapped)
            counts[r, s] = math.floor(exact)
            frac[s] = exact - counts[r, s]
            total += counts[r, s]
        remainder = slots[r] - total
        taken = np.zeros(S, dtype=bool)
        for _ in range(remainder):
            best, frac_best = -1, -1.0
            for s in range(S):
                if not taken[s] and frac[s] > frac_best:
                    frac_best = frac[s]
                    best = s
            if best < 0:
                break
            counts[r, best] += 1
            taken[best] = True
    return counts


def interleave(counts, slots):
    R, S = counts.shape
    seq = np.empty(int(np.sum(slots)), dtype=np.int64)
    pos = 0
    for r in range(R):
        cur = np.zeros(S, dtype=np.int64)
        for _ in range(slots[r]):
            cur += counts[r]
            best = int(np.argmax(cur))
            cur[best] -= slots[r]
            seq[pos] = best
            pos += 1
    return seq
