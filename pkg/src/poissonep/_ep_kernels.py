"""Fused single-site EP update for the natural parameterization.

One interpreter round-trip per site visit starts to dominate wall time
at small-to-moderate n, which would distort the O(n^2) per-update cost
of the inner loop. For double-exponential sites — the high-multiplicity
kind, one per difference-operator row — the whole visit (two triangular
solves, cavity algebra, tilted moments, rank-one factor maintenance,
h shift) runs as a single compiled call.
"""

import math

import numpy as np
from numba import njit

from ._kernels import (
    chol_downdate_inplace,
    chol_update_inplace,
    solve_upper,
    solve_upper_t,
)
from .site_laplace import _moments_core

CAVITY_GUARD = 1e-12
MIN_TILTED_VARIANCE = 1e-300
DOWNDATE_MARGIN = 1e-10

OK = 0
SKIP_CAVITY = 1
SKIP_TILT = 2
SKIP_DOWNDATE = 3
FAIL_SINGULAR = 4
FAIL_CORRUPT = 5


@njit(cache=True)
def natural_laplace_update(R, h, u, lam1, lam2, alpha):
    """Visit one Laplace site in natural form; mutates R and h on success.

    Returns (status, lam1_new, lam2_new); on any non-OK status the state
    is untouched and the old lambdas are echoed back.
    """
    n = u.shape[0]
    w = np.empty(n)
    x = np.empty(n)
    if solve_upper_t(R, u, w) != 0:
        return FAIL_SINGULAR, lam1, lam2
    if solve_upper(R, w, x) != 0:
        return FAIL_SINGULAR, lam1, lam2
    c = 0.0
    um = 0.0
    for k in range(n):
        c += w[k] * w[k]
        um += x[k] * h[k]
    if c <= 0.0:
        return SKIP_CAVITY, lam1, lam2
    denom = 1.0 - c * lam2
    if denom <= CAVITY_GUARD:
        return SKIP_CAVITY, lam1, lam2
    cav_var = c / denom
    cav_mean = (um - c * lam1) / denom
    s_bar, c_s = _moments_core(cav_mean, cav_var, alpha)
    if not (c_s >= MIN_TILTED_VARIANCE and np.isfinite(c_s) and np.isfinite(s_bar)):
        return SKIP_TILT, lam1, lam2
    lam1_new = s_bar / c_s - cav_mean / cav_var
    lam2_new = 1.0 / c_s - 1.0 / cav_var
    if not (np.isfinite(lam1_new) and np.isfinite(lam2_new)):
        return SKIP_TILT, lam1, lam2
    dl2 = lam2_new - lam2
    if dl2 >= 0.0:
        scale = math.sqrt(dl2)
        for k in range(n):
            w[k] = scale * u[k]
        chol_update_inplace(R, w)
    else:
        # Lambda + dl2 u u^t stays PD iff 1 + dl2 u^t Lambda^{-1} u > 0,
        # and c is exactly that quadratic form: feasibility costs nothing
        if 1.0 + dl2 * c <= DOWNDATE_MARGIN:
            return SKIP_DOWNDATE, lam1, lam2
        scale = math.sqrt(-dl2)
        for k in range(n):
            w[k] = scale * u[k]
        if chol_downdate_inplace(R, w) != 0:
            return FAIL_CORRUPT, lam1, lam2
    dl1 = lam1_new - lam1
    for k in range(n):
        h[k] += dl1 * u[k]
    return OK, lam1_new, lam2_new
