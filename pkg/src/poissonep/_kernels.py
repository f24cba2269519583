"""njit-compiled linear-algebra kernels for the EP hot path.

All kernels mutate their arguments in place where documented and return
integer status codes instead of raising (numba-friendly); the public
wrappers in gaussian_core translate statuses into typed exceptions.

Status codes: 0 ok, 1 singular factor, 2 loss of positivity.
"""

import numpy as np
from numba import njit

DIAG_TINY = 1e-300
DOWNDATE_GUARD = 1e-14


@njit(cache=True)
def solve_upper(R, b, out):
    """Solve R x = b for upper-triangular R (backward substitution)."""
    n = R.shape[0]
    for i in range(n - 1, -1, -1):
        d = R[i, i]
        if abs(d) < DIAG_TINY:
            return 1
        acc = b[i]
        for j in range(i + 1, n):
            acc -= R[i, j] * out[j]
        out[i] = acc / d
    return 0


@njit(cache=True)
def solve_upper_t(R, b, out):
    """Solve R^t x = b for upper-triangular R (forward substitution)."""
    n = R.shape[0]
    for i in range(n):
        d = R[i, i]
        if abs(d) < DIAG_TINY:
            return 1
        acc = b[i]
        for j in range(i):
            acc -= R[j, i] * out[j]
        out[i] = acc / d
    return 0


@njit(cache=True)
def chol_update_inplace(R, v):
    """R <- factor of R^t R + v v^t (v is destroyed). Always succeeds."""
    n = R.shape[0]
    for k in range(n):
        rkk = R[k, k]
        vk = v[k]
        r = np.hypot(rkk, vk)
        c = r / rkk
        s = vk / rkk
        R[k, k] = r
        for j in range(k + 1, n):
            R[k, j] = (R[k, j] + s * v[j]) / c
            v[j] = c * v[j] - s * R[k, j]
    return 0


@njit(cache=True)
def chol_downdate_inplace(R, v):
    """R <- factor of R^t R - v v^t (v is destroyed), or status 2."""
    n = R.shape[0]
    for k in range(n):
        rkk = R[k, k]
        alpha = v[k] / rkk
        rad = (1.0 - alpha) * (1.0 + alpha)
        if rad <= DOWNDATE_GUARD:
            return 2
        c = np.sqrt(rad)
        R[k, k] = rkk * c
        for j in range(k + 1, n):
            R[k, j] = (R[k, j] - alpha * v[j]) / c
            v[j] = c * v[j] - alpha * R[k, j]
    return 0
