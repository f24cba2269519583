"""Gaussian parameterizations and Cholesky-factor rank-one maintenance.

Factors are stored upper triangular: a moment-form state keeps (mu, S) with
C = S^t S, a natural-form state keeps (h, R) with Lambda = R^t R and
h = Lambda mu. Rank-one update/downdate are implemented in-library
(Givens-style and hyperbolic rotations) since incremental factor
maintenance is the cost-critical inner operation.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import _kernels
from .errors import DimensionMismatch, DomainError, DowndateLossOfPositivity, SingularFactor


def _check_factor(R, name):
    R = np.ascontiguousarray(R, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {R.shape}")
    if R.shape[0] and np.any(np.tril(R, -1) != 0.0):
        raise DomainError(f"{name} must be upper triangular")
    if R.shape[0] and not np.all(np.diag(R) > 0.0):
        raise DomainError(f"{name} must have strictly positive diagonal")
    return R


@dataclass
class MomentParam:
    """Moment parameterization: mean mu and upper factor S with C = S^t S."""

    mu: np.ndarray
    chol_C: np.ndarray

    def __post_init__(self):
        self.mu = np.ascontiguousarray(self.mu, dtype=np.float64)
        self.chol_C = _check_factor(self.chol_C, "chol_C")
        if self.mu.shape != (self.chol_C.shape[0],):
            raise DimensionMismatch(
                f"mu has shape {self.mu.shape}, factor is {self.chol_C.shape}"
            )

    @property
    def dim(self):
        return self.mu.shape[0]

    def covariance(self):
        return self.chol_C.T @ self.chol_C


@dataclass
class NaturalParam:
    """Natural parameterization: precision mean h and upper factor R with
    Lambda = R^t R."""

    h: np.ndarray
    chol_Lambda: np.ndarray

    def __post_init__(self):
        self.h = np.ascontiguousarray(self.h, dtype=np.float64)
        self.chol_Lambda = _check_factor(self.chol_Lambda, "chol_Lambda")
        if self.h.shape != (self.chol_Lambda.shape[0],):
            raise DimensionMismatch(
                f"h has shape {self.h.shape}, factor is {self.chol_Lambda.shape}"
            )

    @property
    def dim(self):
        return self.h.shape[0]

    def precision(self):
        return self.chol_Lambda.T @ self.chol_Lambda


def chol_rank_one_update(R, v):
    """Factor of R^t R + v v^t. Never fails for a valid factor."""
    R = _check_factor(R, "R")
    v = np.ascontiguousarray(v, dtype=np.float64)
    if v.shape != (R.shape[0],):
        raise DimensionMismatch(f"v has shape {v.shape}, factor is {R.shape}")
    out = R.copy()
    _kernels.chol_update_inplace(out, v.copy())
    return out


def chol_rank_one_downdate(R, v):
    """Factor of R^t R - v v^t; DowndateLossOfPositivity if not PD."""
    R = _check_factor(R, "R")
    v = np.ascontiguousarray(v, dtype=np.float64)
    if v.shape != (R.shape[0],):
        raise DimensionMismatch(f"v has shape {v.shape}, factor is {R.shape}")
    out = R.copy()
    status = _kernels.chol_downdate_inplace(out, v.copy())
    if status != 0:
        raise DowndateLossOfPositivity(
            "rank-one downdate would lose positive definiteness"
        )
    return out


def triangular_solve(R, rhs, transpose=False):
    """Solve R x = rhs (or R^t x = rhs when transpose)."""
    R = np.ascontiguousarray(R, dtype=np.float64)
    rhs = np.ascontiguousarray(rhs, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] != R.shape[1] or rhs.shape != (R.shape[0],):
        raise DimensionMismatch(
            f"incompatible shapes {R.shape} and {rhs.shape}"
        )
    if R.shape[0] and np.min(np.abs(np.diag(R))) < 1e-300:
        raise SingularFactor("triangular factor has a vanishing diagonal entry")
    out = np.empty_like(rhs)
    if transpose:
        status = _kernels.solve_upper_t(R, rhs, out)
    else:
        status = _kernels.solve_upper(R, rhs, out)
    if status != 0:
        raise SingularFactor("triangular factor has a vanishing diagonal entry")
    return out


def gaussian_product(params):
    """Product of Gaussians in natural form: h and Lambda both add."""
    if not params:
        raise DimensionMismatch("gaussian_product requires at least one input")
    n = params[0].dim
    for p in params:
        if p.dim != n:
            raise DimensionMismatch(
                f"mixed dimensions {n} and {p.dim} in gaussian_product"
            )
    h = np.zeros(n)
    lam = np.zeros((n, n))
    for p in params:
        h += p.h
        lam += p.precision()
    return NaturalParam(h=h, chol_Lambda=_chol_upper(lam))


def _chol_upper(mat):
    try:
        lower = np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise SingularFactor(f"matrix is not positive definite: {exc}") from exc
    return np.ascontiguousarray(lower.T)


def to_moment(p):
    """Convert natural (h, R) to moment (mu, S)."""
    R = p.chol_Lambda
    # mu = Lambda^{-1} h via two triangular solves
    mu = solve_triangular(R, solve_triangular(R, p.h, trans=1), trans=0)
    rinv = solve_triangular(R, np.eye(p.dim), trans=0)
    cov = rinv @ rinv.T
    cov = (cov + cov.T) / 2.0
    return MomentParam(mu=mu, chol_C=_chol_upper(cov))


def to_natural(p):
    """Convert moment (mu, S) to natural (h, R)."""
    S = p.chol_C
    sinv = solve_triangular(S, np.eye(p.dim), trans=0)
    lam = sinv @ sinv.T
    lam = (lam + lam.T) / 2.0
    R = _chol_upper(lam)
    h = solve_triangular(S, solve_triangular(S, p.mu, trans=1), trans=0)
    return NaturalParam(h=h, chol_Lambda=R)


def marginal_variances(factor, from_precision):
    """diag(C) from either factor orientation.

    from_precision: factor is R with Lambda = R^t R, so diag(C) is the
    row-wise squared norms of R^{-1}; otherwise factor is S with C = S^t S
    and diag(C) is the column-wise squared norms of S.
    """
    if from_precision:
        if np.min(np.abs(np.diag(factor))) < 1e-300:
            raise SingularFactor("precision factor is singular")
        rinv = solve_triangular(factor, np.eye(factor.shape[0]), trans=0)
        return np.sum(rinv * rinv, axis=1)
    return np.sum(factor * factor, axis=0)
