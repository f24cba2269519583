"""Moment-matching engine: cavity extraction, site visits, sweep loop.

The approximating Gaussian is maintained through one of two equivalent
parameterizations: natural form (h, R) with precision R^t R, or moment
form (mu, S) with covariance S^t S. Each site i contributes a rank-one
term lambda2_i u_i u_i^t to the precision and lambda1_i u_i to h; a site
visit removes that contribution analytically (no factor downdating —
the cavity moments come from the current marginal and the stored
lambdas), matches first and second moments of the tilted distribution
along u_i, and applies the lambda differences as a rank-one factor
update or downdate plus a shift of h (or mu).

Failed visits (cavity guard, vanishing tilted variance, infeasible
downdate) skip the site and leave the state untouched; skip counts are
reported per reason.
"""

import json
import math
import pathlib
from dataclasses import dataclass, field

import numpy as np

from . import _ep_kernels
from . import gaussian_core as gc
from .errors import (
    InitializationError,
    NegativeCavityVariance,
    PoissonEPError,
    SingularFactor,
    SiteSkipped,
)
from .site_laplace import LaplaceSiteInput, laplace_site_moments
from .site_poisson import PoissonSiteInput, TiltedMoments, poisson_site_moments

CAVITY_GUARD = 1e-12
MIN_TILTED_VARIANCE = 1e-300
DOWNDATE_MARGIN = 1e-10
HPD_Z_95 = 1.959964


# --------------------------------------------------------------------------
# site kinds and the tilted-moment dispatch


@dataclass(frozen=True)
class PoissonKind:
    """Count observation y with background r and lower support bound b."""

    y: int
    r: float
    b: float


@dataclass(frozen=True)
class LaplaceKind:
    """Double-exponential prior factor of scale alpha."""

    alpha: float


@dataclass(frozen=True)
class GaussianTestKind:
    """Exact-Gaussian pseudo-site N(s | m0, v0); the tilt is conjugate,
    so moment matching is exact — harness use only."""

    m0: float
    v0: float


@dataclass(frozen=True)
class NoopTestKind:
    """Pseudo-site whose tilt equals the cavity; a visit must not move
    the state — harness use only."""


def _poisson_tilt(kind, mean, var):
    return poisson_site_moments(
        PoissonSiteInput(m=mean, sigma2=var, y=kind.y, r=kind.r, b=kind.b)
    )


def _laplace_tilt(kind, mean, var):
    return laplace_site_moments(LaplaceSiteInput(mu=mean, sigma2=var, alpha=kind.alpha))


def _gaussian_test_tilt(kind, mean, var):
    c_s = 1.0 / (1.0 / var + 1.0 / kind.v0)
    return TiltedMoments(s_bar=c_s * (mean / var + kind.m0 / kind.v0), c_s=c_s)


def _noop_tilt(kind, mean, var):
    return TiltedMoments(s_bar=mean, c_s=var)


TILT_REGISTRY = {
    PoissonKind: _poisson_tilt,
    LaplaceKind: _laplace_tilt,
    GaussianTestKind: _gaussian_test_tilt,
    NoopTestKind: _noop_tilt,
}


# --------------------------------------------------------------------------
# state


@dataclass
class SiteRecord:
    u: np.ndarray
    kind: object
    lambda1: float = 0.0
    lambda2: float = 0.0

    def __post_init__(self):
        self.u = np.ascontiguousarray(self.u, dtype=np.float64)
        if self.u.ndim != 1:
            raise InitializationError(f"site direction must be 1-d, got {self.u.shape}")


@dataclass
class EPState:
    param: object  # NaturalParam or MomentParam
    sites: list
    sweep_count: int = 0
    rng_seed: int = 0


@dataclass(frozen=True)
class EPConfig:
    parameterization: str = "natural"
    max_sweeps: int = 4
    tol: float = 1e-8
    tau: float = 1e-2  # base precision Lambda_0 = tau I
    seed: int = 0
    cov_delta_cap: int = 128  # track covariance deltas only when n <= cap

    def __post_init__(self):
        if self.parameterization not in ("natural", "moment"):
            raise InitializationError(
                f"parameterization must be 'natural' or 'moment', "
                f"got {self.parameterization!r}"
            )
        if self.max_sweeps < 1:
            raise InitializationError("max_sweeps must be >= 1")
        if not self.tau > 0:
            raise InitializationError("tau must be positive")
        if not self.tol >= 0:
            raise InitializationError("tol must be nonnegative")


@dataclass
class ConvergenceReport:
    mu_deltas: list
    cov_deltas: list
    relative_change_last: float
    skipped: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PosteriorSummary:
    mean: np.ndarray
    marginal_variances: np.ndarray
    band_lower: np.ndarray
    band_upper: np.ndarray


def init_state(n, sites, config):
    """Fresh state: base precision tau I, zero mean, all lambdas zero."""
    for s in sites:
        if s.u.shape != (n,):
            raise InitializationError(
                f"site direction has shape {s.u.shape}, state dimension is {n}"
            )
        s.lambda1 = 0.0
        s.lambda2 = 0.0
    if config.parameterization == "natural":
        param = gc.NaturalParam(
            h=np.zeros(n), chol_Lambda=math.sqrt(config.tau) * np.eye(n)
        )
    else:
        param = gc.MomentParam(
            mu=np.zeros(n), chol_C=np.eye(n) / math.sqrt(config.tau)
        )
    return EPState(param=param, sites=list(sites), sweep_count=0, rng_seed=config.seed)


def build_sites(problem):
    """One Poisson site per forward-map row, one Laplace site per prior row."""
    A = np.ascontiguousarray(problem.A, dtype=np.float64)
    L = np.ascontiguousarray(problem.L, dtype=np.float64)
    y = np.asarray(problem.y)
    r = np.asarray(problem.r, dtype=np.float64)
    if A.ndim != 2 or L.ndim != 2 or A.shape[1] != L.shape[1]:
        raise InitializationError(
            f"forward map and prior operator disagree: {A.shape} vs {L.shape}"
        )
    if y.shape != (A.shape[0],) or r.shape != (A.shape[0],):
        raise InitializationError(
            f"data vectors ({y.shape}, {r.shape}) do not match {A.shape[0]} rows"
        )
    constraint = str(problem.constraint)
    if constraint not in ("C2", "C3"):
        raise InitializationError(f"unknown constraint {constraint!r}")
    sites = []
    for i in range(A.shape[0]):
        b = 0.0 if constraint == "C2" else -float(r[i])
        sites.append(
            SiteRecord(u=A[i].copy(), kind=PoissonKind(y=int(y[i]), r=float(r[i]), b=b))
        )
    alpha = float(problem.alpha)
    for j in range(L.shape[0]):
        sites.append(SiteRecord(u=L[j].copy(), kind=LaplaceKind(alpha=alpha)))
    return sites


# --------------------------------------------------------------------------
# cavity and site visit


def _marginal_along(param, u):
    """(c, m) = (u^t C u, u^t mu) for either parameterization."""
    if isinstance(param, gc.NaturalParam):
        R = param.chol_Lambda
        w = gc.triangular_solve(R, u, transpose=True)
        x = gc.triangular_solve(R, w)
        return float(w @ w), float(x @ param.h)
    t = param.chol_C @ u
    return float(t @ t), float(param.mu @ u)


def cavity_marginal(state, site_index):
    """Cavity mean and variance along site i, without factor downdating."""
    site = state.sites[site_index]
    c, marg_mean = _marginal_along(state.param, site.u)
    if c <= 0.0:
        raise NegativeCavityVariance(
            f"site {site_index}: degenerate direction (u^t C u = {c})"
        )
    denom = 1.0 - c * site.lambda2
    if denom <= CAVITY_GUARD:
        raise NegativeCavityVariance(
            f"site {site_index}: 1 - c*lambda2 = {denom} below guard"
        )
    return (marg_mean - c * site.lambda1) / denom, c / denom


def site_update(state, site_index):
    """Visit one site: moment-match the tilted distribution along u.

    Mutates state in place and returns it. Raises SiteSkipped (state
    untouched) when the cavity guard, the tilted-moment evaluation, or
    downdate feasibility rules the visit out.
    """
    site = state.sites[site_index]
    param = state.param
    natural = isinstance(param, gc.NaturalParam)

    if natural and isinstance(site.kind, LaplaceKind):
        status, l1, l2 = _ep_kernels.natural_laplace_update(
            param.chol_Lambda,
            param.h,
            site.u,
            site.lambda1,
            site.lambda2,
            site.kind.alpha,
        )
        if status == _ep_kernels.OK:
            site.lambda1 = l1
            site.lambda2 = l2
            return state
        if status == _ep_kernels.SKIP_CAVITY:
            raise SiteSkipped("cavity-variance")
        if status == _ep_kernels.SKIP_TILT:
            raise SiteSkipped("tilted-moments")
        if status == _ep_kernels.SKIP_DOWNDATE:
            raise SiteSkipped("downdate-infeasible")
        raise SingularFactor(f"site {site_index}: factor update failed irrecoverably")

    u = site.u
    if not u.any():
        raise SiteSkipped("zero-direction")
    c, marg_mean = _marginal_along(param, u)
    if c <= 0.0:
        raise SiteSkipped("cavity-variance")
    denom = 1.0 - c * site.lambda2
    if denom <= CAVITY_GUARD:
        raise SiteSkipped("cavity-variance")
    cav_var = c / denom
    cav_mean = (marg_mean - c * site.lambda1) / denom

    try:
        tilt_fn = TILT_REGISTRY[type(site.kind)]
    except KeyError:
        raise InitializationError(f"unknown site kind {type(site.kind).__name__}")
    try:
        tm = tilt_fn(site.kind, cav_mean, cav_var)
    except PoissonEPError as exc:
        raise SiteSkipped(f"tilted-moments ({type(exc).__name__})") from exc
    if not (
        tm.c_s >= MIN_TILTED_VARIANCE
        and math.isfinite(tm.c_s)
        and math.isfinite(tm.s_bar)
    ):
        raise SiteSkipped("tilted-moments")

    lam1_new = tm.s_bar / tm.c_s - cav_mean / cav_var
    lam2_new = 1.0 / tm.c_s - 1.0 / cav_var
    if not (math.isfinite(lam1_new) and math.isfinite(lam2_new)):
        raise SiteSkipped("tilted-moments")

    if natural:
        dl2 = lam2_new - site.lambda2
        if dl2 >= 0.0:
            param.chol_Lambda = gc.chol_rank_one_update(
                param.chol_Lambda, math.sqrt(dl2) * u
            )
        else:
            if 1.0 + dl2 * c <= DOWNDATE_MARGIN:
                raise SiteSkipped("downdate-infeasible")
            param.chol_Lambda = gc.chol_rank_one_downdate(
                param.chol_Lambda, math.sqrt(-dl2) * u
            )
        param.h = param.h + (lam1_new - site.lambda1) * u
    else:
        g = param.chol_C.T @ (param.chol_C @ u)  # C u
        gamma = (tm.c_s - c) / (c * c)
        if gamma >= 0.0:
            param.chol_C = gc.chol_rank_one_update(
                param.chol_C, math.sqrt(gamma) * g
            )
        else:
            # C + gamma g g^t has marginal c_s > 0 along u, so the
            # downdate is always feasible in exact arithmetic
            param.chol_C = gc.chol_rank_one_downdate(
                param.chol_C, math.sqrt(-gamma) * g
            )
        param.mu = param.mu + ((tm.s_bar - marg_mean) / c) * g

    site.lambda1 = lam1_new
    site.lambda2 = lam2_new
    return state


# --------------------------------------------------------------------------
# sweep loop


def _current_mean(param):
    if isinstance(param, gc.NaturalParam):
        R = param.chol_Lambda
        return gc.triangular_solve(R, gc.triangular_solve(R, param.h, transpose=True))
    return param.mu.copy()


def _current_cov(param):
    if isinstance(param, gc.NaturalParam):
        rinv = np.linalg.solve(param.chol_Lambda, np.eye(param.dim))
        return rinv @ rinv.T
    return param.chol_C.T @ param.chol_C


def run_state_sweeps(state, config):
    """Sweep an existing state; returns (state, ConvergenceReport)."""
    m = len(state.sites)
    if m == 0:
        return state, ConvergenceReport([], [], 0.0)
    n = state.param.dim
    active = np.array([bool(s.u.any()) for s in state.sites])
    n_inactive = int(m - active.sum())
    track_cov = n <= config.cov_delta_cap
    rng = np.random.default_rng(config.seed)
    skipped = {}
    if n_inactive:
        skipped["zero-direction"] = 0
    mu_hist = []
    cov_hist = []
    prev_mu = _current_mean(state.param)
    rel_change = math.inf
    for _ in range(config.max_sweeps):
        perm = rng.permutation(m)
        for i in perm:
            if not active[i]:
                skipped["zero-direction"] += 1
                continue
            try:
                site_update(state, int(i))
            except SiteSkipped as exc:
                key = str(exc)
                skipped[key] = skipped.get(key, 0) + 1
        state.sweep_count += 1
        mu = _current_mean(state.param)
        mu_hist.append(mu)
        if track_cov:
            cov_hist.append(_current_cov(state.param))
        rel_change = float(
            np.linalg.norm(mu - prev_mu) / max(np.linalg.norm(mu), 1e-300)
        )
        prev_mu = mu
        if rel_change < config.tol:
            break
    mu_star = mu_hist[-1]
    mu_deltas = [float(np.linalg.norm(mu_k - mu_star)) for mu_k in mu_hist]
    cov_deltas = []
    if track_cov:
        cov_star = cov_hist[-1]
        cov_deltas = [
            float(np.linalg.norm(cov_k - cov_star, 2)) for cov_k in cov_hist
        ]
    return state, ConvergenceReport(mu_deltas, cov_deltas, rel_change, skipped)


def run_sweeps(problem, config=None):
    """Build sites from the problem, initialize, and sweep."""
    if config is None:
        config = EPConfig()
    sites = build_sites(problem)
    state = init_state(int(np.asarray(problem.A).shape[1]), sites, config)
    return run_state_sweeps(state, config)


# --------------------------------------------------------------------------
# summaries and diagnostics


def posterior_summary(state):
    """Mean, marginal variances, and the 0.95 HPD band per coordinate."""
    param = state.param
    if isinstance(param, gc.NaturalParam):
        mean = _current_mean(param)
        var = gc.marginal_variances(param.chol_Lambda, from_precision=True)
    else:
        mean = param.mu.copy()
        var = gc.marginal_variances(param.chol_C, from_precision=False)
    half = HPD_Z_95 * np.sqrt(var)
    return PosteriorSummary(
        mean=mean,
        marginal_variances=var,
        band_lower=mean - half,
        band_upper=mean + half,
    )


def lambda_reconstruction_error(state, tau):
    """Max-norm residuals of the additive-state identity.

    The precision must equal tau I plus the lambda2-weighted outer
    products, and h the lambda1-weighted sum of directions, no matter
    how many visits have run. Dense O(n^2 m) check — diagnostics only.
    """
    param = state.param
    if isinstance(param, gc.NaturalParam):
        lam = param.precision()
        hvec = param.h
    else:
        nat = gc.to_natural(param)
        lam = nat.precision()
        hvec = nat.h
    n = param.dim
    lam_ref = tau * np.eye(n)
    h_ref = np.zeros(n)
    for s in state.sites:
        lam_ref += s.lambda2 * np.outer(s.u, s.u)
        h_ref += s.lambda1 * s.u
    return (
        float(np.max(np.abs(lam - lam_ref))),
        float(np.max(np.abs(hvec - h_ref))),
    )


# --------------------------------------------------------------------------
# checkpointing


def save_checkpoint(state, path):
    """Plain-JSON snapshot: factor row-major, h or mu, lambdas, counters."""
    param = state.param
    natural = isinstance(param, gc.NaturalParam)
    factor = param.chol_Lambda if natural else param.chol_C
    vector = param.h if natural else param.mu
    payload = {
        "n": param.dim,
        "parameterization": "natural" if natural else "moment",
        "factor": [float(v) for v in np.asarray(factor).reshape(-1)],
        "vector": [float(v) for v in vector],
        "lambda1": [s.lambda1 for s in state.sites],
        "lambda2": [s.lambda2 for s in state.sites],
        "seed": state.rng_seed,
        "sweep_count": state.sweep_count,
    }
    pathlib.Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_checkpoint(path, sites):
    """Rebuild a state from save_checkpoint output.

    Site directions are not stored in the checkpoint; the caller passes
    site records (e.g. from build_sites) whose lambdas get overwritten.
    """
    payload = json.loads(pathlib.Path(path).read_text())
    n = int(payload["n"])
    factor = np.array(payload["factor"], dtype=np.float64).reshape(n, n)
    vector = np.array(payload["vector"], dtype=np.float64)
    lam1 = payload["lambda1"]
    lam2 = payload["lambda2"]
    if len(sites) != len(lam1):
        raise InitializationError(
            f"checkpoint has {len(lam1)} sites, caller supplied {len(sites)}"
        )
    for s, l1, l2 in zip(sites, lam1, lam2):
        s.lambda1 = float(l1)
        s.lambda2 = float(l2)
    if payload["parameterization"] == "natural":
        param = gc.NaturalParam(h=vector, chol_Lambda=factor)
    else:
        param = gc.MomentParam(mu=vector, chol_C=factor)
    return EPState(
        param=param,
        sites=list(sites),
        sweep_count=int(payload["sweep_count"]),
        rng_seed=int(payload["seed"]),
    )
