"""Reference methods the posterior approximation is compared against:
penalized maximum a posteriori via projected limited-memory quasi-Newton,
a Gaussian curvature approximation at the MAP point (exact or lagged
weights), and an adaptive random-walk Metropolis-Hastings sampler.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import gaussian_core as gc
from .errors import (
    HessianAssemblyFailure,
    InfeasiblePoint,
    InitializationError,
    NoFeasibleStart,
)
from .problem_model import log_posterior

MAP_FLOOR = 1e-12
DENSE_COV_LIMIT = 512


@dataclass(frozen=True)
class SmoothedObjective:
    """Negative log-posterior with the kink of the |.|-prior rounded off:
    each prior term |L_i^t x| becomes sqrt((L_i^t x)^2 + epsilon^2)."""

    problem: object
    epsilon: float

    def __post_init__(self):
        if not (self.epsilon > 0.0 and math.isfinite(self.epsilon)):
            raise InitializationError("smoothing epsilon must be positive")


def default_epsilon(problem):
    """Default smoothing: 1e-6 relative to the count scale of the data."""
    scale = float(np.max(problem.y)) if problem.y.size else 1.0
    return 1e-6 * max(1.0, scale)


def objective_value_grad(obj, x):
    """Value and gradient of the smoothed objective.

    Raises InfeasiblePoint when some row with a positive count has a
    nonpositive rate (the value there is +inf and no gradient exists).
    """
    prob = obj.problem
    x = np.asarray(x, dtype=np.float64)
    rates = prob.A @ x + prob.r
    pos = prob.y > 0
    if np.any(rates[pos] <= 0.0):
        raise InfeasiblePoint("nonpositive rate at a row with positive count")
    value = float(np.sum(rates) - np.sum(prob.y[pos] * np.log(rates[pos])))
    ratio = np.zeros_like(rates)
    ratio[pos] = prob.y[pos] / rates[pos]
    grad = prob.A.T @ (1.0 - ratio)
    lx = prob.L @ x
    smooth = np.sqrt(lx * lx + obj.epsilon**2)
    value += prob.alpha * float(np.sum(smooth))
    grad += prob.alpha * (prob.L.T @ (lx / smooth))
    return value, grad


@dataclass
class MAPResult:
    x: np.ndarray
    objective: float
    converged: bool
    line_search_warning: bool
    n_iter: int
    objective_trace: list[float] = field(repr=False, default_factory=list)


def minimize_projected(
    fun_grad, x0, max_iter=500, floor=MAP_FLOOR, tol=1e-6, memory=10
):
    """Limited-memory quasi-Newton descent over the box {x >= floor}.

    Each trial point is projected onto the box before evaluation, and the
    backtracking (Armijo) test uses the actual projected displacement.
    Stops once the projected gradient norm falls below tol * (1 + |f|).
    fun_grad may raise InfeasiblePoint; such trial points are treated as
    +inf. On a failed line search the best iterate found so far is
    returned with the warning flag set.
    """
    x = np.maximum(np.asarray(x0, dtype=np.float64), floor)
    f, g = fun_grad(x)
    trace = [f]
    s_hist: deque = deque(maxlen=memory)
    y_hist: deque = deque(maxlen=memory)
    warning = False
    converged = False
    it = 0

    def backtrack(d):
        step = 1.0
        for _ in range(60):
            xn = np.maximum(x + step * d, floor)
            move = float(g @ (xn - x))
            if move < 0.0:
                try:
                    fn, gn = fun_grad(xn)
                except InfeasiblePoint:
                    step *= 0.5
                    continue
                if fn <= f + 1e-4 * move:
                    return xn, fn, gn
            step *= 0.5
        return None

    for it in range(1, max_iter + 1):
        pg = np.where(x > floor, g, np.minimum(g, 0.0))
        if np.linalg.norm(pg) <= tol * (1.0 + abs(f)):
            converged = True
            it -= 1
            break
        # quasi-Newton model on the free variables only: components held
        # at the floor by a positive gradient must not steer the step
        active = (x <= floor) & (g > 0.0)
        d = _two_loop_direction(pg, s_hist, y_hist)
        d[active] = 0.0
        if float(pg @ d) >= 0.0:  # stale curvature pairs: restart steepest
            s_hist.clear()
            y_hist.clear()
            d = -pg
        accepted = backtrack(d)
        if accepted is None and s_hist:
            # the curved model failed at a kink or a changing active set;
            # fall back to a clean projected-gradient step once
            s_hist.clear()
            y_hist.clear()
            accepted = backtrack(-pg)
        if accepted is None:
            warning = True
            break
        xn, fn, gn = accepted
        s, yk = xn - x, gn - g
        sy = float(s @ yk)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yk):
            s_hist.append(s)
            y_hist.append(yk)
        x, f, g = xn, fn, gn
        trace.append(f)
    return MAPResult(
        x=x,
        objective=f,
        converged=converged,
        line_search_warning=warning,
        n_iter=it,
        objective_trace=trace,
    )


def _two_loop_direction(g, s_hist, y_hist):
    """Standard two-loop recursion for the quasi-Newton direction."""
    if not s_hist:
        return -g
    q = g.copy()
    alphas = []
    for s, yk in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / float(yk @ s)
        a = rho * float(s @ q)
        alphas.append((rho, a))
        q -= a * yk
    s, yk = s_hist[-1], y_hist[-1]
    q *= float(s @ yk) / float(yk @ yk)
    for (s, yk), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * float(yk @ q)
        q += (a - b) * s
    return -q


def solve_map(obj, x0, max_iter=500, tol=1e-6):
    """MAP point of the smoothed objective over the nonnegative orthant."""
    return minimize_projected(
        lambda x: objective_value_grad(obj, x), x0, max_iter=max_iter, tol=tol
    )


@dataclass
class LaplaceResult:
    param: gc.NaturalParam
    ridge: float  # 0.0 when the curvature was already positive definite


def laplace_approximation(obj, x_map, variant="exact_hessian"):
    """Gaussian fit at x_map with the objective's curvature as precision.

    variant "exact_hessian" uses the true second derivative of the
    smoothed prior term; "lagged" freezes the smoothing weights at x_map
    (fixed-weight approximation), giving a heavier prior block. If the
    assembled matrix is not positive definite a small ridge proportional
    to its trace is added once and reported in the result.
    """
    if variant not in ("exact_hessian", "lagged"):
        raise HessianAssemblyFailure(f"unknown variant {variant!r}")
    prob = obj.problem
    x_map = np.asarray(x_map, dtype=np.float64)
    rates = prob.A @ x_map + prob.r
    pos = prob.y > 0
    if np.any(rates[pos] <= 0.0):
        raise InfeasiblePoint("x_map has a nonpositive rate at a counted row")
    weights = np.zeros_like(rates)
    weights[pos] = prob.y[pos] / rates[pos] ** 2
    H = (prob.A.T * weights) @ prob.A
    lx = prob.L @ x_map
    sq = lx * lx + obj.epsilon**2
    if variant == "exact_hessian":
        pw = prob.alpha * obj.epsilon**2 * sq ** (-1.5)
    else:
        pw = prob.alpha * sq ** (-0.5)
    H += (prob.L.T * pw) @ prob.L
    H = 0.5 * (H + H.T)
    if not np.all(np.isfinite(H)):
        raise HessianAssemblyFailure("curvature matrix has non-finite entries")
    n = H.shape[0]
    ridge = 0.0
    try:
        R = np.linalg.cholesky(H).T
    except np.linalg.LinAlgError:
        ridge = 1e-10 * float(np.trace(H)) / n
        try:
            R = np.linalg.cholesky(H + ridge * np.eye(n)).T
        except np.linalg.LinAlgError as exc:
            raise HessianAssemblyFailure(
                "curvature not positive definite even with ridge"
            ) from exc
    precision = R.T @ R  # symmetrized via the factor itself
    return LaplaceResult(
        param=gc.NaturalParam(h=precision @ x_map, chol_Lambda=np.ascontiguousarray(R)),
        ridge=ridge,
    )


@dataclass(frozen=True)
class MCMCConfig:
    chain_length: int
    burn_in: int
    target_acceptance: float = 0.23
    step_adapt_interval: int = 500
    seed: int = 0
    initial_step: float = 0.1

    def __post_init__(self):
        if self.chain_length <= 0 or not 0 <= self.burn_in < self.chain_length:
            raise InitializationError("need 0 <= burn_in < chain_length")
        if not 0.0 < self.target_acceptance < 1.0:
            raise InitializationError("target acceptance must sit in (0, 1)")
        if self.step_adapt_interval < 1:
            raise InitializationError("adaptation interval must be >= 1")
        if not self.initial_step > 0.0:
            raise InitializationError("initial step must be positive")


@dataclass
class RWMHResult:
    mean: np.ndarray
    covariance: np.ndarray | None  # dense only for small dimensions
    variances: np.ndarray
    acceptance_rate: float
    step_size: float


def run_rwmh_core(log_density, x0, config):
    """Adaptive random-walk Metropolis-Hastings with isotropic Gaussian
    proposals.

    The step size is rescaled multiplicatively every adaptation interval
    during burn-in, pushing the windowed acceptance rate toward the
    target, and is frozen afterwards. Infeasible proposals (density -inf)
    are rejected through the acceptance test. Returns moments of the
    post-burn-in samples.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    n = x.size
    lp = log_density(x)
    if not math.isfinite(lp):
        raise NoFeasibleStart("starting point has zero posterior density")
    rng = np.random.default_rng(config.seed)
    step = config.initial_step
    keep = config.chain_length - config.burn_in
    dense = n <= DENSE_COV_LIMIT
    mean_acc = np.zeros(n)
    cov_acc = np.zeros((n, n)) if dense else None
    sq_acc = np.zeros(n)
    block = np.empty((config.step_adapt_interval, n))
    block_fill = 0
    accepted_total = 0
    accepted_window = 0
    for k in range(config.chain_length):
        prop = x + step * rng.standard_normal(n)
        lp_prop = log_density(prop)
        if lp_prop - lp >= math.log(rng.uniform()):
            x, lp = prop, lp_prop
            accepted_window += 1
            if k >= config.burn_in:
                accepted_total += 1
        in_burn = k < config.burn_in
        if in_burn and (k + 1) % config.step_adapt_interval == 0:
            rate = accepted_window / config.step_adapt_interval
            step *= math.exp(rate - config.target_acceptance)
            accepted_window = 0
        if not in_burn:
            block[block_fill] = x
            block_fill += 1
            if block_fill == block.shape[0]:
                _flush(block, block_fill, mean_acc, sq_acc, cov_acc)
                block_fill = 0
    if block_fill:
        _flush(block, block_fill, mean_acc, sq_acc, cov_acc)
    mean = mean_acc / keep
    variances = sq_acc / keep - mean**2
    cov = None
    if dense:
        cov = cov_acc / keep - np.outer(mean, mean)
        variances = np.diag(cov).copy()
    return RWMHResult(
        mean=mean,
        covariance=cov,
        variances=np.maximum(variances, 0.0),
        acceptance_rate=accepted_total / keep,
        step_size=step,
    )


def _flush(block, count, mean_acc, sq_acc, cov_acc):
    xs = block[:count]
    mean_acc += xs.sum(axis=0)
    sq_acc += (xs * xs).sum(axis=0)
    if cov_acc is not None:
        cov_acc += xs.T @ xs


def run_rwmh(problem, config, x0):
    """Sample the count-model posterior of `problem` starting from x0."""
    return run_rwmh_core(lambda x: log_posterior(problem, x), x0, config)
