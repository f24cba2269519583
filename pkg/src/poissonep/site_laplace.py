"""Tilted moments for a double-exponential (sparsity) site.

The tilted density along the site direction is

    p(s) ∝ e^{-alpha |s|} N(s | mu, sigma2),

a two-piece mixture of truncated Gaussians joined at the kink. With
h = |mu|/sigma the two half-line pieces are governed by

    eta_minus = alpha sigma - h      (same-sign half as mu)
    eta_plus  = alpha sigma + h      (opposite half)

and the mass ratio between the halves is beta = m(eta_plus)/m(eta_minus)
with m the Mills ratio — the exponential prefactors of the two halves
cancel exactly against the Gaussian density ratio.

The mean is evaluated through the identity

    s_bar = sign(mu) * sigma * (g(eta_plus) - g(eta_minus)) / (m_- + m_+),

g(eta) = eta * m(eta), which removes the catastrophic subtraction of the
naive mu - alpha sigma2 (1-beta)/(1+beta) form; deep in the two-sided
tail regime the g-gap itself is summed by a series whose every term is
proportional to h, so the result stays relatively accurate even when
the posterior shrinks |s_bar| to ~1e-10 of |mu|. The variance uses the
two-component mixture decomposition, which has no subtractions at all.

The arithmetic lives in njit cores so the EP engine's fused update
kernel can call it without crossing back into the interpreter.
"""

import math
from dataclasses import dataclass

from numba import njit

from . import special_functions as sf
from .errors import DomainError, TailRegimeUnavailable
from .site_poisson import TiltedMoments

# below this the asymptotic tail series for the g-gap has not converged
# to useful accuracy
SERIES_MIN_ETA = 7.0
# above this the series route is both valid and preferred
SERIES_SWITCH_ETA = 13.0
# below this eta the opposite half-line's mass ratio is ~e^{-eta^2/2},
# far under one ulp, and e^{eta^2/2}-sized Mills ratios are about to
# overflow the product eta * m(eta): treat the site as one-sided
ONE_SIDED_ETA = -37.0


@dataclass(frozen=True)
class LaplaceSiteInput:
    """Cavity marginal (mu, sigma2) and prior scale alpha."""

    mu: float
    sigma2: float
    alpha: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


def _half_etas(inp):
    sigma = math.sqrt(inp.sigma2)
    h = abs(inp.mu) / sigma
    a = inp.alpha * sigma
    return a, h, sigma


def _series_g(eta):
    g, _, _ = sf._tail_series_triplet(eta, 40)
    return g


def tail_beta(inp, method="auto"):
    """Mass ratio beta in [0, 1] between the two half-line components.

    method 'direct' uses the scaled-complement Mills ratios; 'series'
    uses the asymptotic tail expansion (requires eta_minus >= 7, raises
    TailRegimeUnavailable below); 'auto' switches to the series deep in
    the two-sided tail regime.
    """
    if method not in ("auto", "series", "direct"):
        raise DomainError(f"unknown tail_beta method: {method!r}")
    a, h, _ = _half_etas(inp)
    em, ep = a - h, a + h
    if method == "auto":
        method = "series" if em >= SERIES_SWITCH_ETA else "direct"
    if method == "series":
        if em < SERIES_MIN_ETA:
            raise TailRegimeUnavailable(
                f"series route needs eta_minus >= {SERIES_MIN_ETA}, got {em!r}"
            )
        return (em / ep) * (_series_g(ep) / _series_g(em))
    m_minus = sf._mills_ratio(em)
    if math.isinf(m_minus):
        return 0.0
    return sf._mills_ratio(ep) / m_minus


@njit(cache=True)
def _g_gap_core(a, h):
    # g(a+h) - g(a-h) = sum_{n>=1} (-1)^{n+1} (2n-1)!! Q_n with
    # Q_n = (a-h)^{-2n} (1 - ((a-h)/(a+h))^{2n}); taking a and h rather
    # than the etas keeps the gap 2h exact, and every factor is computed
    # in a form proportional to h, so nothing cancels as h -> 0
    em, ep = a - h, a + h
    log_rho = math.log1p(-2.0 * h / ep)
    lem = math.log(em)
    total = 0.0
    prev_mag = math.inf
    dfact = 1.0
    sign = 1.0
    for n in range(1, 41):
        if n > 1:
            dfact *= 2.0 * n - 1.0
        mag = dfact * math.exp(-2.0 * n * lem) * (-math.expm1(2.0 * n * log_rho))
        if mag >= prev_mag:
            break
        total += sign * mag
        sign = -sign
        prev_mag = mag
    return total


@njit(cache=True)
def _moments_core(mu, sigma2, alpha):
    sigma = math.sqrt(sigma2)
    h = abs(mu) / sigma
    a = alpha * sigma
    em, ep = a - h, a + h
    sign = 1.0 if mu >= 0 else -1.0

    t_m, e_m, v_m = sf._hazard_triplet(em)
    m_minus = sf._mills_ratio(em)
    if em <= ONE_SIDED_ETA or math.isinf(m_minus):
        # opposite half carries no mass: single truncated Gaussian
        abs_mean = (abs(mu) - alpha * sigma2) + sigma * t_m
        return sign * abs_mean, sigma2 * v_m

    t_p, e_p, v_p = sf._hazard_triplet(ep)
    m_plus = sf._mills_ratio(ep)
    beta = m_plus / m_minus

    w_r = 1.0 / (1.0 + beta)
    w_l = beta / (1.0 + beta)
    spread = e_m + e_p
    # the mixture decomposition can land one ulp above the cavity
    # variance, which the contraction property forbids
    c_s = min(
        sigma2 * (w_r * v_m + w_l * v_p + w_r * w_l * spread * spread),
        sigma2,
    )

    if em >= SERIES_SWITCH_ETA:
        gap = _g_gap_core(a, h)
    else:
        gap = ep * m_plus - em * m_minus
    abs_mean = sigma * gap / (m_minus + m_plus)
    return sign * abs_mean, c_s


def laplace_site_moments(inp):
    """Tilted mean and variance for the double-exponential site."""
    s_bar, c_s = _moments_core(inp.mu, inp.sigma2, inp.alpha)
    return TiltedMoments(s_bar=s_bar, c_s=c_s)
