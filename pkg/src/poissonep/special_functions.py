"""Scalar special functions used by the site quadratures.

Everything here is implemented in-library on top of exp/log/sqrt only:

* error functions ``erf``/``erfc`` and the scaled complement ``erfcx``,
* standard normal pdf/cdf,
* the divergent Gaussian tail series g(eta) with a term-growth guard,
* Mills-ratio helpers (hazard rate, hazard excess, truncated-variance
  factor) that make the truncated-Gaussian moment formulas cancellation
  free in every regime.

The cores are njit-compiled so the EP hot loops can call them without
leaving nopython mode; the public wrappers add domain validation.
"""

import math
from dataclasses import dataclass

from numba import njit

from .errors import DomainError, EtaBelowValidity

SQRT_PI = math.sqrt(math.pi)
SQRT_2 = math.sqrt(2.0)
SQRT_2PI = math.sqrt(2.0 * math.pi)
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
# erfcx(-x) = 2 exp(x^2) - erfcx(x) overflows once x^2 > log(DBL_MAX)
_ERFCX_NEG_LIMIT = 26.64

# Above this eta the asymptotic series evaluates the Mills-ratio family to
# full precision; below it the erfcx route is exact.  (The series' optimal
# truncation error is ~exp(-eta^2/2): 5e-6 at eta=5, 2e-37 at eta=13, so a
# switch at 5 would poison downstream moment accuracy.)
TAIL_SWITCH_ETA = 13.0


# ---------------------------------------------------------------------------
# error functions
# ---------------------------------------------------------------------------

@njit(cache=True)
def _erf_taylor(x):
    # Maclaurin series, adequate for |x| <= 2 (max ~35 terms).
    acc = x
    term = x
    xx = x * x
    n = 0
    while n < 80:
        n += 1
        term = -term * xx / n
        contrib = term / (2.0 * n + 1.0)
        acc += contrib
        if abs(contrib) < 1e-18 * abs(acc):
            break
    return 1.1283791670955126 * acc  # 2/sqrt(pi)


@njit(cache=True)
def _mills_cf(eta):
    # Laplace continued fraction for the Mills ratio,
    #   m(eta) = 1/(eta + 1/(eta + 2/(eta + 3/(...)))),  eta > 0,
    # evaluated by the modified Lentz algorithm.  Used for eta >~ 2.8 where
    # it converges to double precision within ~200 terms.
    tiny = 1e-300
    f = eta if eta != 0.0 else tiny
    c = f
    d = 0.0
    for k in range(1, 500):
        an = float(k)
        d = eta + an * d
        if d == 0.0:
            d = tiny
        c = eta + an / c
        if c == 0.0:
            c = tiny
        d = 1.0 / d
        delta = c * d
        f *= delta
        if abs(delta - 1.0) < 1e-17:
            break
    return 1.0 / f


@njit(cache=True)
def _exp_neg_sq(x):
    # exp(-x^2) with the argument split so that the rounding of x*x does
    # not cost ~x^2*eps relative error (matters for the erfc accuracy
    # requirement up to x = 26).
    z = math.floor(x * 16.0 + 0.5) / 16.0   # z^2 exact for |x| <= ~45
    d = (x - z) * (x + z)
    return math.exp(-z * z) * math.exp(-d)


@njit(cache=True)
def _erfcx_core(x):
    # x >= 0 assumed.
    if x < 1.0:
        return math.exp(x * x) * (1.0 - _erf_taylor(x))
    # m(eta) with eta = sqrt(2) x; erfcx(x) = sqrt(2/pi) m(sqrt(2) x)
    return 0.7978845608028654 * _mills_cf(1.4142135623730951 * x)


@njit(cache=True)
def _erfc_core(x):
    # any finite x
    if x < 0.0:
        return 2.0 - _erfc_core(-x)
    if x <= 1.0:
        return 1.0 - _erf_taylor(x)
    return _erfcx_core(x) * _exp_neg_sq(x)


@njit(cache=True)
def _erf_core(x):
    if x < 0.0:
        return -_erf_core(-x)
    if x <= 1.0:
        return _erf_taylor(x)
    return 1.0 - _erfc_core(x)


def erf(x):
    """Error function."""
    x = float(x)
    if math.isnan(x):
        return x
    if math.isinf(x):
        return 1.0 if x > 0 else -1.0
    return _erf_core(x)


def erfc(x):
    """Complementary error function; does not underflow for x <= 26."""
    x = float(x)
    if math.isnan(x):
        return x
    if math.isinf(x):
        return 0.0 if x > 0 else 2.0
    return _erfc_core(x)


def erfcx(x):
    """Scaled complementary error function exp(x^2) erfc(x).

    For x < 0 the reflection 2 exp(x^2) - erfcx(-x) is used; it overflows
    to +inf for x below about -26.6, which is the correct limit value.
    """
    x = float(x)
    if math.isnan(x):
        return x
    if math.isinf(x):
        return 0.0 if x > 0 else math.inf
    if x >= 0.0:
        return _erfcx_core(x)
    if x < -_ERFCX_NEG_LIMIT:
        return math.inf
    return 2.0 * math.exp(x * x) - _erfcx_core(-x)


# ---------------------------------------------------------------------------
# Gaussian tail series
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TailSeriesConfig:
    """Truncation policy for the divergent tail series g(eta)."""

    max_terms: int = 10
    min_eta: float = 5.0

    def __post_init__(self):
        if self.max_terms < 8:
            raise DomainError("max_terms must be at least 8")
        if self.min_eta < 5.0:
            raise DomainError("min_eta must be at least 5")


@njit(cache=True)
def _tail_series_triplet(eta, max_terms):
    """Evaluate three related alternating tail series at once.

    g(eta)    = sum_{n>=0} (-1)^n (2n-1)!! eta^{-2n}
    ghat(eta) = g(eta) - 1                       (the n>=1 part)
    q(eta)    = sum_{n>=1} (-1)^{n+1} (2n-1)(2n-1)!! eta^{-2n}

    q is the series of 1 + (2 + eta^2) ghat with the O(1) cancellation
    carried out symbolically, which is what makes the truncated-variance
    factor below stable for huge eta.  All three are truncated at
    ``max_terms`` terms or at the term-growth point, whichever is first.
    """
    inv2 = 1.0 / (eta * eta)
    g = 1.0
    ghat = 0.0
    q = 0.0
    term = 1.0
    prev = math.inf
    sign = 1.0
    n = 0
    while n < max_terms - 1:
        n += 1
        term = term * (2.0 * n - 1.0) * inv2
        if term >= prev:
            break
        sign = -sign
        g += sign * term
        ghat += sign * term
        q += -sign * (2.0 * n - 1.0) * term
        prev = term
    return g, ghat, q


def gauss_tail_ratio(eta, cfg=TailSeriesConfig()):
    """Truncated tail series g(eta), so that 1-Phi(eta) = pdf(eta)/eta*g(eta).

    Raises EtaBelowValidity for eta < cfg.min_eta, where the divergent
    expansion has no accurate truncation.
    """
    eta = float(eta)
    if not eta >= cfg.min_eta:
        raise EtaBelowValidity(
            "tail series requested at eta=%r below validity threshold %r"
            % (eta, cfg.min_eta)
        )
    g, _, _ = _tail_series_triplet(eta, cfg.max_terms)
    return g


# ---------------------------------------------------------------------------
# standard normal pdf / cdf
# ---------------------------------------------------------------------------

@njit(cache=True)
def _std_normal_pdf(x):
    return math.exp(-0.5 * x * x) / 2.5066282746310002


@njit(cache=True)
def _std_normal_cdf(x):
    if x >= -5.0:
        # Phi(x) = erfc(-x/sqrt(2))/2, accurate over the whole direct range
        return 0.5 * _erfc_core(-x * 0.7071067811865476)
    # deep left tail via the asymptotic expansion at -x
    eta = -x
    g, _, _ = _tail_series_triplet(eta, 48)
    return _std_normal_pdf(eta) / eta * g


def std_normal_pdf(x):
    """Standard normal density."""
    return _std_normal_pdf(float(x))


def std_normal_cdf(x):
    """Standard normal distribution function.

    Direct erfc evaluation for x >= -5; the tail expansion (48-term cap
    with the growth guard) below.  Near the seam the expansion's optimal
    truncation error is ~4e-6 relative, decaying to ~1e-13 by x = -8.
    """
    x = float(x)
    if math.isnan(x):
        return x
    if math.isinf(x):
        return 1.0 if x > 0 else 0.0
    return _std_normal_cdf(x)


def log1p_stable(x):
    """log(1+x), accurate for tiny |x|; DomainError for x <= -1."""
    x = float(x)
    if x <= -1.0:
        raise DomainError("log1p requires x > -1, got %r" % x)
    u = 1.0 + x
    if u == 1.0:
        return x
    # correct the rounding of 1+x (Goldberg's trick)
    return math.log(u) * x / (u - 1.0)


# ---------------------------------------------------------------------------
# Mills-ratio machinery for truncated-Gaussian moments
# ---------------------------------------------------------------------------
#
# For the lower-truncated standard normal on (eta, inf):
#   mills(eta)  = (1 - Phi(eta)) / pdf(eta)
#   hazard      t(eta) = 1 / mills(eta)          (the truncated mean offset)
#   excess      e(eta) = t(eta) - eta            (mean above the cut)
#   var factor  V(eta) = 1 - t(eta) e(eta)       (variance / sigma^2)
# Direct evaluation of e and V loses ~eta^2 in relative accuracy, so above
# TAIL_SWITCH_ETA they are rebuilt from the guarded asymptotic series:
#   e = -eta ghat / g,   V = (q + ghat^2) / g^2.

@njit(cache=True)
def _mills_ratio(eta):
    if eta >= 0.0:
        return 1.2533141373155003 * _erfcx_core(eta * 0.7071067811865476)
    # left of zero: survival is >= 1/2, only the pdf can be extreme
    pdf = _std_normal_pdf(eta)
    if pdf == 0.0:
        return math.inf
    return _std_normal_cdf(-eta) / pdf


@njit(cache=True)
def _hazard_triplet(eta):
    """Return (t, e, V) for the truncation point eta."""
    if eta >= TAIL_SWITCH_ETA:
        g, ghat, q = _tail_series_triplet(eta, 40)
        t = eta / g
        e = -eta * ghat / g
        v = (q + ghat * ghat) / (g * g)
        return t, e, v
    m = _mills_ratio(eta)
    if m == math.inf:
        # so deep left that the cut is irrelevant
        return 0.0, -eta, 1.0
    t = 1.0 / m
    e = t - eta
    return t, e, 1.0 - t * e


@njit(cache=True)
def _log_mills(eta):
    if eta >= TAIL_SWITCH_ETA:
        g, _, _ = _tail_series_triplet(eta, 40)
        return math.log(g / eta)
    if eta >= 0.0:
        return 0.22579135264472741 + math.log(
            _erfcx_core(eta * 0.7071067811865476)
        )  # log sqrt(pi/2) + log erfcx
    return math.log(_std_normal_cdf(-eta)) + 0.5 * eta * eta + 0.9189385332046727


@njit(cache=True)
def _log_gauss_sf(eta):
    """log(1 - Phi(eta)) without underflow for any eta."""
    if eta <= 0.0:
        return math.log(_std_normal_cdf(-eta))
    return -0.5 * eta * eta - 0.9189385332046727 + _log_mills(eta)


def mills_ratio(eta):
    """(1 - Phi(eta))/pdf(eta); +inf when the pdf underflows."""
    return _mills_ratio(float(eta))


def gauss_hazard(eta):
    """pdf(eta)/(1 - Phi(eta)), the truncated-normal hazard rate."""
    m = _mills_ratio(float(eta))
    return 0.0 if m == math.inf else 1.0 / m


def hazard_excess(eta):
    """gauss_hazard(eta) - eta, computed without tail cancellation."""
    _, e, _ = _hazard_triplet(float(eta))
    return e


def trunc_var_factor(eta):
    """Variance of the standard normal truncated to (eta, inf)."""
    _, _, v = _hazard_triplet(float(eta))
    return v


def log_gauss_sf(eta):
    """log(1 - Phi(eta)), stable for arbitrarily large eta."""
    return _log_gauss_sf(float(eta))
