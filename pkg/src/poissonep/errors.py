"""Exception taxonomy shared across the library.

Every failure mode that callers are expected to handle has its own type, so
the EP engine can distinguish "skip this site" conditions (quadrature or
factor trouble) from programming errors (dimension mismatches).
"""


class PoissonEPError(Exception):
    """Base class for all library-specific errors."""


# --- linear algebra -------------------------------------------------------

class DowndateLossOfPositivity(PoissonEPError):
    """A Cholesky rank-one downdate would leave a non-positive-definite
    matrix.  The EP engine treats this as a rejected site update."""


class SingularFactor(PoissonEPError):
    """A triangular factor has an (effectively) zero diagonal entry."""


class DimensionMismatch(PoissonEPError):
    """Operands have incompatible shapes."""


# --- scalar special functions --------------------------------------------

class DomainError(PoissonEPError):
    """Argument outside the mathematical domain of the function."""


class EtaBelowValidity(PoissonEPError):
    """The tail-series argument is below the configured validity threshold."""


# --- site quadrature ------------------------------------------------------

class UnderflowDetected(PoissonEPError):
    """A base integral underflowed to exactly zero; the evaluation scheme
    was misrouted for this parameter regime."""


class OverflowDetected(PoissonEPError):
    """An intermediate of the forward moment recursion exceeded the guard
    threshold; callers should switch to the ratio path."""


class NonpositiveRatio(PoissonEPError):
    """The ratio sequence left the positive cone, signalling a parameter
    regime outside its validity; callers fall back to the recursion."""


class TailRegimeUnavailable(PoissonEPError):
    """The asymptotic tail expansion is not valid for these arguments;
    callers should use the direct branch."""


class QuadratureFailure(PoissonEPError):
    """All evaluation paths for a site's tilted moments failed."""


# --- EP engine ------------------------------------------------------------

class NegativeCavityVariance(PoissonEPError):
    """Removing a site's contribution would produce a non-positive cavity
    variance; the site is skipped for this sweep."""


class SiteSkipped(PoissonEPError):
    """A site update was abandoned; carries the reason as its message."""


class InitializationError(PoissonEPError):
    """Inconsistent dimensions or invalid configuration at engine start."""


# --- problem construction and baselines -----------------------------------

class NegativeRate(PoissonEPError):
    """A Poisson rate A x + r is negative; data cannot be sampled."""


class InfeasiblePoint(PoissonEPError):
    """Objective evaluated at a point violating the positivity constraint."""


class LineSearchFailure(PoissonEPError):
    """The quasi-Newton line search could not make progress."""


class HessianAssemblyFailure(PoissonEPError):
    """The (modified) Hessian could not be assembled or repaired."""


class NoFeasibleStart(PoissonEPError):
    """No feasible starting point for the MCMC chain was found."""


# --- reporting / CLI ------------------------------------------------------

class IOFailure(PoissonEPError):
    """A report or bundle could not be written or read."""


class MissingResult(PoissonEPError):
    """A result directory required for comparison is absent or malformed."""
