"""Expectation propagation for Poisson inverse problems with Laplace priors."""

from .ep_engine import EPConfig, posterior_summary, run_sweeps
from .problem_model import (
    InverseProblem,
    disk_phantom,
    make_phillips_problem,
    make_tomo_problem,
)

__version__ = "0.1.0"

__all__ = [
    "EPConfig",
    "InverseProblem",
    "disk_phantom",
    "make_phillips_problem",
    "make_tomo_problem",
    "posterior_summary",
    "run_sweeps",
    "__version__",
]
