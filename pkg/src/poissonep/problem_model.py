"""Construction of count-data inverse problems.

Provides the forward maps (a 1D convolution benchmark and a small
parallel-beam line-integral tomography builder), difference/TV prior
operators, Poisson data simulation, two synthetic phantoms, the shared
un-normalized log-posterior used as the reference density, and plain-text
serialization (JSON bundles, PGM images).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InitializationError, NegativeRate

CONSTRAINTS = ("C2", "C3")


@dataclass
class InverseProblem:
    """A Poisson count-data problem: counts y ~ Poisson(A x + r), prior
    strength alpha on ||L x||_1, and a linear-feasibility constraint.

    constraint "C2" requires A x >= 0 elementwise; "C3" only requires the
    rates A x + r to stay nonnegative.
    """

    A: np.ndarray
    r: np.ndarray
    y: np.ndarray
    L: np.ndarray
    alpha: float
    constraint: str = "C2"

    def __post_init__(self):
        self.A = np.ascontiguousarray(self.A, dtype=np.float64)
        self.r = np.ascontiguousarray(self.r, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y)
        self.L = np.ascontiguousarray(self.L, dtype=np.float64)
        if self.A.ndim != 2 or self.L.ndim != 2:
            raise InitializationError("A and L must be matrices")
        m1, n = self.A.shape
        if self.L.shape[1] != n:
            raise InitializationError(
                f"L has {self.L.shape[1]} columns, expected {n}"
            )
        if self.r.shape != (m1,) or self.y.shape != (m1,):
            raise InitializationError("r and y must have one entry per row of A")
        if np.any(self.A < 0.0):
            raise InitializationError("forward map entries must be nonnegative")
        if np.any(self.r < 0.0):
            raise InitializationError("background must be nonnegative")
        if np.any(self.y < 0) or not np.issubdtype(self.y.dtype, np.integer):
            raise InitializationError("counts must be nonnegative integers")
        if not (self.alpha > 0.0 and math.isfinite(self.alpha)):
            raise InitializationError("alpha must be positive and finite")
        if self.constraint not in CONSTRAINTS:
            raise InitializationError(f"unknown constraint {self.constraint!r}")

    @property
    def n(self):
        return self.A.shape[1]

    def site_bounds(self):
        """Per-row lower bounds b_i on a_i^t x implied by the constraint."""
        if self.constraint == "C2":
            return np.zeros_like(self.r)
        return -self.r


@dataclass
class Phantom2D:
    """A nonnegative pixel image; pixels[row, col], row 0 at the bottom."""

    width: int
    height: int
    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float64)
        if self.width < 1 or self.height < 1:
            raise InitializationError("phantom dimensions must be positive")
        if self.pixels.shape != (self.height, self.width):
            raise InitializationError(
                f"pixel grid {self.pixels.shape} does not match "
                f"{self.height}x{self.width}"
            )
        if np.any(self.pixels < 0.0):
            raise InitializationError("phantom intensities must be nonnegative")

    def vec(self):
        """Row-major flattening used by the tomography forward map."""
        return self.pixels.ravel().copy()


# ---------------------------------------------------------------------------
# 1D convolution benchmark


def phillips_profile(s):
    """The source profile 10 + 10 cos(pi s / 3) inside [-3, 3].

    The indicator multiplies only the cosine term, so the profile equals
    10 outside [-3, 3] and dips to 0 exactly at s = +-3.
    """
    s = np.asarray(s, dtype=np.float64)
    out = np.full(s.shape, 10.0)
    inside = np.abs(s) <= 3.0
    out[inside] += 10.0 * np.cos(np.pi * s[inside] / 3.0)
    return out if out.ndim else float(out)


def build_phillips(n=100):
    """Midpoint-collocation discretization of the convolution equation
    (K x)(s) = int phi(s - t) x(t) dt over [-6, 6].

    Returns (A, x_true) with A[i, j] = w * phi(s_i - t_j), cell width
    w = 12/n, and x_true the profile sampled at the same midpoints.
    """
    if n < 10:
        raise DomainError("grid size must be at least 10")
    w = 12.0 / n
    nodes = -6.0 + (np.arange(n) + 0.5) * w
    A = w * phillips_profile(nodes[:, None] - nodes[None, :])
    x_true = phillips_profile(nodes)
    return A, x_true


# ---------------------------------------------------------------------------
# 2D line-integral tomography (Siddon-style exact pixel traversal)


def _ray_box_range(px, py, dx, dy, width, height):
    """Parameter interval where the ray p + t d lies inside the image box
    [0, width] x [0, height], or None if it misses."""
    tmin, tmax = -math.inf, math.inf
    for p0, d0, lim in ((px, dx, width), (py, dy, height)):
        if abs(d0) < 1e-300:
            if p0 <= 0.0 or p0 >= lim:
                return None
        else:
            t0, t1 = (0.0 - p0) / d0, (lim - p0) / d0
            if t0 > t1:
                t0, t1 = t1, t0
            tmin, tmax = max(tmin, t0), min(tmax, t1)
    if tmax <= tmin + 1e-12:
        return None
    return tmin, tmax


def _ray_pixel_lengths(px, py, dx, dy, width, height):
    """Exact intersection lengths of a unit-direction ray with each unit
    pixel it crosses; returns (flat_indices, lengths) row-major."""
    rng = _ray_box_range(px, py, dx, dy, width, height)
    if rng is None:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    tmin, tmax = rng
    # parameters at every grid-line crossing inside the box
    crossings = [np.array([tmin, tmax])]
    if abs(dx) > 1e-300:
        t = (np.arange(width + 1) - px) / dx
        crossings.append(t[(t > tmin) & (t < tmax)])
    if abs(dy) > 1e-300:
        t = (np.arange(height + 1) - py) / dy
        crossings.append(t[(t > tmin) & (t < tmax)])
    ts = np.unique(np.concatenate(crossings))
    lengths = np.diff(ts)
    mids = ts[:-1] + 0.5 * lengths
    ix = np.clip(np.floor(px + mids * dx).astype(np.int64), 0, width - 1)
    iy = np.clip(np.floor(py + mids * dy).astype(np.int64), 0, height - 1)
    keep = lengths > 1e-14
    return (iy * width + ix)[keep], lengths[keep]


def build_tomo(phantom, n_angles, n_detectors):
    """Parallel-beam line-integral matrix for the phantom's pixel grid.

    Rows are ordered angle-major: row a * n_detectors + k is detector k of
    angle a. Angles cover [0, pi) uniformly; the detector array spans the
    image diagonal with offsets symmetric about the center, so opposite
    detectors see point-reflected rays. Zero rows (rays missing the image)
    are retained to keep the (angle, detector) indexing intact.
    """
    if n_angles < 1 or n_detectors < 1:
        raise DomainError("need at least one angle and one detector")
    w, h = phantom.width, phantom.height
    cx, cy = 0.5 * w, 0.5 * h
    diag = math.hypot(w, h)
    spacing = diag / n_detectors
    offsets = (np.arange(n_detectors) - 0.5 * (n_detectors - 1)) * spacing
    A = np.zeros((n_angles * n_detectors, w * h))
    for a in range(n_angles):
        theta = math.pi * a / n_angles
        dx, dy = math.cos(theta), math.sin(theta)
        nx, ny = -dy, dx
        for k, off in enumerate(offsets):
            px, py = cx + off * nx, cy + off * ny
            idx, seg = _ray_pixel_lengths(px, py, dx, dy, w, h)
            A[a * n_detectors + k, idx] = seg
    return A


# ---------------------------------------------------------------------------
# Prior operators


def build_diff_operator(n):
    """First-difference matrix with n-1 rows: (Lx)_i = x_{i+1} - x_i."""
    if n < 2:
        raise DomainError("need at least two points for differences")
    L = np.zeros((n - 1, n))
    idx = np.arange(n - 1)
    L[idx, idx] = -1.0
    L[idx, idx + 1] = 1.0
    return L


def build_tv_operator(width, height):
    """Anisotropic discrete gradient: horizontal differences within each
    row, then vertical differences within each column, stacked."""
    if width < 2 or height < 2:
        raise DomainError("need at least a 2x2 grid")
    n = width * height
    rows = (width - 1) * height + width * (height - 1)
    L = np.zeros((rows, n))
    k = 0
    for iy in range(height):
        for ix in range(width - 1):
            L[k, iy * width + ix] = -1.0
            L[k, iy * width + ix + 1] = 1.0
            k += 1
    for iy in range(height - 1):
        for ix in range(width):
            L[k, iy * width + ix] = -1.0
            L[k, (iy + 1) * width + ix] = 1.0
            k += 1
    return L


# ---------------------------------------------------------------------------
# Data simulation


def sample_poisson_data(A, x_true, r, seed):
    """Draw y_i ~ Poisson(a_i^t x_true + r_i), reproducibly under seed."""
    rates = np.asarray(A) @ np.asarray(x_true) + np.asarray(r)
    if np.any(rates < 0.0):
        raise NegativeRate(f"minimum rate {rates.min():.6g} is negative")
    return np.random.default_rng(seed).poisson(rates)


def count_regime_scale(A, factor):
    """Rescale the forward map by 1/factor to thin the expected counts."""
    if not factor > 0.0:
        raise DomainError("scale factor must be positive")
    return np.asarray(A, dtype=np.float64) / factor


# ---------------------------------------------------------------------------
# Phantoms


def disk_phantom(size):
    """Piecewise-constant composite: an outer disk holding an off-center
    ellipse and two small inserts of differing contrast."""
    if size < 8:
        raise DomainError("phantom side must be at least 8")
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cx = cy = 0.5 * size
    img = np.zeros((size, size))

    def disk(x0, y0, rad):
        return (xx - x0) ** 2 + (yy - y0) ** 2 <= rad**2

    img[disk(cx, cy, 0.44 * size)] = 1.0
    ell = ((xx - 0.46 * size) / (0.26 * size)) ** 2 + (
        (yy - 0.54 * size) / (0.18 * size)
    ) ** 2 <= 1.0
    img[ell] = 0.4
    img[disk(0.62 * size, 0.36 * size, 0.08 * size)] = 2.0
    img[disk(0.36 * size, 0.40 * size, 0.05 * size)] = 1.6
    return Phantom2D(width=size, height=size, pixels=img)


def bar_phantom(size):
    """Resolution-style phantom: vertical bars of decreasing width over an
    empty background, probing fine vertical structure."""
    if size < 8:
        raise DomainError("phantom side must be at least 8")
    img = np.zeros((size, size))
    row_lo, row_hi = max(1, size // 8), size - max(1, size // 8)
    bands = [
        (0.08, 0.20, 1.0),
        (0.28, 0.36, 1.6),
        (0.44, 0.50, 0.8),
        (0.58, 0.62, 2.0),
        (0.70, 0.73, 1.2),
        (0.82, 0.84, 1.8),
    ]
    for lo, hi, val in bands:
        c0, c1 = int(round(lo * size)), max(int(round(lo * size)) + 1, int(round(hi * size)))
        img[row_lo:row_hi, c0:c1] = val
    return Phantom2D(width=size, height=size, pixels=img)


def uniform_disk_phantom(size, value=1.0):
    """A single constant disk filling most of the square grid."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = 0.5 * size
    img = np.where((xx - c) ** 2 + (yy - c) ** 2 <= (0.45 * size) ** 2, value, 0.0)
    return Phantom2D(width=size, height=size, pixels=img)


# ---------------------------------------------------------------------------
# Reference density


def log_posterior(problem, x):
    """Un-normalized log posterior density of the count model.

    Returns -inf outside the feasible region: the constraint bounds must
    hold, and any row with a positive count needs a strictly positive
    rate. This is the shared reference density for the samplers and the
    test oracles.
    """
    x = np.asarray(x, dtype=np.float64)
    z = problem.A @ x
    if np.any(z < problem.site_bounds()):
        return -math.inf
    rates = z + problem.r
    pos = problem.y > 0
    if np.any(rates[pos] <= 0.0):
        return -math.inf
    out = float(np.sum(problem.y[pos] * np.log(rates[pos])) - np.sum(rates))
    out -= problem.alpha * float(np.sum(np.abs(problem.L @ x)))
    return out


# ---------------------------------------------------------------------------
# Assembled benchmark problems


def make_phillips_problem(
    n=100, alpha=1.0, constraint="C2", seed=0, background=0.0, count_scale=1.0
):
    """Full 1D benchmark: convolution forward map, first-difference prior,
    and counts sampled from the true profile."""
    A, x_true = build_phillips(n)
    A = count_regime_scale(A, count_scale)
    r = np.full(n, float(background))
    y = sample_poisson_data(A, x_true, r, seed)
    L = build_diff_operator(n)
    prob = InverseProblem(A=A, r=r, y=y, L=L, alpha=alpha, constraint=constraint)
    return prob, x_true


def make_tomo_problem(
    phantom,
    n_angles,
    n_detectors,
    alpha=1.0,
    constraint="C2",
    seed=0,
    background=0.0,
    count_scale=1.0,
):
    """Full 2D benchmark: line-integral forward map over the phantom grid,
    anisotropic TV prior, and counts sampled from the phantom."""
    A = count_regime_scale(build_tomo(phantom, n_angles, n_detectors), count_scale)
    x_true = phantom.vec()
    r = np.full(A.shape[0], float(background))
    y = sample_poisson_data(A, x_true, r, seed)
    L = build_tv_operator(phantom.width, phantom.height)
    prob = InverseProblem(A=A, r=r, y=y, L=L, alpha=alpha, constraint=constraint)
    return prob, x_true


# ---------------------------------------------------------------------------
# Serialization


def save_problem(problem, path):
    """Write the problem bundle as JSON with row-major nested lists."""
    payload = {
        "A": [[float(v) for v in row] for row in problem.A],
        "r": [float(v) for v in problem.r],
        "y": [int(v) for v in problem.y],
        "L": [[float(v) for v in row] for row in problem.L],
        "alpha": float(problem.alpha),
        "constraint": problem.constraint,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_problem(path):
    with open(path) as fh:
        payload = json.load(fh)
    return InverseProblem(
        A=np.array(payload["A"], dtype=np.float64),
        r=np.array(payload["r"], dtype=np.float64),
        y=np.array(payload["y"], dtype=np.int64),
        L=np.array(payload["L"], dtype=np.float64),
        alpha=payload["alpha"],
        constraint=payload["constraint"],
    )


def write_pgm(path, image, maxval=65535, peak=None):
    """Write a 2D array as plain-text PGM (P2), row-major.

    Values are scaled so `peak` (default: the image maximum) maps to
    maxval; negative values clip to 0. Deterministic for fixed input.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DomainError("PGM export needs a 2D array")
    if peak is None:
        peak = float(image.max()) if image.size and image.max() > 0.0 else 1.0
    if not peak > 0.0:
        raise DomainError("peak must be positive")
    scaled = np.clip(np.rint(np.clip(image, 0.0, None) / peak * maxval), 0, maxval)
    h, w = image.shape
    lines = [f"P2", f"{w} {h}", f"{maxval}"]
    lines += [" ".join(str(int(v)) for v in row) for row in scaled]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
