"""Reconstruction quality metrics and machine-readable report emission.

Metrics: Euclidean error, peak signal-to-noise ratio, and the standard
mean-of-local-SSIM image similarity with Gaussian-weighted windows.
Credible bands are per-coordinate Gaussian intervals from a posterior
summary. Reports are emitted as JSON/CSV/PGM files whose bytes depend
only on the inputs; wall-clock metadata goes to a separate file.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, DomainError, IOFailure
from .problem_model import write_pgm
from .special_functions import erfc

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

CROSS_SECTION_HEADER = "coordinate, truth, MAP, EP mean, band lower, band upper"
CONVERGENCE_HEADER = "sweep, mean change, covariance change"


@dataclass(frozen=True)
class MetricsBundle:
    l2_error: float
    psnr: float
    ssim: float | None  # None when no 2D structure was available
    peak_value: float


def l2_error(x, x_ref):
    """Euclidean norm of the difference."""
    x = np.asarray(x, dtype=np.float64).ravel()
    x_ref = np.asarray(x_ref, dtype=np.float64).ravel()
    if x.shape != x_ref.shape:
        raise DimensionMismatch(f"length {x.size} vs {x_ref.size}")
    return float(np.linalg.norm(x - x_ref))


def psnr(x, x_ref, peak):
    """10 log10(peak^2 / MSE) in dB; +inf when the images coincide."""
    x = np.asarray(x, dtype=np.float64).ravel()
    x_ref = np.asarray(x_ref, dtype=np.float64).ravel()
    if x.shape != x_ref.shape:
        raise DimensionMismatch(f"length {x.size} vs {x_ref.size}")
    if not peak > 0.0:
        raise DomainError("peak must be positive")
    mse = float(np.mean((x - x_ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Normalized 2D Gaussian weighting window."""
    half = (size - 1) / 2.0
    g = np.exp(-0.5 * ((np.arange(size) - half) / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def ssim(x, x_ref, window=None, k1=SSIM_K1, k2=SSIM_K2, dynamic_range=None):
    """Mean local structural similarity over all fully-interior windows.

    `window` is any normalized 2D weight array (default: 11x11 Gaussian,
    sigma 1.5). dynamic_range defaults to the reference image maximum;
    report assembly passes the PSNR peak explicitly.
    """
    x = np.asarray(x, dtype=np.float64)
    x_ref = np.asarray(x_ref, dtype=np.float64)
    if x.ndim != 2 or x.shape != x_ref.shape:
        raise DimensionMismatch(f"need equal 2D images, got {x.shape} vs {x_ref.shape}")
    w = gaussian_window() if window is None else np.asarray(window, dtype=np.float64)
    w = w / w.sum()
    wh, ww = w.shape
    if x.shape[0] < wh or x.shape[1] < ww:
        raise DimensionMismatch(
            f"image {x.shape} smaller than window {w.shape}"
        )
    if dynamic_range is None:
        m = float(x_ref.max())
        dynamic_range = m if m > 0.0 else 1.0
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2

    def local(img):
        view = np.lib.stride_tricks.sliding_window_view(img, (wh, ww))
        return np.tensordot(view, w, axes=([2, 3], [0, 1]))

    mu_x, mu_y = local(x), local(x_ref)
    var_x = local(x * x) - mu_x * mu_x
    var_y = local(x_ref * x_ref) - mu_y * mu_y
    cov = local(x * x_ref) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def compute_metrics(x, x_ref, peak, image_shape=None):
    """Assemble the metric bundle; SSIM only when a 2D shape is given
    that fits the default window."""
    s = None
    if image_shape is not None and min(image_shape) >= SSIM_WINDOW:
        s = ssim(
            np.reshape(x, image_shape),
            np.reshape(x_ref, image_shape),
            dynamic_range=peak,
        )
    return MetricsBundle(
        l2_error=l2_error(x, x_ref),
        psnr=psnr(x, x_ref, peak),
        ssim=s,
        peak_value=float(peak),
    )


def gaussian_central_quantile(level):
    """z such that a standard Gaussian lies in [-z, z] with probability
    `level`. Solved by bisection on the complementary error function."""
    if not 0.0 < level < 1.0:
        raise DomainError("level must sit strictly between 0 and 1")
    tail = 1.0 - level  # erfc(z / sqrt(2)) = tail
    lo, hi = 0.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if erfc(mid / math.sqrt(2.0)) > tail:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-14 * max(1.0, lo):
            break
    return 0.5 * (lo + hi)


def hpd_band(summary, level):
    """Per-coordinate highest-density interval from the Gaussian summary:
    mean +- z(level) * marginal sd."""
    z = gaussian_central_quantile(level)
    sd = np.sqrt(np.asarray(summary.marginal_variances, dtype=np.float64))
    mean = np.asarray(summary.mean, dtype=np.float64)
    return mean - z * sd, mean + z * sd


# ---------------------------------------------------------------------------
# Report emission


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None  # strict JSON cannot carry inf/nan
    return v


def emit_report(
    out_dir,
    *,
    truth=None,
    map_estimate=None,
    ep_summary=None,
    metrics=None,
    convergence=None,
    image_shape=None,
    peak=None,
):
    """Write the report file set into out_dir and return the paths.

    Emits metrics.json (stable key order), cross_section.csv, a
    convergence.csv of per-sweep changes, and PGM images when a 2D shape
    is given. All files are byte-stable for identical inputs; anything
    time-dependent lives in run_meta.json, which callers write separately.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
        written = []

        payload = {}
        for name, bundle in (metrics or {}).items():
            if isinstance(bundle, MetricsBundle):
                bundle = vars(bundle)
            payload[name] = {k: _json_safe(v) for k, v in sorted(bundle.items())}
        path = os.path.join(out_dir, "metrics.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=1)
            fh.write("\n")
        written.append(path)

        n = 0
        for v in (truth, map_estimate):
            if v is not None:
                n = max(n, np.asarray(v).size)
        if ep_summary is not None:
            n = max(n, np.asarray(ep_summary.mean).size)
        rows = []
        for i in range(n):
            def at(vec):
                return None if vec is None else float(np.asarray(vec).ravel()[i])

            rows.append(
                [
                    i,
                    at(truth),
                    at(map_estimate),
                    None if ep_summary is None else float(ep_summary.mean[i]),
                    None if ep_summary is None else float(ep_summary.band_lower[i]),
                    None if ep_summary is None else float(ep_summary.band_upper[i]),
                ]
            )
        path = os.path.join(out_dir, "cross_section.csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(CROSS_SECTION_HEADER + "\n")
            for row in rows:
                fh.write(", ".join(_fmt(v) for v in row) + "\n")
        written.append(path)

        path = os.path.join(out_dir, "convergence.csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(CONVERGENCE_HEADER + "\n")
            if convergence is not None:
                cov = list(convergence.cov_deltas)
                for i, d in enumerate(convergence.mu_deltas):
                    c = cov[i] if i < len(cov) else None
                    fh.write(f"{i + 1}, {_fmt(float(d))}, {_fmt(c)}\n")
        written.append(path)

        if image_shape is not None:
            shared_peak = peak
            if shared_peak is None:
                candidates = [
                    float(np.max(v))
                    for v in (truth, map_estimate)
                    if v is not None and np.asarray(v).size
                ]
                if ep_summary is not None:
                    candidates.append(float(np.max(ep_summary.mean)))
                shared_peak = max([c for c in candidates if c > 0.0], default=1.0)
            for name, vec in (
                ("truth", truth),
                ("map", map_estimate),
                ("ep_mean", None if ep_summary is None else ep_summary.mean),
            ):
                if vec is None:
                    continue
                path = os.path.join(out_dir, f"{name}.pgm")
                write_pgm(path, np.reshape(vec, image_shape), peak=shared_peak)
                written.append(path)
        return written
    except OSError as exc:
        raise IOFailure(f"report emission failed: {exc}") from exc
