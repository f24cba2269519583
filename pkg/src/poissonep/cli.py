"""Command-line front end: generate problem bundles, run inference
methods, compare result directories, and self-test the site moments
against an independent quadrature library.

Exit codes: 0 success, 2 configuration/validation error, 3 numerical or
runtime failure. All outputs are byte-stable under identical config and
seed; wall-clock data is confined to run_meta.json.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import baselines as bl
from . import ep_engine as ep
from . import gaussian_core as gc
from . import metrics_report as mr
from . import problem_model as pm
from .errors import (
    DimensionMismatch,
    DomainError,
    InitializationError,
    IOFailure,
    MissingResult,
    PoissonEPError,
)

VALID_METHODS = ("ep", "map", "laplace", "mcmc")
VALIDATION_EXIT = 2
NUMERICAL_EXIT = 3


@dataclass
class RunConfig:
    problem: str = "phillips"
    n: int = 100  # phillips grid size
    phantom: str = "disks"  # tomo phantom: disks | bars
    size: int = 16  # tomo grid side
    n_angles: int = 8
    n_detectors: int = 23
    constraint: str = "C2"
    alpha: float = 1.0
    count_scale: float = 1.0
    background: float = 0.0
    parameterization: str = "natural"
    max_sweeps: int = 4
    tol: float = 1e-8
    seed: int = 0
    methods: tuple = ("ep",)
    output_dir: str | None = None
    epsilon: float | None = None  # MAP/curvature smoothing; None -> data scale
    mcmc_chain_length: int = 20_000
    mcmc_burn_in: int = 5_000
    parallel: bool = False

    def __post_init__(self):
        if self.problem not in ("phillips", "tomo"):
            raise InitializationError(f"unknown problem {self.problem!r}")
        if self.phantom not in ("disks", "bars"):
            raise InitializationError(f"unknown phantom {self.phantom!r}")
        if self.constraint not in ("C2", "C3"):
            raise InitializationError(f"unknown constraint {self.constraint!r}")
        if self.parameterization not in ("natural", "moment"):
            raise InitializationError(
                f"unknown parameterization {self.parameterization!r}"
            )
        if not (self.alpha > 0.0 and math.isfinite(self.alpha)):
            raise InitializationError("alpha must be positive")
        if not self.count_scale > 0.0:
            raise InitializationError("count_scale must be positive")
        if self.max_sweeps < 1:
            raise InitializationError("max_sweeps must be at least 1")
        if self.tol < 0.0:
            raise InitializationError("tol must be nonnegative")
        methods = tuple(self.methods)
        if not methods or any(m not in VALID_METHODS for m in methods):
            raise InitializationError(
                f"methods must be a nonempty subset of {VALID_METHODS}"
            )
        self.methods = methods
        if self.epsilon is not None and not self.epsilon > 0.0:
            raise InitializationError("epsilon must be positive when given")

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise InitializationError(f"unknown config keys: {sorted(unknown)}")
        if "methods" in data and isinstance(data["methods"], str):
            data = dict(data, methods=tuple(data["methods"].split(",")))
        return cls(**data)

    def to_dict(self):
        d = asdict(self)
        d["methods"] = list(self.methods)
        return d


def load_config(path, overrides):
    """Merge a JSON config file (optional) with non-None flag overrides;
    flags take precedence."""
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise InitializationError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InitializationError(f"config {path} is not valid JSON: {exc}") from exc
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(data)


def resolve_output_dir(config):
    out = config.output_dir or os.environ.get("EP_OUTPUT_DIR")
    if not out:
        raise InitializationError(
            "no output directory: set output_dir, --output-dir, or EP_OUTPUT_DIR"
        )
    return out


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _echo_config(config, out_dir):
    _write_json(os.path.join(out_dir, "config_echo.json"), config.to_dict())


def _write_meta(out_dir, extra=None):
    payload = {"written_at": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    payload.update(extra or {})
    _write_json(os.path.join(out_dir, "run_meta.json"), payload)


def build_problem(config):
    """Assemble the configured problem; returns (problem, x_true, image_shape)."""
    if config.problem == "phillips":
        prob, x_true = pm.make_phillips_problem(
            n=config.n,
            alpha=config.alpha,
            constraint=config.constraint,
            seed=config.seed,
            background=config.background,
            count_scale=config.count_scale,
        )
        return prob, x_true, None
    maker = pm.disk_phantom if config.phantom == "disks" else pm.bar_phantom
    phantom = maker(config.size)
    prob, x_true = pm.make_tomo_problem(
        phantom,
        config.n_angles,
        config.n_detectors,
        alpha=config.alpha,
        constraint=config.constraint,
        seed=config.seed,
        background=config.background,
        count_scale=config.count_scale,
    )
    return prob, x_true, (phantom.height, phantom.width)


def cmd_generate(config):
    out = resolve_output_dir(config)
    os.makedirs(out, exist_ok=True)
    prob, x_true, image_shape = build_problem(config)
    pm.save_problem(prob, os.path.join(out, "bundle.json"))
    _write_json(
        os.path.join(out, "truth.json"),
        {
            "x_true": [float(v) for v in x_true],
            "image_shape": list(image_shape) if image_shape else None,
            "peak": float(np.max(x_true)) if x_true.size else 1.0,
        },
    )
    _echo_config(config, out)
    _write_meta(out)
    print(f"bundle written to {out} (A {prob.A.shape[0]}x{prob.A.shape[1]})")
    return 0


def _load_bundle(bundle_dir):
    bundle_path = os.path.join(bundle_dir, "bundle.json")
    if not os.path.isfile(bundle_path):
        raise MissingResult(f"no bundle.json under {bundle_dir}")
    problem = pm.load_problem(bundle_path)
    truth = None
    image_shape = None
    peak = 1.0
    truth_path = os.path.join(bundle_dir, "truth.json")
    if os.path.isfile(truth_path):
        with open(truth_path) as fh:
            payload = json.load(fh)
        truth = np.array(payload["x_true"], dtype=np.float64)
        image_shape = (
            tuple(payload["image_shape"]) if payload.get("image_shape") else None
        )
        peak = float(payload.get("peak") or 1.0)
    return problem, truth, image_shape, peak


def _summary_from_gaussian(mean, variances):
    sd = np.sqrt(np.maximum(variances, 0.0))
    return ep.PosteriorSummary(
        mean=np.asarray(mean, dtype=np.float64),
        marginal_variances=np.asarray(variances, dtype=np.float64),
        band_lower=mean - ep.HPD_Z_95 * sd,
        band_upper=mean + ep.HPD_Z_95 * sd,
    )


def _run_one_method(method, problem, truth, image_shape, peak, config, out_root):
    """Run a single inference method and emit its report files.

    Returns the wall time in seconds; numerical errors propagate to the
    caller, which isolates them per method.
    """
    t0 = time.perf_counter()
    out = os.path.join(out_root, method)
    n = problem.A.shape[1]
    summary = None
    map_estimate = None
    convergence = None
    if method == "ep":
        epcfg = ep.EPConfig(
            parameterization=config.parameterization,
            max_sweeps=config.max_sweeps,
            tol=config.tol,
            seed=config.seed,
        )
        state, convergence = ep.run_sweeps(problem, epcfg)
        summary = ep.posterior_summary(state)
        os.makedirs(out, exist_ok=True)
        ep.save_checkpoint(state, os.path.join(out, "checkpoint.json"))
    else:
        eps = config.epsilon or bl.default_epsilon(problem)
        obj = bl.SmoothedObjective(problem=problem, epsilon=eps)
        if method == "map":
            map_estimate = bl.solve_map(obj, np.ones(n)).x
        elif method == "laplace":
            x_map = bl.solve_map(obj, np.ones(n)).x
            lap = bl.laplace_approximation(obj, x_map, variant="exact_hessian")
            variances = np.asarray(
                gc.marginal_variances(lap.param.chol_Lambda, from_precision=True)
            )
            summary = _summary_from_gaussian(x_map, variances)
        elif method == "mcmc":
            mcfg = bl.MCMCConfig(
                chain_length=config.mcmc_chain_length,
                burn_in=config.mcmc_burn_in,
                seed=config.seed,
            )
            start = truth if truth is not None else np.ones(n)
            res = bl.run_rwmh(problem, mcfg, start)
            summary = _summary_from_gaussian(res.mean, res.variances)
    metrics = {}
    if truth is not None:
        estimate = map_estimate if summary is None else summary.mean
        metrics[method] = mr.compute_metrics(
            estimate, truth, peak=peak, image_shape=image_shape
        )
    mr.emit_report(
        out,
        truth=truth,
        map_estimate=map_estimate,
        ep_summary=summary,
        metrics=metrics,
        convergence=convergence,
        image_shape=image_shape,
        peak=peak,
    )
    return time.perf_counter() - t0, metrics


def cmd_infer(config, bundle_dir):
    out = resolve_output_dir(config)
    os.makedirs(out, exist_ok=True)
    problem, truth, image_shape, peak = _load_bundle(bundle_dir)
    status = {}
    wall = {}
    all_metrics = {}

    def run(method):
        try:
            wall[method], bundles = _run_one_method(
                method, problem, truth, image_shape, peak, config, out
            )
            all_metrics.update(bundles)
            return "ok"
        except PoissonEPError as exc:
            return f"error: {type(exc).__name__}: {exc}"

    if config.parallel and len(config.methods) > 1:
        with ThreadPoolExecutor(max_workers=len(config.methods)) as pool:
            results = list(pool.map(run, config.methods))
        status = dict(zip(config.methods, results))
    else:
        for method in config.methods:
            status[method] = run(method)
    _write_json(os.path.join(out, "methods_status.json"), status)
    if len(all_metrics) >= 2:
        side_by_side = {
            m: {k: mr._json_safe(v) for k, v in sorted(vars(b).items())}
            for m, b in all_metrics.items()
        }
        _write_json(os.path.join(out, "comparison.json"), side_by_side)
    _echo_config(config, out)
    _write_meta(out, {"wall_times": wall})
    failures = [m for m, s in status.items() if s != "ok"]
    for m in failures:
        print(f"{m}: {status[m]}", file=sys.stderr)
    print(f"inference written to {out} ({len(status) - len(failures)}/{len(status)} methods ok)")
    return NUMERICAL_EXIT if failures else 0


COMPARISON_HEADER = "run, method, l2_error, psnr, ssim, wall_time_s"


def cmd_compare(result_dirs, out_dir):
    if len(result_dirs) < 2:
        raise InitializationError("compare needs at least two result directories")
    rows = []
    for d in result_dirs:
        status_path = os.path.join(d, "methods_status.json")
        if not os.path.isfile(status_path):
            raise MissingResult(f"no methods_status.json under {d}")
        with open(status_path) as fh:
            status = json.load(fh)
        meta_path = os.path.join(d, "run_meta.json")
        walls = {}
        if os.path.isfile(meta_path):
            with open(meta_path) as fh:
                walls = json.load(fh).get("wall_times", {})
        found = False
        for method in sorted(status):
            metrics_path = os.path.join(d, method, "metrics.json")
            if not os.path.isfile(metrics_path):
                continue
            with open(metrics_path) as fh:
                payload = json.load(fh)
            bundle = payload.get(method)
            if bundle is None:
                continue
            found = True
            rows.append(
                {
                    "run": d,
                    "method": method,
                    "l2_error": bundle.get("l2_error"),
                    "psnr": bundle.get("psnr"),
                    "ssim": bundle.get("ssim"),
                    "wall_time_s": walls.get(method),
                }
            )
        if not found:
            raise MissingResult(f"no method metrics under {d}")
    os.makedirs(out_dir, exist_ok=True)
    _write_json(os.path.join(out_dir, "comparison.json"), rows)
    with open(
        os.path.join(out_dir, "comparison.csv"), "w", encoding="utf-8"
    ) as fh:
        fh.write(COMPARISON_HEADER + "\n")
        for row in rows:
            fh.write(
                ", ".join(
                    mr._fmt(row[k])
                    for k in (
                        "run",
                        "method",
                        "l2_error",
                        "psnr",
                        "ssim",
                        "wall_time_s",
                    )
                )
                + "\n"
            )
    print(f"comparison over {len(result_dirs)} runs written to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Self-test: site moments vs an independent quadrature library


def _quad_moments(weight, lo, hi, points):
    import warnings

    from scipy.integrate import IntegrationWarning, quad

    kw = dict(limit=400, epsabs=0.0, epsrel=1e-10)
    inner = [p for p in points if lo < p < hi] or None
    with warnings.catch_warnings():
        # accuracy is gated by the final tolerance check, not quad's estimate
        warnings.simplefilter("ignore", IntegrationWarning)
        z = quad(weight, lo, hi, points=inner, **kw)[0]
        m1 = quad(lambda u: u * weight(u), lo, hi, points=inner, **kw)[0] / z
        m2 = quad(lambda u: u * u * weight(u), lo, hi, points=inner, **kw)[0] / z
    return m1, m2 - m1 * m1


def _poisson_tilted_mode(y, r, m, s2):
    """Stationary point of y*log(u+r) - (u+r) - (u-m)^2/(2 s2): the positive
    root of a quadratic in u.  Used to anchor the quadrature subdivision."""
    b = s2 - m + r
    c = s2 * y - r * (s2 - m)
    return 0.5 * (-b + math.sqrt(b * b + 4.0 * c)) if b * b + 4.0 * c > 0 else m


def selftest_cases():
    poisson = []
    for y in (0, 1, 3, 10, 40):
        for r, b in ((0.0, 0.0), (0.5, 0.0), (0.5, -0.5)):
            for m, s2 in ((-1.0, 0.5), (2.0, 4.0)):
                poisson.append((y, r, b, m, s2))
    laplace = []
    for alpha in (0.3, 1.0, 5.0):
        for mu, s2 in (
            (0.0, 1.0),
            (0.7, 0.25),
            (3.0, 9.0),
            (-2.0, 4.0),
            (0.2, 0.04),
            (-0.5, 1.0),
            (5.0, 0.5),
            (1.5, 2.0),
            (-4.0, 0.25),
        ):
            laplace.append((mu, s2, alpha))
    return poisson, laplace


def cmd_selftest():
    from math import lgamma

    from .site_laplace import LaplaceSiteInput, laplace_site_moments
    from .site_poisson import PoissonSiteInput, poisson_site_moments

    poisson, laplace = selftest_cases()
    failures = []
    total = 0

    def check(tag, got, want, tol=1e-6):
        rel = abs(got - want) / max(abs(want), 1e-300)
        if rel > tol:
            failures.append(f"{tag}: got {got!r}, quadrature {want!r}, rel {rel:.2e}")

    for y, r, b, m, s2 in poisson:
        total += 1
        sd = math.sqrt(s2)

        def weight(u, y=y, r=r, m=m, sd=sd):
            rate = u + r
            if rate <= 0.0:
                return 0.0 if y > 0 else math.exp(-0.5 * ((u - m) / sd) ** 2)
            logw = y * math.log(rate) - rate - lgamma(y + 1)
            return math.exp(logw - 0.5 * ((u - m) / sd) ** 2)

        mode = _poisson_tilted_mode(y, r, m, s2)
        hi = max(m + 12 * sd, y + r + 12 * math.sqrt(y + 1.0), b + 1.0)
        width = 1.0 / math.sqrt(y / max(mode + r, 0.1) ** 2 + 1.0 / s2)
        mean, var = _quad_moments(
            weight, b, hi, [m, mode, mode - 4 * width, mode + 4 * width]
        )
        tm = poisson_site_moments(PoissonSiteInput(m=m, sigma2=s2, y=y, r=r, b=b))
        tag = f"poisson(y={y}, r={r}, b={b}, m={m}, s2={s2})"
        check(tag + " mean", tm.s_bar, mean)
        check(tag + " var", tm.c_s, var)

    for mu, s2, alpha in laplace:
        total += 1
        sd = math.sqrt(s2)

        def weight(u, mu=mu, sd=sd, alpha=alpha):
            return math.exp(-alpha * abs(u) - 0.5 * ((u - mu) / sd) ** 2)

        lo = min(mu, 0.0) - 14 * sd
        hi = max(mu, 0.0) + 14 * sd
        mean, var = _quad_moments(weight, lo, hi, [0.0, mu])
        tm = laplace_site_moments(LaplaceSiteInput(mu=mu, sigma2=s2, alpha=alpha))
        tag = f"laplace(mu={mu}, s2={s2}, alpha={alpha})"
        check(tag + " mean", tm.s_bar, mean)
        check(tag + " var", tm.c_s, var)

    if failures:
        for line in failures:
            print("FAIL " + line, file=sys.stderr)
        print(f"selftest: {len(failures)} of {total} tuples out of tolerance")
        return NUMERICAL_EXIT
    print(f"selftest: {total} quadrature tuples within 1e-6")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--problem", choices=["phillips", "tomo"])
    p.add_argument("--n", type=int)
    p.add_argument("--phantom", choices=["disks", "bars"])
    p.add_argument("--size", type=int)
    p.add_argument("--n-angles", dest="n_angles", type=int)
    p.add_argument("--n-detectors", dest="n_detectors", type=int)
    p.add_argument("--constraint", choices=["C2", "C3"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--count-scale", dest="count_scale", type=float)
    p.add_argument("--background", type=float)
    p.add_argument("--parameterization", choices=["natural", "moment"])
    p.add_argument("--max-sweeps", dest="max_sweeps", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--methods", help="comma-separated subset of ep,map,laplace,mcmc")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--mcmc-chain-length", dest="mcmc_chain_length", type=int)
    p.add_argument("--mcmc-burn-in", dest="mcmc_burn_in", type=int)
    p.add_argument(
        "--parallel", action="store_const", const=True, default=None,
        help="run requested methods concurrently",
    )


CONFIG_KEYS = tuple(RunConfig.__dataclass_fields__)


def _config_from_args(args):
    overrides = {k: getattr(args, k, None) for k in CONFIG_KEYS}
    return load_config(args.config, overrides)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="poissonep",
        description="Count-data inverse problems: generation, inference, comparison.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_gen = sub.add_parser("generate", help="build a problem bundle on disk")
    _add_config_flags(p_gen)
    p_inf = sub.add_parser("infer", help="run inference methods on a bundle")
    _add_config_flags(p_inf)
    p_inf.add_argument("--bundle", required=True, help="directory from `generate`")
    p_cmp = sub.add_parser("compare", help="tabulate metrics across result dirs")
    p_cmp.add_argument("dirs", nargs="+")
    p_cmp.add_argument("--out", required=True)
    sub.add_parser("selftest", help="site moments vs independent quadrature")
    args = parser.parse_args(argv)
    try:
        if args.command == "generate":
            return cmd_generate(_config_from_args(args))
        if args.command == "infer":
            return cmd_infer(_config_from_args(args), args.bundle)
        if args.command == "compare":
            return cmd_compare(args.dirs, args.out)
        return cmd_selftest()
    except (InitializationError, DomainError, DimensionMismatch, MissingResult) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return VALIDATION_EXIT
    except (PoissonEPError, IOFailure) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return NUMERICAL_EXIT


if __name__ == "__main__":
    sys.exit(main())
