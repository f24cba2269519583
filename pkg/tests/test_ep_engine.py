import json
import math
from types import SimpleNamespace

import numpy as np
import pytest

from poissonep import ep_engine as ep
from poissonep import gaussian_core as gc
from poissonep.errors import (
    InitializationError,
    NegativeCavityVariance,
    SiteSkipped,
)
from poissonep.site_laplace import LaplaceSiteInput, laplace_site_moments
from poissonep.site_poisson import PoissonSiteInput, poisson_site_moments


def random_natural_state(rng, n, sites=()):
    m = rng.standard_normal((n, n))
    lam = m @ m.T + n * np.eye(n)
    R = np.linalg.cholesky(lam).T
    h = rng.standard_normal(n)
    return ep.EPState(
        param=gc.NaturalParam(h=h, chol_Lambda=np.ascontiguousarray(R)),
        sites=list(sites),
    )


def dense_cavity(lam, h, u, l1, l2):
    C = np.linalg.inv(lam)
    mu = C @ h
    c = float(u @ C @ u)
    denom = 1.0 - c * l2
    return (float(u @ mu) - c * l1) / denom, c / denom


def small_problem(rng, n=12, m1=8, alpha=1.0, constraint="C2"):
    A = rng.uniform(0.0, 1.0, size=(m1, n))
    x_true = rng.uniform(0.5, 2.0, size=n)
    r = np.full(m1, 0.1)
    y = rng.poisson(A @ x_true + r)
    L = np.zeros((n - 1, n))
    for i in range(n - 1):
        L[i, i], L[i, i + 1] = -1.0, 1.0
    return SimpleNamespace(A=A, r=r, y=y, L=L, alpha=alpha, constraint=constraint)


class TestCavityMarginal:
    def test_worked_scalar_example(self):
        sites = [ep.SiteRecord(u=np.array([1.0, 0.0, 0.0]), kind=ep.NoopTestKind())]
        sites[0].lambda1, sites[0].lambda2 = 0.5, 0.25
        state = ep.EPState(
            param=gc.NaturalParam(h=np.ones(3), chol_Lambda=np.eye(3)), sites=sites
        )
        mean, var = ep.cavity_marginal(state, 0)
        assert abs(var - 4.0 / 3.0) < 1e-15
        assert abs(mean - 2.0 / 3.0) < 1e-15

    def test_vacuous_site_returns_current_marginal(self):
        rng = np.random.default_rng(0)
        for param_kind in ("natural", "moment"):
            state = random_natural_state(rng, 7)
            if param_kind == "moment":
                state.param = gc.to_moment(state.param)
            u = rng.standard_normal(7)
            state.sites = [ep.SiteRecord(u=u, kind=ep.NoopTestKind())]
            mean, var = ep.cavity_marginal(state, 0)
            c, marg = ep._marginal_along(state.param, u)
            assert abs(mean - marg) < 1e-12 * max(1.0, abs(marg))
            assert abs(var - c) < 1e-12 * c

    def test_matches_dense_construction(self):
        rng = np.random.default_rng(1)
        state = random_natural_state(rng, 10)
        lam = state.param.precision()
        h = state.param.h
        for _ in range(20):
            u = rng.standard_normal(10)
            l1 = rng.standard_normal()
            # keep the cavity well-defined: lambda2 below 1/c
            c = float(u @ np.linalg.inv(lam) @ u)
            l2 = rng.uniform(-2.0, 0.8 / c)
            state.sites = [ep.SiteRecord(u=u, kind=ep.NoopTestKind())]
            state.sites[0].lambda1, state.sites[0].lambda2 = l1, l2
            mean, var = ep.cavity_marginal(state, 0)
            want_mean, want_var = dense_cavity(lam, h, u, l1, l2)
            assert abs(mean - want_mean) < 1e-9 * max(1.0, abs(want_mean))
            assert abs(var - want_var) < 1e-9 * want_var

    def test_guard_raises(self):
        sites = [ep.SiteRecord(u=np.array([1.0, 0.0]), kind=ep.NoopTestKind())]
        sites[0].lambda2 = 1.0  # c = 1 -> denominator exactly 0
        state = ep.EPState(
            param=gc.NaturalParam(h=np.zeros(2), chol_Lambda=np.eye(2)), sites=sites
        )
        with pytest.raises(NegativeCavityVariance):
            ep.cavity_marginal(state, 0)


class TestSiteUpdate:
    def test_gaussian_pseudo_site_moment_matching(self):
        rng = np.random.default_rng(2)
        for param_kind in ("natural", "moment"):
            state = random_natural_state(rng, 5)
            if param_kind == "moment":
                state.param = gc.to_moment(state.param)
            u = rng.standard_normal(5)
            kind = ep.GaussianTestKind(m0=0.7, v0=2.0)
            state.sites = [ep.SiteRecord(u=u, kind=kind)]
            cav_mean, cav_var = ep.cavity_marginal(state, 0)
            want = ep._gaussian_test_tilt(kind, cav_mean, cav_var)
            ep.site_update(state, 0)
            c, marg = ep._marginal_along(state.param, u)
            assert abs(marg - want.s_bar) < 1e-10 * max(1.0, abs(want.s_bar))
            assert abs(c - want.c_s) < 1e-10 * want.c_s

    def test_noop_tilt_leaves_state_fixed(self):
        rng = np.random.default_rng(3)
        state = random_natural_state(rng, 6)
        R0 = state.param.chol_Lambda.copy()
        h0 = state.param.h.copy()
        state.sites = [
            ep.SiteRecord(u=rng.standard_normal(6), kind=ep.NoopTestKind())
        ]
        ep.site_update(state, 0)
        assert np.max(np.abs(state.param.chol_Lambda - R0)) < 1e-12
        assert np.max(np.abs(state.param.h - h0)) < 1e-12
        assert abs(state.sites[0].lambda1) < 1e-12
        assert abs(state.sites[0].lambda2) < 1e-12

    def test_poisson_site_matches_dense_formulas(self):
        rng = np.random.default_rng(4)
        for param_kind in ("natural", "moment"):
            state = random_natural_state(rng, 6)
            lam0 = state.param.precision()
            h0 = state.param.h.copy()
            if param_kind == "moment":
                state.param = gc.to_moment(state.param)
            u = rng.uniform(0.1, 1.0, size=6)
            state.sites = [
                ep.SiteRecord(u=u, kind=ep.PoissonKind(y=3, r=0.1, b=0.0))
            ]
            cav_mean, cav_var = dense_cavity(lam0, h0, u, 0.0, 0.0)
            tm = poisson_site_moments(
                PoissonSiteInput(m=cav_mean, sigma2=cav_var, y=3, r=0.1, b=0.0)
            )
            l1n = tm.s_bar / tm.c_s - cav_mean / cav_var
            l2n = 1.0 / tm.c_s - 1.0 / cav_var
            lam_n = lam0 + l2n * np.outer(u, u)
            h_n = h0 + l1n * u
            mu_n = np.linalg.solve(lam_n, h_n)
            cov_n = np.linalg.inv(lam_n)
            ep.site_update(state, 0)
            c, marg = ep._marginal_along(state.param, u)
            want_c = float(u @ cov_n @ u)
            want_m = float(u @ mu_n)
            assert abs(marg - want_m) < 1e-9 * max(1.0, abs(want_m))
            assert abs(c - want_c) < 1e-9 * want_c

    def test_laplace_site_fused_path_matches_dense_formulas(self):
        rng = np.random.default_rng(5)
        state = random_natural_state(rng, 6)
        lam0 = state.param.precision()
        h0 = state.param.h.copy()
        u = rng.standard_normal(6)
        state.sites = [ep.SiteRecord(u=u, kind=ep.LaplaceKind(alpha=1.3))]
        cav_mean, cav_var = dense_cavity(lam0, h0, u, 0.0, 0.0)
        tm = laplace_site_moments(
            LaplaceSiteInput(mu=cav_mean, sigma2=cav_var, alpha=1.3)
        )
        l1n = tm.s_bar / tm.c_s - cav_mean / cav_var
        l2n = 1.0 / tm.c_s - 1.0 / cav_var
        lam_n = lam0 + l2n * np.outer(u, u)
        h_n = h0 + l1n * u
        ep.site_update(state, 0)
        assert abs(state.sites[0].lambda1 - l1n) < 1e-9 * max(1.0, abs(l1n))
        assert abs(state.sites[0].lambda2 - l2n) < 1e-9 * max(1.0, abs(l2n))
        assert np.max(np.abs(state.param.precision() - lam_n)) < 1e-9
        assert np.max(np.abs(state.param.h - h_n)) < 1e-9

    def test_zero_direction_skipped(self):
        state = ep.EPState(
            param=gc.NaturalParam(h=np.zeros(3), chol_Lambda=np.eye(3)),
            sites=[
                ep.SiteRecord(u=np.zeros(3), kind=ep.PoissonKind(y=1, r=0.5, b=0.0))
            ],
        )
        with pytest.raises(SiteSkipped):
            ep.site_update(state, 0)

    def test_cavity_guard_becomes_skip(self):
        sites = [ep.SiteRecord(u=np.array([1.0, 0.0]), kind=ep.NoopTestKind())]
        sites[0].lambda2 = 1.0
        state = ep.EPState(
            param=gc.NaturalParam(h=np.zeros(2), chol_Lambda=np.eye(2)), sites=sites
        )
        with pytest.raises(SiteSkipped):
            ep.site_update(state, 0)


class TestRunSweeps:
    def test_zero_sites_returns_initial_state(self):
        prob = SimpleNamespace(
            A=np.zeros((0, 4)),
            r=np.zeros(0),
            y=np.zeros(0, dtype=int),
            L=np.zeros((0, 4)),
            alpha=1.0,
            constraint="C2",
        )
        cfg = ep.EPConfig(max_sweeps=4, tau=1e-2)
        state, report = ep.run_sweeps(prob, cfg)
        assert state.sweep_count == 0
        assert report.mu_deltas == []
        assert np.array_equal(state.param.h, np.zeros(4))
        assert np.array_equal(state.param.chol_Lambda, 0.1 * np.eye(4))

    def test_deterministic_under_seed(self):
        prob = small_problem(np.random.default_rng(6))
        cfg = ep.EPConfig(max_sweeps=4, seed=17)
        s1, _ = ep.run_sweeps(prob, cfg)
        s2, _ = ep.run_sweeps(prob, cfg)
        assert np.array_equal(
            ep.posterior_summary(s1).mean, ep.posterior_summary(s2).mean
        )
        assert np.array_equal(s1.param.chol_Lambda, s2.param.chol_Lambda)

    def test_dimension_mismatch_rejected(self):
        prob = small_problem(np.random.default_rng(7))
        prob.L = np.zeros((3, 5))  # wrong column count
        with pytest.raises(InitializationError):
            ep.run_sweeps(prob, ep.EPConfig())

    def test_lambda_reconstruction_after_each_sweep(self):
        prob = small_problem(np.random.default_rng(8), n=20, m1=15)
        cfg = ep.EPConfig(max_sweeps=1, tol=0.0, seed=3)
        sites = ep.build_sites(prob)
        state = ep.init_state(20, sites, cfg)
        for _ in range(4):
            state, _ = ep.run_state_sweeps(state, cfg)
            prec_err, h_err = ep.lambda_reconstruction_error(state, cfg.tau)
            assert prec_err < 1e-8
            assert h_err < 1e-8

    def test_natural_and_moment_agree(self):
        prob = small_problem(np.random.default_rng(9), n=15, m1=10)
        mus = {}
        for kind in ("natural", "moment"):
            cfg = ep.EPConfig(parameterization=kind, max_sweeps=6, seed=11)
            state, _ = ep.run_sweeps(prob, cfg)
            mus[kind] = ep.posterior_summary(state).mean
        assert np.max(np.abs(mus["natural"] - mus["moment"])) < 1e-6

    def test_gaussian_sites_converge_in_two_sweeps(self):
        # conjugate pseudo-sites reach their fixed point on the first
        # sweep, so the second sweep registers zero change and stops
        rng = np.random.default_rng(10)
        cfg = ep.EPConfig(max_sweeps=10, tol=1e-12, seed=1)
        sites = [
            ep.SiteRecord(
                u=rng.standard_normal(4),
                kind=ep.GaussianTestKind(m0=rng.standard_normal(), v0=1.5),
            )
            for _ in range(3)
        ]
        state = ep.init_state(4, sites, cfg)
        state, report = ep.run_state_sweeps(state, cfg)
        assert state.sweep_count == 2
        assert report.relative_change_last < 1e-12

    def test_zero_rows_skipped_and_counted(self):
        prob = small_problem(np.random.default_rng(12))
        prob.A[2, :] = 0.0
        prob.y[2] = 0
        cfg = ep.EPConfig(max_sweeps=3, tol=0.0, seed=2)
        state, report = ep.run_sweeps(prob, cfg)
        assert report.skipped.get("zero-direction") == 3  # once per sweep
        # the zero-direction site never acquires lambda mass
        assert state.sites[2].lambda1 == 0.0 and state.sites[2].lambda2 == 0.0

    def test_convergence_deltas_shrink(self):
        prob = small_problem(np.random.default_rng(13), n=16, m1=12)
        cfg = ep.EPConfig(max_sweeps=8, tol=0.0, seed=4)
        _, report = ep.run_sweeps(prob, cfg)
        assert report.mu_deltas[-1] == 0.0
        assert report.mu_deltas[0] > 100 * report.mu_deltas[-2] > 0.0
        assert all(d >= 0 and math.isfinite(d) for d in report.mu_deltas)
        assert all(d >= 0 and math.isfinite(d) for d in report.cov_deltas)


class TestPosteriorSummary:
    def test_standard_normal_band(self):
        state = ep.EPState(
            param=gc.NaturalParam(h=np.zeros(3), chol_Lambda=np.eye(3)), sites=[]
        )
        s = ep.posterior_summary(state)
        assert np.allclose(s.band_lower, -1.959964, atol=1e-12)
        assert np.allclose(s.band_upper, 1.959964, atol=1e-12)

    def test_diagonal_precision_band(self):
        state = ep.EPState(
            param=gc.NaturalParam(h=np.zeros(2), chol_Lambda=2.0 * np.eye(2)),
            sites=[],
        )
        s = ep.posterior_summary(state)
        assert np.allclose(np.sqrt(s.marginal_variances), 0.5)
        assert np.allclose(s.band_upper, 0.97998, atol=1e-5)

    def test_matches_dense_inversion(self):
        rng = np.random.default_rng(14)
        state = random_natural_state(rng, 8)
        cov = np.linalg.inv(state.param.precision())
        want_mean = cov @ state.param.h
        s = ep.posterior_summary(state)
        assert np.max(np.abs(s.marginal_variances - np.diag(cov))) < 1e-9
        assert np.max(np.abs(s.mean - want_mean)) < 1e-9
        # moment form of the same state agrees
        state.param = gc.to_moment(state.param)
        s2 = ep.posterior_summary(state)
        assert np.max(np.abs(s2.marginal_variances - s.marginal_variances)) < 1e-9


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        prob = small_problem(np.random.default_rng(15))
        cfg = ep.EPConfig(max_sweeps=3, seed=8)
        state, _ = ep.run_sweeps(prob, cfg)
        path = tmp_path / "state.json"
        ep.save_checkpoint(state, path)
        # parse-back through a generic JSON reader
        payload = json.loads(path.read_text())
        assert payload["parameterization"] == "natural"
        assert payload["n"] == 12
        restored = ep.load_checkpoint(path, ep.build_sites(prob))
        assert np.array_equal(restored.param.chol_Lambda, state.param.chol_Lambda)
        assert np.array_equal(restored.param.h, state.param.h)
        assert restored.sweep_count == state.sweep_count
        assert restored.rng_seed == state.rng_seed
        for a, b in zip(restored.sites, state.sites):
            assert a.lambda1 == b.lambda1 and a.lambda2 == b.lambda2

    def test_moment_round_trip(self, tmp_path):
        prob = small_problem(np.random.default_rng(16))
        cfg = ep.EPConfig(parameterization="moment", max_sweeps=2, seed=9)
        state, _ = ep.run_sweeps(prob, cfg)
        path = tmp_path / "state.json"
        ep.save_checkpoint(state, path)
        restored = ep.load_checkpoint(path, ep.build_sites(prob))
        assert np.array_equal(restored.param.chol_C, state.param.chol_C)
        assert np.array_equal(restored.param.mu, state.param.mu)

    def test_site_count_mismatch_rejected(self, tmp_path):
        prob = small_problem(np.random.default_rng(17))
        state, _ = ep.run_sweeps(prob, ep.EPConfig(max_sweeps=1))
        path = tmp_path / "state.json"
        ep.save_checkpoint(state, path)
        with pytest.raises(InitializationError):
            ep.load_checkpoint(path, ep.build_sites(prob)[:-1])


class TestConfig:
    def test_rejects_unknown_parameterization(self):
        with pytest.raises(InitializationError):
            ep.EPConfig(parameterization="dual")

    def test_rejects_bad_sweep_count(self):
        with pytest.raises(InitializationError):
            ep.EPConfig(max_sweeps=0)

    def test_rejects_bad_tau(self):
        with pytest.raises(InitializationError):
            ep.EPConfig(tau=0.0)
