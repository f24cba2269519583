"""Poisson site: base integrals, recursions, and production moments."""

import json
import math
import pathlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poissonep.errors import NonpositiveRatio
from poissonep.site_poisson import (
    PoissonSiteInput,
    _log_k_array,
    base_integrals,
    poisson_site_moments,
    ratio_L,
    recursive_I,
    select_scheme,
)

DATA_DIR = pathlib.Path(__file__).parent / "data"


def rel_err(got, want):
    return abs(got - want) / max(abs(want), 1e-300)


class TestSelectScheme:
    # eta = (sigma2 - m + b)/sqrt(2 sigma2); with sigma2 = 2, b = 0 this is
    # (2 - m)/2, so m = 2 - 2*eta hits any target value
    def inp(self, eta):
        return PoissonSiteInput(m=2.0 - 2.0 * eta, sigma2=2.0, y=1, r=0.0, b=0.0)

    def test_boundaries(self):
        assert select_scheme(self.inp(4.99)) == 1
        assert select_scheme(self.inp(-10.0)) == 1
        assert select_scheme(self.inp(5.0)) == 2
        assert select_scheme(self.inp(26.0)) == 2
        assert select_scheme(self.inp(26.001)) == 3
        assert select_scheme(self.inp(100.0)) == 3


class TestBaseIntegrals:
    def test_half_normal(self):
        # N(0,1) truncated at 0: I0 = 1/2, I1 = 1/sqrt(2 pi), I2 = 1/2
        inp = PoissonSiteInput(m=1.0, sigma2=1.0, y=0, r=0.0, b=0.0)
        i0, i1, i2, normalized = base_integrals(inp)
        assert not normalized
        assert abs(i0 - 0.5) < 1e-15
        assert abs(i1 - 1.0 / math.sqrt(2.0 * math.pi)) < 1e-15
        assert abs(i2 - 0.5) < 1e-15

    def test_against_quadrature(self):
        from oracles import poisson_power_integral_mp

        # deep-tail cases lose a couple of digits to cancellation between
        # the gaussian and erfc terms of I1/I2 — that is a property of the
        # closed form itself, so the tolerance loosens with eta
        for m, sigma2, r, b, tol in [
            (3.0, 2.0, 0.2, 0.0, 1e-13),
            (-1.0, 0.5, 0.0, 0.0, 1e-13),
            (0.0, 1.0, 1.0, -1.0, 1e-13),
            (-40.0, 2.0, 0.0, 0.0, 1e-10),   # scheme 2 territory, eta ~ 21
        ]:
            inp = PoissonSiteInput(m=m, sigma2=sigma2, y=0, r=r, b=b)
            i0, i1, i2, normalized = base_integrals(inp)
            assert not normalized
            for order, got in ((0, i0), (1, i1), (2, i2)):
                want = float(poisson_power_integral_mp(order, m, sigma2, r, b))
                assert rel_err(got, want) < tol, (order, m, sigma2)

    def test_normalized_regime(self):
        from oracles import poisson_power_integral_mp

        # eta = (2 - m)/2 = 30 -> m = -58
        inp = PoissonSiteInput(m=-58.0, sigma2=2.0, y=0, r=0.0, b=0.0)
        i0, i1, i2, normalized = base_integrals(inp)
        assert normalized and i0 == 1.0
        ref0 = poisson_power_integral_mp(0, -58.0, 2.0, 0.0, 0.0)
        ref1 = poisson_power_integral_mp(1, -58.0, 2.0, 0.0, 0.0)
        ref2 = poisson_power_integral_mp(2, -58.0, 2.0, 0.0, 0.0)
        assert rel_err(i1, float(ref1 / ref0)) < 1e-11
        # the I2 closed form subtracts ~3600 down to ~2e-3 at this depth;
        # six digits of cancellation are built into the formula
        assert rel_err(i2, float(ref2 / ref0)) < 1e-9

    def test_deep_tail_does_not_underflow(self):
        # eta = 26 is the far edge of the direct regime; I0 must stay positive
        inp = PoissonSiteInput(m=2.0 - 52.0, sigma2=2.0, y=0, r=0.0, b=0.0)
        i0, *_ = base_integrals(inp)
        assert 0.0 < i0 < 1e-290


class TestRecursionPaths:
    def test_recursive_matches_ratio_path(self):
        # same ratios from the absolute forward recursion and the
        # reciprocal-ratio path, boundary-free cases; the ratio sequence
        # iterates in its stable direction only when m - sigma2 + r >= 0,
        # which bounds the overlap region
        for m in (0.5, 1.0, 5.0, 12.0):
            for sigma2 in (0.5, 1.0, 4.0):
                if m - sigma2 < 0.0:
                    continue
                for y in (1, 5, 17, 30):
                    inp = PoissonSiteInput(m=m, sigma2=sigma2, y=y, r=0.0, b=0.0)
                    iy, iy1, iy2 = recursive_I(inp, base_integrals(inp))
                    r1, r2 = ratio_L(inp)
                    assert rel_err(iy1 / iy, r1) < 1e-9, (m, sigma2, y)
                    assert rel_err(iy2 / iy, r2) < 1e-9, (m, sigma2, y)

    def test_recursive_boundary_term(self):
        from oracles import poisson_power_integral_mp

        # b = 0 with r > 0 keeps the boundary term alive
        inp = PoissonSiteInput(m=3.0, sigma2=2.0, y=7, r=0.2, b=0.0)
        iy, iy1, iy2 = recursive_I(inp, base_integrals(inp))
        for order, got in ((7, iy), (8, iy1), (9, iy2)):
            want = float(poisson_power_integral_mp(order, 3.0, 2.0, 0.2, 0.0))
            assert rel_err(got, want) < 1e-11, order

    def test_ratio_large_count(self):
        from oracles import poisson_power_integral_mp

        r1, r2 = ratio_L(PoissonSiteInput(m=10.0, sigma2=4.0, y=200, r=0.0, b=0.0))
        i200 = poisson_power_integral_mp(200, 10.0, 4.0, 0.0, 0.0)
        i201 = poisson_power_integral_mp(201, 10.0, 4.0, 0.0, 0.0)
        i202 = poisson_power_integral_mp(202, 10.0, 4.0, 0.0, 0.0)
        assert rel_err(r1, float(i201 / i200)) < 1e-9
        assert rel_err(r2, float(i202 / i200)) < 1e-9

    def test_ratio_shifted_bound(self):
        from oracles import poisson_power_integral_mp

        r1, r2 = ratio_L(PoissonSiteInput(m=0.0, sigma2=1.0, y=50, r=1.0, b=-1.0))
        i50 = poisson_power_integral_mp(50, 0.0, 1.0, 1.0, -1.0)
        i51 = poisson_power_integral_mp(51, 0.0, 1.0, 1.0, -1.0)
        i52 = poisson_power_integral_mp(52, 0.0, 1.0, 1.0, -1.0)
        assert rel_err(r1, float(i51 / i50)) < 1e-9
        assert rel_err(r2, float(i52 / i50)) < 1e-9

    def test_ratio_rejects_boundary_cases(self):
        with pytest.raises(NonpositiveRatio):
            ratio_L(PoissonSiteInput(m=1.0, sigma2=1.0, y=3, r=0.2, b=0.0))


class TestKernelArray:
    def test_against_quadrature(self):
        import mpmath as mp

        def k_ref(z0, j):
            # shifted form K_j(z0) = pdf(z0) * \int_0^inf w^j e^{-z0 w - w^2/2} dw
            # stays well-scaled even for huge |z0|
            with mp.workdps(60):
                z = mp.mpf(z0)
                const = -z * z / 2 - mp.log(2 * mp.pi) / 2
                if z0 > 1.0:
                    # rescale u = z*w so the integrand is O(1)-scaled
                    g = lambda u: u**j * mp.exp(-u - u * u / (2 * z * z))
                    val = mp.quad(g, [0, j + 1, j + 60, mp.inf], maxdegree=12)
                    return float(mp.log(val) - (j + 1) * mp.log(z) + const)
                f = lambda w: w**j * mp.exp(-z * w - w * w / 2)
                peak = (-z + mp.sqrt(z * z + 4 * (j + 1))) / 2
                sig = 1 / mp.sqrt(j / peak**2 + 1)
                lo = peak - 6 * sig
                if lo <= 0:
                    lo = peak / 4
                pts = [0, lo, peak, peak + 6 * sig, peak + 50 * sig, mp.inf]
                val = mp.quad(f, pts, maxdegree=10)
                return float(mp.log(val) + const)

        for z0 in (-2000.0, -30.0, -3.0, 0.0, 0.45, 3.0, 12.0, 2000.0):
            lk = _log_k_array(z0, 40)
            for j in (0, 1, 2, 7, 23, 40):
                want = float(k_ref(z0, j))
                # the additive slack of a few ulps matters only when the log
                # itself is ~1e6 (float64 quantum exceeds 1e-11 there)
                assert abs(lk[j] - want) < 1e-11 + 5e-15 * abs(want), (z0, j)


class TestPoissonSiteMoments:
    def test_zero_count_deep_regime(self):
        # truncation nine sigmas below the mass: exact Gaussian moments
        mom = poisson_site_moments(
            PoissonSiteInput(m=9.5, sigma2=1.0, y=0, r=0.5, b=-0.5)
        )
        assert abs(mom.s_bar - 8.5) < 1e-12
        assert abs(mom.c_s - 1.0) < 1e-12

    def test_zero_count_half_normal(self):
        mom = poisson_site_moments(
            PoissonSiteInput(m=1.0, sigma2=1.0, y=0, r=0.0, b=0.0)
        )
        assert abs(mom.s_bar - math.sqrt(2.0 / math.pi)) < 1e-13
        assert abs(mom.c_s - (1.0 - 2.0 / math.pi)) < 1e-13

    def test_moderate_case_vs_oracle(self):
        from oracles import poisson_tilted_moments_mp

        mom = poisson_site_moments(
            PoissonSiteInput(m=3.0, sigma2=2.0, y=7, r=0.2, b=0.0)
        )
        want_mean, want_var = poisson_tilted_moments_mp(3.0, 2.0, 7, 0.2, 0.0)
        assert rel_err(mom.s_bar, float(want_mean)) < 1e-9
        assert rel_err(mom.c_s, float(want_var)) < 1e-9

    def test_large_count_anchors(self):
        # frozen high-count values; the naive absolute recursion overflows
        # long before y = 1000
        mom = poisson_site_moments(
            PoissonSiteInput(m=10.0, sigma2=4.0, y=200, r=0.0, b=0.0)
        )
        assert rel_err(mom.s_bar, 31.4744047409077) < 1e-9
        assert rel_err(mom.c_s, 2.20827465097343) < 1e-9
        mom = poisson_site_moments(
            PoissonSiteInput(m=10.0, sigma2=4.0, y=1000, r=0.0, b=0.0)
        )
        assert rel_err(mom.s_bar, 66.3317121060491) < 1e-9
        assert rel_err(mom.c_s, 2.09424171650986) < 1e-9

    def test_mean_monotone_in_cavity_mean(self):
        for y, r, b in [(0, 0.0, 0.0), (4, 0.5, 0.0), (11, 1.0, -1.0)]:
            means = [
                poisson_site_moments(
                    PoissonSiteInput(m=m, sigma2=1.7, y=y, r=r, b=b)
                ).s_bar
                for m in np.linspace(-12.0, 12.0, 25)
            ]
            assert all(a < b_ for a, b_ in zip(means, means[1:])), (y, r, b)

    def test_frozen_case_sample(self):
        cases = json.loads((DATA_DIR / "poisson_site_cases.json").read_text())
        rng = np.random.default_rng(7)
        for idx in rng.choice(len(cases), size=120, replace=False):
            case = cases[int(idx)]
            inp = PoissonSiteInput(
                m=case["m"], sigma2=case["sigma2"], y=case["y"],
                r=case["r"], b=case["b"],
            )
            mom = poisson_site_moments(inp)
            tol = 1e-5 if select_scheme(inp) == 3 else 1e-7
            assert rel_err(mom.s_bar, case["s_bar"]) < tol, case
            assert rel_err(mom.c_s, case["c_s"]) < tol, case

    @settings(max_examples=150, deadline=None)
    @given(
        m=st.floats(-20.0, 20.0),
        log_s2=st.floats(math.log(1e-4), math.log(1e2)),
        y=st.integers(0, 300),
        r=st.sampled_from([0.0, 0.1, 1.0]),
        shift=st.booleans(),
    )
    def test_moment_domain_invariants(self, m, log_s2, y, r, shift):
        sigma2 = math.exp(log_s2)
        b = -r if shift else 0.0
        mom = poisson_site_moments(
            PoissonSiteInput(m=m, sigma2=sigma2, y=y, r=r, b=b)
        )
        assert math.isfinite(mom.s_bar) and math.isfinite(mom.c_s)
        assert mom.s_bar > b       # mean lies inside the support
        assert 0.0 < mom.c_s <= sigma2 * (1.0 + 1e-9) or y > 0
        assert mom.c_s > 0.0
