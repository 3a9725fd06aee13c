import math

import mpmath as mp
import numpy as np
import pytest

from fabsae.domain import AreaDatum, AreaTable, LinkingSpec, Method, Variant, lattice_contiguity
from fabsae.estimation import PrecisionPrior
from fabsae.intervals import (
    ConstantSpending,
    TabulatedSpending,
    area_intervals,
    bayes_interval,
    bayes_posterior,
    credible_coverage,
    direct_interval,
    direct_t_interval,
    eb_interval,
    expected_width_ratio_z,
    fab_t_endpoints,
    fab_t_interval,
    fab_z_endpoints,
    fab_z_interval,
    g,
    g_inverse,
    g_inverse_logit,
    g_logit,
    optimal_s_z,
    optimal_w_t,
    predictive_acceptance,
    predictive_acceptance_adaptive,
    tabulate_w_t,
    theta_grid,
)
from fabsae.linking import NormalPrior

mp.mp.dps = 30
Z975 = 1.959963984540054


def mp_ninv(p):
    p = mp.mpf(p)
    if p > 0.5:
        return -mp_ninv(1 - p)
    x0 = -mp.sqrt(-2 * mp.log(p))
    return mp.findroot(lambda x: mp.log(mp.ncdf(x)) - mp.log(p), x0)


def mp_bisect(f, a=-1500, b=1500, iters=250):
    a, b = mp.mpf(a), mp.mpf(b)
    fa = f(a)
    for _ in range(iters):
        c = (a + b) / 2
        fc = f(c)
        if (fc > 0) == (fa > 0):
            a, fa = c, fc
        else:
            b = c
    return (a + b) / 2


def mp_fab_z(y, sigma, mu, tau2, alpha=0.05):
    """Endpoints from the defining root equations, solved for logit(omega) in mpmath."""
    y, sigma, mu, tau2, alpha = map(mp.mpf, (y, sigma, mu, tau2, alpha))

    def split(t):
        return 1 / (1 + mp.e ** (-t)), 1 / (1 + mp.e**t)  # omega, 1 - omega

    def lo_eq(t):
        om, om_c = split(t)
        theta = y + sigma * mp_ninv(alpha * om_c)
        return mp_ninv(alpha * om) - mp_ninv(alpha * om_c) - 2 * sigma * (theta - mu) / tau2

    def hi_eq(t):
        om, om_c = split(t)
        theta = y - sigma * mp_ninv(alpha * om)
        return mp_ninv(alpha * om) - mp_ninv(alpha * om_c) - 2 * sigma * (theta - mu) / tau2

    t_lo, t_hi = mp_bisect(lo_eq), mp_bisect(hi_eq)
    return (
        float(y + sigma * mp_ninv(alpha * split(t_lo)[1])),
        float(y - sigma * mp_ninv(alpha * split(t_hi)[0])),
    )


class TestDirectAndBayes:
    def test_direct(self):
        iv = direct_interval(1.0, 2.0)
        assert iv.lower == pytest.approx(1 - 2 * Z975, abs=1e-12)
        assert iv.upper == pytest.approx(1 + 2 * Z975, abs=1e-12)
        assert iv.method is Method.DIRECT

    def test_direct_t(self):
        iv = direct_t_interval(0.0, 1.5, 4)
        assert iv.upper == pytest.approx(1.5 * 2.7764451051977987, abs=1e-9)

    def test_bayes(self):
        assert bayes_posterior(2.0, 1.0, 0.0, 1.0) == (1.0, 0.5)
        iv = bayes_interval(2.0, 1.0, NormalPrior(0.0, 1.0))
        assert iv.width == pytest.approx(2 * Z975 * math.sqrt(0.5), abs=1e-12)

    def test_flat_prior_is_direct(self):
        assert bayes_posterior(3.0, 2.0, -10.0, math.inf) == (3.0, 2.0)

    def test_credible_coverage_oracle(self):
        ref = float(2 * mp.ncdf(mp.mpf(Z975) * mp.sqrt(2)) - 1)
        assert credible_coverage(0.0, 1.0, 1.0) == pytest.approx(ref, abs=1e-12)
        assert credible_coverage(0.0, 1.0, 1.0) == pytest.approx(0.99443, abs=1e-5)

    def test_credible_coverage_mc(self):
        rng = np.random.default_rng(0)
        theta, sigma, tau2 = 1.2, 1.0, 0.5
        y = theta + sigma * rng.normal(size=200_000)
        mean, var = bayes_posterior(y, sigma**2, 0.0, tau2)
        cover = np.mean(np.abs(mean - theta) <= Z975 * np.sqrt(var))
        assert cover == pytest.approx(credible_coverage(theta, sigma, tau2), abs=0.004)

    def test_bad_alpha(self):
        with pytest.raises(ValueError):
            direct_interval(0.0, 1.0, alpha=1.0)


class TestG:
    def test_oracle_value(self):
        ref = float(mp_ninv(mp.mpf("0.0375")) - mp_ninv(mp.mpf("0.0125")))
        assert g(0.75, 0.05) == pytest.approx(ref, abs=1e-12)
        assert g(0.75, 0.05) == pytest.approx(0.46094, abs=1e-5)

    def test_symmetry_and_center(self):
        assert g(0.5, 0.1) == 0.0
        om = np.linspace(0.01, 0.99, 21)
        assert np.allclose(g(om, 0.05), -g(1 - om, 0.05), atol=1e-13)
        assert np.all(np.diff(g(om, 0.05)) > 0)
        assert g(0.0, 0.05) == -math.inf and g(1.0, 0.05) == math.inf

    def test_logit_form(self):
        for t in [-30.0, -8.0, -0.5, 0.0, 2.0, 20.0]:
            om = 1 / (1 + mp.e ** (-mp.mpf(t)))
            ref = float(mp_ninv(mp.mpf("0.05") * om) - mp_ninv(mp.mpf("0.05") * (1 - om)))
            assert g_logit(t, 0.05) == pytest.approx(ref, rel=1e-12, abs=1e-13)

    def test_inverse_round_trip(self):
        x = np.linspace(-30, 30, 121)
        assert np.allclose(g_logit(g_inverse_logit(x, 0.05), 0.05), x, atol=1e-9)
        assert g_inverse(0.0, 0.05) == pytest.approx(0.5, abs=1e-14)
        om = np.linspace(1e-4, 1 - 1e-4, 50)
        assert np.allclose(g_inverse(g(om, 0.05), 0.05), om, atol=1e-10)


class TestFabZ:
    @pytest.mark.parametrize("y,mu,tau2", [(0.3, 0.0, 1.0), (4.0, 0.0, 0.5), (-2.5, 1.0, 3.0), (0.0, 0.0, 0.1)])
    def test_endpoints_match_mpmath(self, y, mu, tau2):
        lo, hi = mp_fab_z(y, 1.0, mu, tau2)
        iv = fab_z_interval(y, 1.0, NormalPrior(mu, tau2), tol=1e-12)
        assert iv.lower == pytest.approx(lo, abs=1e-8)
        assert iv.upper == pytest.approx(hi, abs=1e-8)
        vlo, vhi = fab_z_endpoints(y, 1.0, mu, tau2)
        assert float(vlo) == pytest.approx(lo, abs=1e-9)
        assert float(vhi) == pytest.approx(hi, abs=1e-9)

    def test_equivariance(self):
        base = fab_z_interval(0.7, 1.0, NormalPrior(0.0, 2.0))
        shifted = fab_z_interval(5.7, 1.0, NormalPrior(5.0, 2.0))
        scaled = fab_z_interval(2.1, 3.0, NormalPrior(0.0, 18.0))
        assert shifted.lower == pytest.approx(base.lower + 5, abs=1e-8)
        assert scaled.upper == pytest.approx(3 * base.upper, abs=1e-7)

    def test_reflection(self):
        a = fab_z_interval(1.3, 1.0, NormalPrior(0.0, 1.0))
        b = fab_z_interval(-1.3, 1.0, NormalPrior(0.0, 1.0))
        assert a.lower == pytest.approx(-b.upper, abs=1e-9)

    def test_flat_prior_limit(self):
        lo, hi = fab_z_endpoints(2.0, 1.5, 0.0, math.inf)
        assert (lo, hi) == pytest.approx((2 - 1.5 * Z975, 2 + 1.5 * Z975), abs=1e-12)
        iv = fab_z_interval(2.0, 1.0, NormalPrior(0.0, 1e10))
        assert iv.lower == pytest.approx(2 - Z975, abs=1e-4)

    def test_narrower_near_prior_mean(self):
        assert fab_z_interval(0.0, 1.0, NormalPrior(0.0, 0.5)).width < 2 * Z975

    def test_vectorized_matches_scalar(self):
        ys = np.linspace(-6, 6, 13)
        lo, hi = fab_z_endpoints(ys, 1.0, 0.5, 1.5)
        for y, l_, h_ in zip(ys, lo, hi):
            iv = fab_z_interval(y, 1.0, NormalPrior(0.5, 1.5), tol=1e-12)
            assert (iv.lower, iv.upper) == pytest.approx((l_, h_), abs=1e-8)

    @pytest.mark.parametrize("theta", [-3.0, 0.0, 0.8, 5.0])
    def test_coverage_mc(self, theta):
        rng = np.random.default_rng(int(10 * theta) + 50)
        n = 40_000
        y = theta + rng.normal(size=n)
        lo, hi = fab_z_endpoints(y, 1.0, 0.0, 1.0)
        cover = np.mean((lo <= theta) & (theta <= hi))
        assert abs(cover - 0.95) < 4 * math.sqrt(0.95 * 0.05 / n)

    def test_expected_width_ratio(self):
        r = expected_width_ratio_z(0.5)
        assert 0.7 < r < 1.0
        # Monte Carlo over the prior predictive
        rng = np.random.default_rng(1)
        y = rng.normal(size=100_000) * math.sqrt(1.5)
        lo, hi = fab_z_endpoints(y, 1.0, 0.0, 0.5)
        assert np.mean(hi - lo) / (2 * Z975) == pytest.approx(r, abs=0.002)
        assert expected_width_ratio_z(1e4) == pytest.approx(1.0, abs=1e-3)

    def test_spending_monotone(self):
        s = optimal_s_z(0.0, 1.0, 1.0)
        th = np.linspace(-10, 10, 101)
        assert np.all(np.diff(s.logit(th)) > 0) and s(0.0) == pytest.approx(0.5)


class TestSpendingValidation:
    def test_tabulated(self):
        with pytest.raises(ValueError):
            TabulatedSpending(np.array([0.0, 1.0]), np.array([0.6, 0.4]))
        with pytest.raises(ValueError):
            TabulatedSpending(np.array([1.0, 0.0]), np.array([0.4, 0.6]))
        s = TabulatedSpending(np.array([0.0, 1.0]), np.array([0.2, 0.6]))
        assert s(-5.0) == 0.2 and s(0.5) == pytest.approx(0.4) and s(9.0) == 0.6

    def test_constant(self):
        assert ConstantSpending(0.05)(3.0) == 0.5


PRIOR = NormalPrior(0.0, 1.0)
PREC = PrecisionPrior(6.0, 5.0)


class TestFabT:
    def test_rule_matches_adaptive(self):
        # the 48-node rule converges slowly in the chi-square direction; 1e-6 is its accuracy here
        for theta, w in [(0.0, 0.5), (1.5, 0.8), (-3.0, 0.1), (0.4, 0.999)]:
            a = float(predictive_acceptance(theta, w, PRIOR, PREC, 6))
            b = predictive_acceptance_adaptive(theta, w, PRIOR, PREC, 6)
            assert a == pytest.approx(b, abs=2e-6)

    def test_w_half_at_prior_mean(self):
        assert optimal_w_t(0.0, PRIOR, PREC, 5) == pytest.approx(0.5, abs=1e-5)
        w = optimal_w_t(np.array([-1.0, 1.0]), PRIOR, PREC, 5)
        assert w[0] == pytest.approx(1 - w[1], abs=1e-5)

    def test_z_limit(self):
        # many dof and a concentrated precision prior: the known-variance solution
        prec = PrecisionPrior(1e6, 1e6)
        th = np.array([-1.0, -0.3, 0.6, 2.0])
        wt = optimal_w_t(th, PRIOR, prec, 1e5)
        assert np.allclose(wt, optimal_s_z(0.0, 1.0, 1.0)(th), atol=2e-3)

    def test_tabulation_monotone_far_out(self):
        # near-flat prior: acceptance at the grid ends is ~1e-14 and must not be lost to cancellation
        prior = NormalPrior(0.0, 1e8)
        grid = theta_grid(prior, PREC, 7)
        w = optimal_w_t(grid, prior, PREC, 7)
        assert np.all(np.diff(w) >= -1e-6)
        assert np.allclose(tabulate_w_t(prior, PREC, 7).w, w, atol=1e-6)

    def test_flat_prior_is_direct_t(self):
        for tau2 in (math.inf, 1e8):
            iv = fab_t_interval(1.0, 0.8, 7, NormalPrior(0.0, tau2), PREC).interval
            ref = direct_t_interval(1.0, 0.8, 7)
            assert iv.lower == pytest.approx(ref.lower, abs=1e-4)
            assert iv.upper == pytest.approx(ref.upper, abs=1e-4)

    def test_tabulated_monotone(self):
        s = tabulate_w_t(PRIOR, PREC, 4)
        assert np.all(np.diff(s.w) >= 0)
        assert 0 < s.w_min < 0.5 < s.w_max < 1

    def test_endpoints_solve_root_equations(self):
        s = tabulate_w_t(PRIOR, PREC, 4)
        from scipy import stats

        lo, hi = fab_t_endpoints(np.array([0.7]), np.array([1.1]), 4, s)
        assert lo[0] == pytest.approx(0.7 + 1.1 * stats.t.ppf(0.05 * (1 - s(lo[0])), 4), abs=1e-8)
        assert hi[0] == pytest.approx(0.7 + 1.1 * stats.t.ppf(1 - 0.05 * s(hi[0]), 4), abs=1e-8)

    @pytest.mark.parametrize("theta", [0.0, 2.5])
    def test_coverage_mc(self, theta):
        rng = np.random.default_rng(7 + int(theta))
        n, q, sigma = 30_000, 4, 0.9
        s = tabulate_w_t(PRIOR, PREC, q)
        y = theta + sigma * rng.normal(size=n)
        sh = sigma * np.sqrt(rng.chisquare(q, n) / q)
        lo, hi = fab_t_endpoints(y, sh, q, s)
        cover = np.mean((lo <= theta) & (theta <= hi))
        assert abs(cover - 0.95) < 4 * math.sqrt(0.95 * 0.05 / n)

    def test_shorter_than_direct_on_average(self):
        rng = np.random.default_rng(3)
        q = 4
        s = tabulate_w_t(PRIOR, PREC, q)
        sigma = 1 / np.sqrt(rng.gamma(PREC.shape, 1 / PREC.rate, 5000))
        theta = rng.normal(size=5000)
        y = theta + sigma * rng.normal(size=5000)
        sh = sigma * np.sqrt(rng.chisquare(q, 5000) / q)
        lo, hi = fab_t_endpoints(y, sh, q, s)
        direct = 2 * sh * 2.7764451051977987
        assert np.mean(hi - lo) < np.mean(direct)


def _table(rng, m=16, estimated=False):
    W = lattice_contiguity(4, 4)
    theta = rng.normal(size=m)
    areas = []
    for i in range(m):
        if estimated:
            v = float(rng.chisquare(5) / 5 * 0.5)
            areas.append(AreaDatum(f"a{i}", float(theta[i] + rng.normal() * 0.7), sigma2_hat=v, dof=5, n=6, x=(float(i),)))
        else:
            areas.append(AreaDatum(f"a{i}", float(theta[i] + rng.normal()), sigma2=1.0, x=(float(i),)))
    return AreaTable(tuple(areas), W)


class TestAreaIntervals:
    def test_methods(self):
        rng = np.random.default_rng(0)
        t = _table(rng)
        spec = LinkingSpec(Variant.FULL)
        for method in ("direct", "bayes", "eb", "fab-z"):
            rows = area_intervals(t, spec, method)
            assert len(rows) == t.m
            assert all(r.lower < r.upper for r in rows)
        d = area_intervals(t, spec, "direct")
        assert d[0].width == pytest.approx(2 * Z975, abs=1e-12)

    def test_fab_t_rows(self):
        rng = np.random.default_rng(1)
        t = _table(rng, estimated=True)
        rows = area_intervals(t, LinkingSpec(Variant.EXCHANGEABLE), "fab-t")
        assert all(r.method == "fab-t" and r.lower < r.y < r.upper or r.note for r in rows)
        with pytest.raises(ValueError):
            area_intervals(_table(rng), LinkingSpec(Variant.EXCHANGEABLE), "fab-t")

    def test_fab_z_with_estimated_variance_is_noted(self):
        rng = np.random.default_rng(2)
        rows = area_intervals(_table(rng, estimated=True), LinkingSpec(Variant.EXCHANGEABLE), "fab-z")
        assert all("treated as known" in r.note for r in rows)

    def test_ineligible_falls_back(self):
        rng = np.random.default_rng(3)
        t = _table(rng)
        areas = list(t.areas)
        a = areas[2]
        areas[2] = AreaDatum(a.id, a.y, sigma2=1.0, x=a.x, eligible=False)
        rows = area_intervals(AreaTable(tuple(areas), t.W), LinkingSpec(Variant.SPATIAL), "fab-z")
        assert rows[2].method == "direct" and rows[2].note == "ineligible"
        assert rows[3].method == "fab-z"

    def test_single_fit_runs(self):
        rng = np.random.default_rng(4)
        rows = area_intervals(_table(rng), LinkingSpec(Variant.SPATIAL), "fab-z", single_fit=True)
        assert all(math.isfinite(r.prior_tau2) for r in rows)

    def test_eb_interval_structure(self):
        rng = np.random.default_rng(5)
        res = eb_interval(_table(rng), LinkingSpec(Variant.COVARIATE))
        assert np.all(res.var <= 1.0 + 1e-12) and len(res.intervals) == 16
