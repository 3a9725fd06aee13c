import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fabsae import numerics as nm

mp.mp.dps = 30


def mp_norm_quantile(p):
    p = mp.mpf(p)
    return float(mp.findroot(lambda x: mp.ncdf(x) - p, mp.sqrt(2) * mp.erfinv(2 * p - 1)))


def mp_t_cdf(x, q):
    # regularized incomplete beta representation
    x, q = mp.mpf(x), mp.mpf(q)
    z = q / (q + x * x)
    tail = mp.betainc(q / 2, mp.mpf(1) / 2, 0, z, regularized=True) / 2
    return float(1 - tail if x > 0 else tail)


class TestNormal:
    def test_cdf_at_zero(self):
        assert nm.norm_cdf(0.0) == 0.5

    def test_quantile_matches_mpmath(self):
        for p in [1e-10, 1e-4, 0.025, 0.3, 0.5, 0.975, 1 - 1e-9]:
            assert nm.norm_quantile(p) == pytest.approx(mp_norm_quantile(p), rel=1e-13, abs=1e-13)

    def test_known_quantile(self):
        assert nm.norm_quantile(0.975) == pytest.approx(1.959963984540054, abs=1e-12)

    def test_infinite_sentinels(self):
        assert nm.norm_quantile(0.0) == -math.inf
        assert nm.norm_quantile(1.0) == math.inf

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            nm.norm_quantile(1.5)
        with pytest.raises(ValueError):
            nm.norm_quantile(float("nan"))

    @pytest.mark.parametrize("x", [0.5, 1.0, 2.0])
    def test_cdf_symmetry(self, x):
        assert nm.norm_cdf(-x) + nm.norm_cdf(x) == pytest.approx(1.0, abs=1e-15)

    def test_round_trip_grid(self):
        p = np.concatenate([np.geomspace(1e-8, 0.5, 200), 1 - np.geomspace(1e-8, 0.5, 200)])
        assert np.max(np.abs(nm.norm_cdf(nm.norm_quantile(p)) - p)) < 1e-12

    @given(st.floats(min_value=1e-8, max_value=1 - 1e-8))
    @settings(max_examples=200, deadline=None)
    def test_round_trip_property(self, p):
        assert abs(nm.norm_cdf(nm.norm_quantile(p)) - p) < 1e-12


class TestStudentT:
    def test_cdf_at_zero(self):
        for q in [1, 3.5, 40]:
            assert nm.t_cdf(0.0, q) == 0.5

    def test_quantile_oracle(self):
        assert nm.t_quantile(0.975, 4) == pytest.approx(2.7764451051977987, abs=1e-10)

    @pytest.mark.parametrize("x,q", [(-3.0, 1), (0.7, 2.5), (2.1, 7), (-0.2, 30)])
    def test_cdf_matches_incomplete_beta(self, x, q):
        assert nm.t_cdf(x, q) == pytest.approx(mp_t_cdf(x, q), rel=1e-12)

    def test_normal_limit(self):
        assert abs(nm.t_quantile(0.975, 1e6) - nm.norm_quantile(0.975)) < 1e-5

    def test_round_trip(self):
        p = np.geomspace(1e-8, 1 - 1e-8, 300)
        for q in [1, 4, 25]:
            assert np.max(np.abs(nm.t_cdf(nm.t_quantile(p, q), q) - p)) < 1e-10

    def test_rejects_bad_dof(self):
        with pytest.raises(ValueError):
            nm.t_cdf(0.0, 0)
        with pytest.raises(ValueError):
            nm.t_quantile(0.5, -1)


class TestPolygamma:
    def test_digamma_one(self):
        assert nm.digamma(1.0) == pytest.approx(-0.5772156649015329, abs=1e-14)

    def test_trigamma_one(self):
        assert nm.trigamma(1.0) == pytest.approx(math.pi**2 / 6, abs=1e-14)

    def test_recurrences(self):
        x = np.geomspace(0.1, 100, 50)
        assert np.max(np.abs(nm.digamma(x + 1) - nm.digamma(x) - 1 / x)) < 1e-12
        assert np.max(np.abs(nm.trigamma(x) - nm.trigamma(x + 1) - 1 / x**2)) < 1e-12

    def test_trigamma_is_derivative(self):
        for x in [0.3, 2.0, 17.0]:
            h = 1e-5 * x
            fd = (nm.digamma(x + h) - nm.digamma(x - h)) / (2 * h)
            assert fd == pytest.approx(nm.trigamma(x), rel=1e-7)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            nm.digamma(0.0)
        with pytest.raises(ValueError):
            nm.trigamma(-1.0)


class TestFindRoot:
    def test_linear(self):
        assert nm.find_root(lambda x: x - 1, (0.0, 2.0)) == pytest.approx(1.0, abs=1e-10)

    def test_normal_quantile(self):
        r = nm.find_root(lambda x: nm.norm_cdf(x) - 0.975, nm.Bracket(0.0, 10.0))
        assert r == pytest.approx(1.959963984540054, abs=1e-9)

    def test_cubic(self):
        assert abs(nm.find_root(lambda x: x**3, (-1.0, 2.0))) < 1e-9

    def test_invalid_bracket(self):
        with pytest.raises(nm.BracketError):
            nm.find_root(lambda x: x * x + 1, (-1.0, 1.0))
        with pytest.raises(nm.BracketError):
            nm.Bracket(2.0, 1.0)

    def test_widening_invariance(self):
        f = lambda x: math.tanh(x - 0.3)  # noqa: E731
        a = nm.find_root(f, (0.0, 1.0), tol=1e-13)
        b = nm.find_root(f, (-50.0, 80.0), tol=1e-13)
        assert a == pytest.approx(b, abs=1e-12)

    def test_vectorized(self):
        targets = np.linspace(-3, 3, 11)

        def f(x, idx):
            return np.sinh(x) - targets[idx]

        roots = nm.find_root_vec(f, np.full(11, -5.0), np.full(11, 5.0), tol=1e-13)
        assert np.allclose(roots, np.arcsinh(targets), atol=1e-12)

    def test_vectorized_bad_bracket(self):
        with pytest.raises(nm.BracketError):
            nm.find_root_vec(lambda x, i: x, np.array([1.0]), np.array([2.0]))


class TestIntegrate:
    def test_constant(self):
        assert nm.integrate(lambda x: 1.0, 0.0, 1.0) == pytest.approx(1.0, abs=1e-12)

    def test_normal_density(self):
        assert nm.integrate(nm.norm_pdf, -np.inf, np.inf) == pytest.approx(1.0, abs=1e-8)

    def test_gamma_density(self):
        assert nm.integrate(lambda x: x * math.exp(-x), 0.0, np.inf) == pytest.approx(1.0, abs=1e-8)

    def test_t_density(self):
        q = 4.0
        c = math.gamma((q + 1) / 2) / (math.sqrt(q * math.pi) * math.gamma(q / 2))
        val = nm.integrate(lambda x: c * (1 + x * x / q) ** (-(q + 1) / 2), -np.inf, np.inf)
        assert val == pytest.approx(1.0, abs=1e-8)

    def test_against_mpmath(self):
        f = lambda x: math.exp(-x) * math.cos(3 * x)  # noqa: E731
        ref = float(mp.quad(lambda x: mp.e ** (-x) * mp.cos(3 * x), [0, mp.inf]))
        assert nm.integrate(f, 0.0, np.inf, tol=1e-11) == pytest.approx(ref, abs=1e-10)

    def test_reversed_limits(self):
        assert nm.integrate(lambda x: x, 1.0, 0.0) == pytest.approx(-0.5)


class TestOptimizers:
    def test_interior_maximum(self):
        res = nm.maximize_box(lambda x: (-((x[0] - 3) ** 2), np.array([-2 * (x[0] - 3)])), [1.0], [(0.0, 10.0)])
        assert res.converged and res.x[0] == pytest.approx(3.0, abs=1e-6)

    def test_active_bound(self):
        res = nm.maximize_box(lambda x: (-((x[0] - 3) ** 2), np.array([-2 * (x[0] - 3)])), [1.0], [(0.0, 2.0)])
        assert res.converged and res.x[0] == pytest.approx(2.0, abs=1e-8)

    def test_start_outside(self):
        with pytest.raises(ValueError):
            nm.maximize_box(lambda x: (0.0, np.zeros(1)), [5.0], [(0.0, 2.0)])

    def test_failing_objective_keeps_last_iterate(self):
        def fg(x):
            if x[0] > 1.5:
                raise FloatingPointError("boom")
            return x[0], np.array([1.0])

        with pytest.raises(nm.OptimizationError) as ei:
            nm.maximize_box(fg, [1.0], [(0.0, 10.0)])
        assert ei.value.last_x is not None

    def test_golden_batch(self):
        centers = np.array([0.1, 0.5, 0.93])
        x = nm.minimize_golden_vec(lambda t: (t - centers) ** 2, np.zeros(3), np.ones(3), tol=1e-9)
        assert np.allclose(x, centers, atol=1e-8)
