"""Interval procedures for small-area means.

Direct, Bayes and empirical-Bayes intervals, the FAB z-interval with the
closed-form spending function, and the FAB t-interval whose spending
function is tabulated by pointwise minimization of the prior-predictive
acceptance probability.

Spending functions are handled on the logit scale internally. With
``omega = expit(t)`` the quantiles ``z_{alpha*omega}`` and
``z_{alpha*(1-omega)}`` are both computed from log-probabilities, so
neither tail loses precision when ``omega`` is within rounding of 0 or 1.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import numerics
from .domain import AreaTable, HyperParams, Interval, LinkingSpec, Method
from .estimation import FitReport, PrecisionPrior, fit_ml
from .linking import NormalPrior, eblup, sar_covariance


class IntervalError(numerics.NumericsError):
    """Raised when interval endpoints cannot be located."""


def _check_alpha(alpha: float) -> None:
    if not 0 < alpha < 0.5:
        raise ValueError("alpha must lie in (0, 0.5)")


# ---------------------------------------------------------------------------
# Direct, Bayes and EB
# ---------------------------------------------------------------------------


def direct_interval(y: float, sigma: float, alpha: float = 0.05) -> Interval:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    h = sigma * numerics.norm_quantile(1 - alpha / 2)
    return Interval(y - h, y + h, alpha, Method.DIRECT)


def direct_t_interval(y: float, sigma_hat: float, q: float, alpha: float = 0.05) -> Interval:
    if not sigma_hat > 0:
        raise ValueError("sigma_hat must be positive")
    h = sigma_hat * numerics.t_quantile(1 - alpha / 2, q)
    return Interval(y - h, y + h, alpha, Method.DIRECT)


def bayes_posterior(y, sigma2, mu, tau2):
    """Posterior mean and variance of a normal mean under a normal prior."""
    sigma2 = np.asarray(sigma2, dtype=float)
    tau2 = np.asarray(tau2, dtype=float)
    if np.any(sigma2 <= 0) or np.any(tau2 <= 0):
        raise ValueError("variances must be positive")
    with np.errstate(invalid="ignore"):
        # tau2 = inf is the flat-prior limit
        wy = np.where(np.isinf(tau2), 1.0, tau2 / (sigma2 + tau2))
    mean = wy * np.asarray(y, dtype=float) + (1 - wy) * np.asarray(mu, dtype=float)
    var = wy * sigma2
    if mean.ndim == 0:
        return float(mean), float(var)
    return mean, var


def bayes_interval(y: float, sigma2: float, prior: NormalPrior, alpha: float = 0.05) -> Interval:
    """Equal-tailed credible interval under ``theta ~ N(mu, tau2)``."""
    mean, var = bayes_posterior(y, sigma2, prior.mu, prior.tau2)
    h = math.sqrt(var) * numerics.norm_quantile(1 - alpha / 2)
    return Interval(mean - h, mean + h, alpha, Method.BAYES)


def credible_coverage(delta, sigma, tau2, alpha: float = 0.05):
    """Frequentist coverage of the credible interval at ``theta - x'beta = delta``."""
    sigma = np.asarray(sigma, dtype=float)
    tau2 = np.asarray(tau2, dtype=float)
    if np.any(sigma <= 0) or np.any(tau2 <= 0):
        raise ValueError("sigma and tau2 must be positive")
    shift = sigma * np.asarray(delta, dtype=float) / tau2
    k = np.sqrt(1 + sigma**2 / tau2)
    z = numerics.norm_quantile(1 - alpha / 2)
    out = numerics.norm_cdf(shift + z * k) - numerics.norm_cdf(shift - z * k)
    return float(out) if np.ndim(out) == 0 else out


def eb_moments(psi: HyperParams, y, X, W, D) -> tuple[np.ndarray, np.ndarray]:
    """Plug-in conditional means and variances of all area means given all of y."""
    y = np.asarray(y, dtype=float)
    D = np.asarray(D, dtype=float)
    mean = eblup(psi, y, X, W, D)
    V = sar_covariance(psi.tau2, psi.rho, W, m=y.size) + np.diag(D)
    # G - G V^-1 G = D - D V^-1 D
    var = D - D * D * np.diag(np.linalg.inv(V))
    return mean, np.maximum(var, 0.0)


@dataclass
class EBResult:
    intervals: list[Interval]
    fit: FitReport
    mean: np.ndarray
    var: np.ndarray


def eb_interval(table: AreaTable, spec: LinkingSpec, alpha: float = 0.05) -> EBResult:
    """Naive empirical-Bayes intervals from a single fit to the full table.

    No correction is made for the uncertainty in the fitted hyperparameters.
    """
    spec.check(table)
    X = spec.design(table.covariates)
    W = table.W if spec.spatial else None
    D = table.variances
    rep = fit_ml(table.y, X, W, D, spec=spec)
    if not rep.converged:
        warnings.warn("full-table fit did not converge; EB intervals use the last iterate", stacklevel=2)
    mean, var = eb_moments(rep.psi, table.y, X, W, D)
    z = numerics.norm_quantile(1 - alpha / 2)
    half = z * np.sqrt(var)
    ivs = [Interval(float(m - h), float(m + h), alpha, Method.EB) for m, h in zip(mean, half)]
    return EBResult(ivs, rep, mean, var)


# ---------------------------------------------------------------------------
# Spending functions
# ---------------------------------------------------------------------------


def _zlog(logp):
    return special.ndtri_exp(logp)


def g(omega, alpha: float):
    """``Phi^{-1}(alpha*omega) - Phi^{-1}(alpha*(1-omega))``; infinite at 0 and 1."""
    _check_alpha(alpha)
    om = np.asarray(omega, dtype=float)
    if np.any((om < 0) | (om > 1)):
        raise ValueError("omega must lie in [0, 1]")
    out = special.ndtri(alpha * om) - special.ndtri(alpha * (1 - om))
    return float(out) if out.ndim == 0 else out


def g_logit(t, alpha: float):
    """``g(expit(t))`` evaluated without forming ``omega``."""
    la = math.log(alpha)
    t = np.asarray(t, dtype=float)
    return _zlog(la + special.log_expit(t)) - _zlog(la + special.log_expit(-t))


def _expand_bracket(h, lo, hi, max_doublings: int = 60):
    """Grow per-element brackets of increasing functions until they change sign."""
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    idx = np.arange(lo.size)
    for _ in range(max_doublings):
        flo, fhi = h(lo, idx), h(hi, idx)
        bad_lo, bad_hi = flo > 0, fhi < 0
        if not (bad_lo.any() or bad_hi.any()):
            return lo, hi
        w = hi - lo
        lo = np.where(bad_lo, lo - 2 * w, lo)
        hi = np.where(bad_hi, hi + 2 * w, hi)
    raise numerics.BracketError("could not bracket the root")


def g_inverse_logit(x, alpha: float, tol: float = 1e-13):
    """Solve ``g_logit(t) = x`` for t; returns +-inf for infinite x."""
    _check_alpha(alpha)
    x = np.asarray(x, dtype=float)
    flat = x.ravel()
    out = np.zeros(flat.size)
    fin = np.isfinite(flat)
    out[~fin] = np.sign(flat[~fin]) * np.inf
    if np.isnan(flat).any():
        raise ValueError("g_inverse of nan")
    k = np.flatnonzero(fin & (flat != 0))
    if k.size:
        xs = flat[k]

        def h(t, i):
            return g_logit(t, alpha) - xs[i]

        lo, hi = _expand_bracket(h, np.full(k.size, -8.0), np.full(k.size, 8.0))
        tols = tol * np.maximum(1.0, np.maximum(np.abs(lo), np.abs(hi)))
        out[k] = numerics.find_root_vec(h, lo, hi, tol=tols)
    out = out.reshape(x.shape)
    return float(out) if out.ndim == 0 else out


def g_inverse(x, alpha: float):
    """Inverse of :func:`g`; ``g_inverse(0) = 0.5``."""
    return special.expit(g_inverse_logit(x, alpha))


class SpendingFunction:
    """Nondecreasing map from theta to [0, 1]."""

    alpha: float

    def __call__(self, theta):
        raise NotImplementedError

    def logit(self, theta):
        return special.logit(self(theta))


@dataclass(frozen=True)
class ConstantSpending(SpendingFunction):
    """``s = 1/2``: the equal-tailed interval."""

    alpha: float = 0.05

    def __call__(self, theta):
        return np.full(np.shape(theta), 0.5) if np.ndim(theta) else 0.5

    def logit(self, theta):
        return np.zeros(np.shape(theta)) if np.ndim(theta) else 0.0


@dataclass(frozen=True)
class ZSpending(SpendingFunction):
    """Optimal spending for a normal prior and known sampling sd."""

    mu: float
    tau2: float
    sigma: float
    alpha: float = 0.05

    def __post_init__(self):
        _check_alpha(self.alpha)
        if not (self.tau2 > 0 and self.sigma > 0):
            raise ValueError("tau2 and sigma must be positive")

    def _arg(self, theta):
        if math.isinf(self.tau2):
            return np.zeros(np.shape(theta)) if np.ndim(theta) else 0.0
        return 2 * self.sigma * (np.asarray(theta, dtype=float) - self.mu) / self.tau2

    def __call__(self, theta):
        return g_inverse(self._arg(theta), self.alpha)

    def logit(self, theta):
        return g_inverse_logit(self._arg(theta), self.alpha)


def optimal_s_z(mu: float, tau2: float, sigma: float, alpha: float = 0.05) -> ZSpending:
    return ZSpending(mu, tau2, sigma, alpha)


W_CLIP = 1e-9


@dataclass(frozen=True)
class TabulatedSpending(SpendingFunction):
    """Piecewise-linear spending function on an increasing theta grid.

    Values outside the grid are held at the end values.
    """

    theta: np.ndarray
    w: np.ndarray
    alpha: float = 0.05

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=float)
        w = np.asarray(self.w, dtype=float)
        if th.ndim != 1 or th.shape != w.shape or th.size < 2:
            raise ValueError("theta and w must be 1-D of equal length >= 2")
        if np.any(np.diff(th) <= 0):
            raise ValueError("theta grid must be strictly increasing")
        if np.any(np.diff(w) < 0):
            raise ValueError("tabulated spending values must be nondecreasing")
        if np.any((w < 0) | (w > 1)):
            raise ValueError("spending values must lie in [0, 1]")
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "w", w)

    def __call__(self, theta):
        out = np.interp(theta, self.theta, self.w)
        return float(out) if np.ndim(out) == 0 else out

    @property
    def w_min(self) -> float:
        return float(self.w[0])

    @property
    def w_max(self) -> float:
        return float(self.w[-1])


# ---------------------------------------------------------------------------
# FAB z-interval
# ---------------------------------------------------------------------------


def _fab_z_theta_roots(y, sigma, spending: SpendingFunction, alpha, tol):
    la = math.log(alpha)

    def z_lo(theta):
        # z_{alpha(1 - s)} with s = expit(t)
        return float(_zlog(la + special.log_expit(-spending.logit(theta))))

    def z_hi(theta):
        # z_{1 - alpha s} = -z_{alpha s}
        return -float(_zlog(la + special.log_expit(spending.logit(theta))))

    def f_lo(theta):
        return theta - y - sigma * z_lo(theta)

    def f_hi(theta):
        return theta - y - sigma * z_hi(theta)

    z_a = numerics.norm_quantile(alpha)
    out = []
    # f_lo(y + sigma z_alpha) >= 0 and f_hi(y + sigma z_{1-alpha}) <= 0 for any s;
    # nudge the anchors outward so rounding cannot spoil the sign
    eps = 1e-6 * sigma
    for f, anchor, sign in ((f_lo, y + sigma * z_a + eps, -1.0), (f_hi, y - sigma * z_a - eps, 1.0)):
        far = anchor + sign * 40 * sigma
        step = 40 * sigma
        for _ in range(60):
            if (f(far) <= 0) if sign < 0 else (f(far) >= 0):
                break
            step *= 2
            far = anchor + sign * step
        else:
            raise IntervalError("could not bracket a FAB endpoint")
        lo, hi = (far, anchor) if sign < 0 else (anchor, far)
        out.append(numerics.find_root(f, numerics.Bracket(lo, hi), tol=tol))
    return out


def fab_z_interval(y: float, sigma: float, prior: NormalPrior, alpha: float = 0.05, tol: float | None = None) -> Interval:
    """FAB interval for a normal mean with known sampling sd.

    Endpoints are the roots in theta of
    ``theta - y - sigma z_{alpha(1 - s(theta))}`` and
    ``theta - y - sigma z_{1 - alpha s(theta)}``, with ``s`` the optimal
    spending function for ``prior``.
    """
    _check_alpha(alpha)
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    s = optimal_s_z(prior.mu, prior.tau2, sigma, alpha)
    lo, hi = _fab_z_theta_roots(y, sigma, s, alpha, tol if tol is not None else 1e-9 * sigma)
    return Interval(lo, hi, alpha, Method.FABZ)


def fab_z_endpoints(y, sigma, mu, tau2, alpha: float = 0.05, tol: float = 1e-12):
    """Vectorized FAB z endpoints.

    At the lower endpoint ``omega = s(theta_L)`` satisfies
    ``(tau2 / 2 sigma) g(omega) - sigma z_{alpha(1-omega)} = y - mu``, a
    strictly increasing equation in ``omega``; the upper endpoint is
    analogous. Both are solved in ``t = logit(omega)``, which avoids the
    nested inversion of ``g``.
    """
    _check_alpha(alpha)
    y, sigma, mu, tau2 = (np.asarray(v, dtype=float) for v in np.broadcast_arrays(y, sigma, mu, tau2))
    shape = y.shape
    y, sigma, mu, tau2 = (v.ravel() for v in (y, sigma, mu, tau2))
    if np.any(sigma <= 0) or np.any(tau2 <= 0):
        raise ValueError("sigma and tau2 must be positive")
    la = math.log(alpha)
    flat = np.isinf(tau2)
    c = np.where(flat, 0.0, tau2 / (2 * sigma))
    d = y - mu

    def parts(t):
        za = _zlog(la + special.log_expit(t))  # z_{alpha omega}
        zb = _zlog(la + special.log_expit(-t))  # z_{alpha (1 - omega)}
        return za, zb

    def h_lo(t, k):
        za, zb = parts(t)
        return c[k] * (za - zb) - sigma[k] * zb - d[k]

    def h_hi(t, k):
        za, zb = parts(t)
        return c[k] * (za - zb) + sigma[k] * za - d[k]

    lower = np.empty(y.size)
    upper = np.empty(y.size)
    z_half = numerics.norm_quantile(alpha / 2)
    lower[flat] = y[flat] + sigma[flat] * z_half
    upper[flat] = y[flat] - sigma[flat] * z_half
    k = np.flatnonzero(~flat)
    if k.size:
        for h, dest, which in ((h_lo, lower, "lo"), (h_hi, upper, "hi")):

            def hk(t, i, h=h):
                return h(t, k[i])

            lo, hi = _expand_bracket(hk, np.full(k.size, -8.0), np.full(k.size, 8.0))
            tols = tol * np.maximum(1.0, np.maximum(np.abs(lo), np.abs(hi)))
            t = numerics.find_root_vec(hk, lo, hi, tol=tols)
            za, zb = parts(t)
            dest[k] = y[k] + sigma[k] * zb if which == "lo" else y[k] - sigma[k] * za
    return lower.reshape(shape), upper.reshape(shape)


def expected_width_ratio_z(tau2_over_sigma2: float, alpha: float = 0.05, tol: float = 1e-9) -> float:
    """Prior-expected FAB z width over the direct width, by quadrature over y.

    Uses ``sigma = 1`` and ``mu = 0``; the ratio depends only on
    ``tau2 / sigma2``.
    """
    _check_alpha(alpha)
    r = float(tau2_over_sigma2)
    if not r > 0:
        raise ValueError("tau2/sigma2 must be positive")
    sd = math.sqrt(1 + r)

    def integrand(u):
        # y = sd * u with u standard normal
        lo, hi = fab_z_endpoints(sd * u, 1.0, 0.0, r, alpha)
        return float(hi - lo) * math.exp(-0.5 * u * u) / math.sqrt(2 * math.pi)

    # the width is even in y
    ew = 2 * numerics.integrate(integrand, 0.0, np.inf, tol=tol)
    return ew / (2 * numerics.norm_quantile(1 - alpha / 2))


# ---------------------------------------------------------------------------
# FAB t-interval
# ---------------------------------------------------------------------------

GAMMA_RULE_NODES = 48
_LAGUERRE_MAX_SHAPE = 100.0


def _gamma_rule(shape: float, n: int):
    """Nodes and weights (summing to 1) for expectations under Gamma(shape, rate 1).

    Generalized Gauss-Laguerre for moderate shapes; for large shapes, where
    the Laguerre weights overflow, Gauss-Hermite on the log scale with the
    weights corrected to the exact log-gamma density.
    """
    if shape <= _LAGUERRE_MAX_SHAPE:
        x, w = special.roots_genlaguerre(n, shape - 1)
        return x, w / w.sum()
    m, s = special.digamma(shape), math.sqrt(special.polygamma(1, shape))
    u, wh = special.roots_hermitenorm(n)
    v = m + s * u
    # log density of log X, X ~ Gamma(shape), over the normal density used for the nodes
    log_ratio = shape * v - np.exp(v) - special.gammaln(shape) + 0.5 * u * u
    lw = np.log(wh) + log_ratio
    w = np.exp(lw - lw.max())
    return np.exp(v), w / w.sum()


@dataclass(frozen=True)
class PredictiveRule:
    """Quadrature over (sigma, sigma_hat) under the precision prior and chi-square law."""

    sigma2: np.ndarray  # (n,)
    sigma_hat: np.ndarray  # (n, n)
    weight: np.ndarray  # (n, n)

    @classmethod
    def build(cls, prec: PrecisionPrior, q: float, n: int = GAMMA_RULE_NODES) -> "PredictiveRule":
        x1, w1 = _gamma_rule(prec.shape, n)
        x2, w2 = _gamma_rule(q / 2.0, n)
        phi = x1 / prec.rate
        ratio = x2 / (q / 2.0)  # sigma_hat^2 / sigma^2
        sigma2 = 1.0 / phi
        sigma_hat = np.sqrt(sigma2[:, None] * ratio[None, :])
        return cls(sigma2, sigma_hat, w1[:, None] * w2[None, :])


def _t_quantiles(w, q, alpha):
    """``(t_{alpha(1-w)}, t_{1-alpha w})`` with q degrees of freedom."""
    w = np.asarray(w, dtype=float)
    return special.stdtrit(q, alpha * (1 - w)), -special.stdtrit(q, alpha * w)


def predictive_acceptance(
    theta,
    w,
    prior: NormalPrior,
    prec: PrecisionPrior,
    q: float,
    alpha: float = 0.05,
    rule: PredictiveRule | None = None,
):
    """Prior-predictive probability that the t-interval with spending ``w`` accepts ``theta``.

    Marginally ``y ~ N(mu, tau2 + sigma^2)``, and ``theta`` is accepted when
    ``theta - sigma_hat t_hi < y < theta - sigma_hat t_lo``. The expectation
    over ``sigma`` and ``sigma_hat`` uses a tensor Gauss rule.
    """
    rule = rule if rule is not None else PredictiveRule.build(prec, q)
    theta, w = np.broadcast_arrays(np.asarray(theta, dtype=float), np.asarray(w, dtype=float))
    t_lo, t_hi = _t_quantiles(w, q, alpha)
    sd = np.sqrt(prior.tau2 + rule.sigma2)[:, None]
    c = (theta - prior.mu)[..., None, None]
    sh = rule.sigma_hat
    a = (c - sh * t_lo[..., None, None]) / sd
    b = (c - sh * t_hi[..., None, None]) / sd
    # upper-tail form above mu, so far-out theta keep relative precision
    p = np.where(c > 0, special.ndtr(-b) - special.ndtr(-a), special.ndtr(a) - special.ndtr(b))
    return np.sum(p * rule.weight, axis=(-2, -1))


def predictive_acceptance_adaptive(
    theta: float,
    w: float,
    prior: NormalPrior,
    prec: PrecisionPrior,
    q: float,
    alpha: float = 0.05,
    tol: float = 1e-8,
) -> float:
    """Same quantity as :func:`predictive_acceptance` by nested adaptive quadrature."""
    t_lo, t_hi = _t_quantiles(w, q, alpha)
    a, rate = prec.shape, prec.rate
    k = q / 2.0
    lg_a = special.gammaln(a)
    lg_k = special.gammaln(k)

    def inner(phi):
        s2 = 1.0 / phi
        sd = math.sqrt(prior.tau2 + s2)
        c = theta - prior.mu

        def f(v):
            if v <= 0:
                return 0.0
            sh = math.sqrt(s2 * v)
            dens = math.exp(k * math.log(k) + (k - 1) * math.log(v) - k * v - lg_k)
            return dens * (special.ndtr((c - sh * t_lo) / sd) - special.ndtr((c - sh * t_hi) / sd))

        return numerics.integrate(f, 0.0, np.inf, tol=tol)

    def outer(phi):
        if phi <= 0:
            return 0.0
        dens = math.exp(a * math.log(rate) + (a - 1) * math.log(phi) - rate * phi - lg_a)
        return dens * inner(phi)

    return numerics.integrate(outer, 0.0, np.inf, tol=tol)


TABLE_POINTS = 81
TABLE_HALF_WIDTH = 8.0


def theta_grid(prior: NormalPrior, prec: PrecisionPrior, q: float, alpha: float = 0.05, n: int = TABLE_POINTS):
    """Tabulation grid: ``mu +- 8 max(tau, sigma_typ t_{1-alpha/2,q})``."""
    half = TABLE_HALF_WIDTH * max(math.sqrt(prior.tau2), prec.typical_sigma * numerics.t_quantile(1 - alpha / 2, q))
    return np.linspace(prior.mu - half, prior.mu + half, n)


def optimal_w_t(
    theta,
    prior: NormalPrior,
    prec: PrecisionPrior,
    q: float,
    alpha: float = 0.05,
    tol: float = 1e-6,
    rule: PredictiveRule | None = None,
):
    """Spending value(s) minimizing the prior-predictive acceptance probability at theta.

    Minimizing pointwise in theta minimizes the prior expected length,
    since expected length is the integral of the acceptance probability
    over theta. No monotone projection is applied here.
    """
    _check_alpha(alpha)
    if not q >= 1:
        raise ValueError("q must be at least 1")
    rule = rule if rule is not None else PredictiveRule.build(prec, q)
    th = np.atleast_1d(np.asarray(theta, dtype=float))
    w = numerics.minimize_golden_vec(
        lambda ww: predictive_acceptance(th, ww, prior, prec, q, alpha, rule), np.zeros(th.size), np.ones(th.size), tol=tol
    )
    bad = ~np.isfinite(w)
    if bad.any():
        warnings.warn("predictive quadrature failed; using w = 1/2 there", stacklevel=2)
        w = np.where(bad, 0.5, w)
    return float(w[0]) if np.ndim(theta) == 0 else w


def tabulate_w_t(
    prior: NormalPrior,
    prec: PrecisionPrior,
    q: float,
    alpha: float = 0.05,
    n: int = TABLE_POINTS,
) -> TabulatedSpending:
    """Monotone tabulated spending function for the FAB t-interval."""
    if math.isinf(prior.tau2):
        # flat prior: the equal-tailed interval is optimal
        return TabulatedSpending(np.array([prior.mu - 1.0, prior.mu + 1.0]), np.array([0.5, 0.5]), alpha)
    grid = theta_grid(prior, prec, q, alpha, n)
    # acceptance at (mu - c, 1 - w) equals acceptance at (mu + c, w), so the
    # optimum satisfies w(mu - c) = 1 - w(mu + c); solve the upper half only
    half = n // 2
    upper = optimal_w_t(grid[half:], prior, prec, q, alpha)
    lower = 1.0 - upper[n - half - 1 :: -1][: half]
    w = np.concatenate([lower, upper])
    w = np.clip(np.maximum.accumulate(w), W_CLIP, 1 - W_CLIP)
    return TabulatedSpending(grid, w, alpha)


def fab_t_endpoints(y, sigma_hat, q: float, spending: SpendingFunction, alpha: float = 0.05, tol: float = 1e-10):
    """Vectorized FAB t endpoints for many ``(y, sigma_hat)`` sharing one spending function.

    For a tabulated spending function with range ``[w_min, w_max]`` the
    lower root lies in ``y + sigma_hat [t_{alpha(1-w_max)}, t_{alpha(1-w_min)}]``
    and the upper root in ``y + sigma_hat [t_{1-alpha w_max}, t_{1-alpha w_min}]``.
    """
    y, sh = (np.asarray(v, dtype=float) for v in np.broadcast_arrays(y, sigma_hat))
    shape = y.shape
    y, sh = y.ravel(), sh.ravel()
    if isinstance(spending, TabulatedSpending):
        w_min, w_max = spending.w_min, spending.w_max
    else:
        w_min, w_max = W_CLIP, 1 - W_CLIP
    lo_q = _t_quantiles(np.array([w_max, w_min]), q, alpha)
    out = []
    for which in (0, 1):

        def f(theta, k):
            tq = _t_quantiles(spending(theta), q, alpha)[which]
            return theta - y[k] - sh[k] * tq

        # f is increasing, so widening the bracket keeps the sign change
        # while absorbing rounding at the end points
        pad = 1e-9 * sh * (1.0 + np.abs(lo_q[which]).max())
        a = y + sh * lo_q[which][0] - pad
        b = y + sh * lo_q[which][1] + pad
        tols = tol * np.maximum(sh, 1e-300)
        out.append(numerics.find_root_vec(f, a, b, tol=tols))
    return out[0].reshape(shape), out[1].reshape(shape)


@dataclass
class FabT:
    """A FAB t-interval together with the spending function used."""

    interval: Interval
    spending: TabulatedSpending = field(repr=False)


def fab_t_interval(
    y: float,
    sigma_hat: float,
    q: float,
    prior: NormalPrior,
    prec: PrecisionPrior,
    alpha: float = 0.05,
    spending: TabulatedSpending | None = None,
) -> FabT:
    """FAB t-interval for a mean with estimated sampling variance on ``q`` dof."""
    _check_alpha(alpha)
    if not sigma_hat > 0:
        raise ValueError("sigma_hat must be positive")
    if spending is None:
        spending = tabulate_w_t(prior, prec, q, alpha)
    lo, hi = fab_t_endpoints(np.array([y]), np.array([sigma_hat]), q, spending, alpha)
    return FabT(Interval(float(lo[0]), float(hi[0]), alpha, Method.FABT), spending)


# ---------------------------------------------------------------------------
# Per-area driver
# ---------------------------------------------------------------------------


@dataclass
class AreaInterval:
    """One output row; ``note`` is set when the area fell back to a simpler interval."""

    id: str
    y: float
    sigma: float
    lower: float
    upper: float
    method: str
    prior_mu: float = float("nan")
    prior_tau2: float = float("nan")
    note: str = ""

    @property
    def width(self) -> float:
        return self.upper - self.lower


def _direct_for(area, alpha: float) -> Interval:
    s = math.sqrt(area.variance)
    if area.known_variance:
        return direct_interval(area.y, s, alpha)
    return direct_t_interval(area.y, s, area.dof, alpha)


def _single_fit_priors(table: AreaTable, spec: LinkingSpec, mode: str):
    """Priors from one full-table fit: each area conditioned on the others' plug-in means.

    The same data then enter both the prior and the interval, so exact
    area-specific coverage no longer holds.
    """
    from .estimation import AreaPrior, fit_gamma_hyper
    from .linking import conditional_prior

    elig = table.eligible
    sub = table.subset(elig) if not elig.all() else table
    X = spec.design(sub.covariates)
    W = sub.W if spec.spatial else None
    D = sub.variances
    rep = fit_ml(sub.y, X, W, D, spec=spec)
    theta = eblup(rep.psi, sub.y, X, W, D)
    gfit = None
    if mode == "t":
        n = np.array([a.n if a.n is not None else a.dof + 1 for a in sub.areas], dtype=float)
        gfit = fit_gamma_hyper(D * n, n)
    out = []
    for j, a in enumerate(sub.areas):
        others = np.delete(theta, j)
        normal = conditional_prior(j, others, rep.psi, X, W)
        prec = gfit.precision_prior(int(n[j])) if gfit is not None else None
        out.append(AreaPrior(normal, prec, rep))
    it = iter(out)
    return [next(it) if e else None for e in elig]


def area_intervals(
    table: AreaTable,
    spec: LinkingSpec,
    method: Method | str,
    alpha: float = 0.05,
    single_fit: bool = False,
) -> list[AreaInterval]:
    """Intervals for every area of a table.

    Areas with an estimated variance get t-based direct intervals. The
    Bayes and FAB methods use leave-one-out priors (or, with
    ``single_fit``, priors from one full-table fit). Areas that are
    ineligible, or whose prior could not be built, fall back to the direct
    interval and carry a note; areas with no variance at all get nan
    endpoints.
    """
    from .estimation import leave_one_out_priors

    _check_alpha(alpha)
    method = Method(method)
    if method is Method.FABT and not any(a.sigma2_hat is not None for a in table.areas if a.eligible):
        raise ValueError("fab-t needs estimated variances (sigma2_hat, dof)")
    rows: list[AreaInterval] = []

    def fallback(a, note):
        if a.sigma2 is None and a.sigma2_hat is None:
            return AreaInterval(a.id, a.y, float("nan"), float("nan"), float("nan"), "none", note=note)
        iv = _direct_for(a, alpha)
        return AreaInterval(a.id, a.y, math.sqrt(a.variance), iv.lower, iv.upper, Method.DIRECT.value, note=note)

    if method is Method.DIRECT:
        return [fallback(a, "" if a.eligible else "ineligible") for a in table.areas]

    if method is Method.EB:
        elig = table.eligible
        sub = table.subset(elig) if not elig.all() else table
        res = eb_interval(sub, spec, alpha)
        it = iter(zip(sub.areas, res.intervals, res.mean, res.var))
        for a, e in zip(table.areas, elig):
            if not e:
                rows.append(fallback(a, "ineligible"))
                continue
            _, iv, _, _ = next(it)
            rows.append(AreaInterval(a.id, a.y, math.sqrt(a.variance), iv.lower, iv.upper, method.value))
        return rows

    mode = "t" if method is Method.FABT else "z"
    if single_fit:
        priors = _single_fit_priors(table, spec, mode)
    else:
        priors = leave_one_out_priors(table, spec, mode)

    for a, pr in zip(table.areas, priors):
        if pr is None:
            rows.append(fallback(a, "ineligible"))
            continue
        if pr.error or pr.normal is None:
            rows.append(fallback(a, pr.error or "prior unavailable"))
            continue
        sigma = math.sqrt(a.variance)
        mu, t2 = pr.normal.mu, pr.normal.tau2
        note = ""
        try:
            if method is Method.BAYES:
                iv = bayes_interval(a.y, a.variance, pr.normal, alpha)
            elif method is Method.FABZ:
                if not a.known_variance:
                    note = "estimated variance treated as known"
                iv = fab_z_interval(a.y, sigma, pr.normal, alpha)
            else:
                if a.known_variance:
                    rows.append(fallback(a, "known variance: fab-t needs sigma2_hat and dof"))
                    continue
                iv = fab_t_interval(a.y, sigma, a.dof, pr.normal, pr.precision, alpha).interval
        except numerics.NumericsError as exc:
            rows.append(fallback(a, f"interval failed: {exc}"))
            continue
        rows.append(AreaInterval(a.id, a.y, sigma, iv.lower, iv.upper, method.value, mu, t2, note))
    return rows
