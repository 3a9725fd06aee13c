"""Numerical kernels: distribution functions, root finding, quadrature, box optimization.

Distribution functions are thin wrappers over ``scipy.special`` with argument
checking and the infinite-quantile convention used by the spending-function
code (``norm_quantile(0) == -inf``). Root finding and quadrature are wrapped
so that failures surface as :class:`NumericsError` subclasses rather than
scipy's mixed warning/exception behaviour.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import integrate as _integrate
from scipy import optimize as _optimize
from scipy import special as _special


class NumericsError(RuntimeError):
    """Base class for numerical failures."""


class BracketError(NumericsError, ValueError):
    """Raised when a root bracket does not contain a sign change."""


class ConvergenceError(NumericsError):
    """Raised when an iterative method exhausts its iteration budget.

    ``best`` holds the last (or best) estimate so callers can decide whether
    to use it anyway.
    """

    def __init__(self, message: str, best: float | None = None):
        super().__init__(message)
        self.best = best


class OptimizationError(NumericsError):
    """Raised when the objective or gradient fails during optimization."""

    def __init__(self, message: str, last_x: np.ndarray | None = None):
        super().__init__(message)
        self.last_x = last_x


@dataclass(frozen=True)
class Bracket:
    lo: float
    hi: float

    def __post_init__(self):
        if not (self.lo < self.hi):
            raise BracketError(f"bracket requires lo < hi, got [{self.lo}, {self.hi}]")


@dataclass
class OptimizerResult:
    x: np.ndarray
    value: float
    gradient_norm: float
    iterations: int
    converged: bool
    message: str = ""


# ---------------------------------------------------------------------------
# Distributions
# ---------------------------------------------------------------------------


def norm_cdf(x):
    """Standard normal CDF, vectorized."""
    return _special.ndtr(x)


def norm_quantile(p):
    """Standard normal quantile. Returns -inf/+inf at p = 0/1."""
    p_arr = np.asarray(p, dtype=float)
    if np.any((p_arr < 0) | (p_arr > 1) | np.isnan(p_arr)):
        raise ValueError("norm_quantile requires 0 <= p <= 1")
    out = _special.ndtri(p_arr)
    return float(out) if out.ndim == 0 else out


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _check_dof(q):
    if np.any(np.asarray(q, dtype=float) <= 0):
        raise ValueError("degrees of freedom must be positive")


def t_cdf(x, q):
    """Student-t CDF with ``q`` degrees of freedom."""
    _check_dof(q)
    return _special.stdtr(q, x)


def t_quantile(p, q):
    """Student-t quantile; +-inf at p in {0, 1}."""
    _check_dof(q)
    p_arr = np.asarray(p, dtype=float)
    if np.any((p_arr < 0) | (p_arr > 1) | np.isnan(p_arr)):
        raise ValueError("t_quantile requires 0 <= p <= 1")
    out = _special.stdtrit(q, p_arr)
    return float(out) if np.ndim(out) == 0 else out


def digamma(x):
    if np.any(np.asarray(x, dtype=float) <= 0):
        raise ValueError("digamma is only defined here for x > 0")
    return _special.digamma(x)


def trigamma(x):
    if np.any(np.asarray(x, dtype=float) <= 0):
        raise ValueError("trigamma is only defined here for x > 0")
    return _special.polygamma(1, x)


# ---------------------------------------------------------------------------
# Root finding
# ---------------------------------------------------------------------------


def find_root(
    f: Callable[[float], float],
    bracket: Bracket | tuple[float, float],
    tol: float = 1e-10,
    maxiter: int = 200,
) -> float:
    """Root of a scalar function on a sign-changing bracket (Brent's method).

    Raises :class:`BracketError` if ``f(lo)`` and ``f(hi)`` have the same
    strict sign and :class:`ConvergenceError` if ``maxiter`` is exhausted.
    """
    if not isinstance(bracket, Bracket):
        bracket = Bracket(*bracket)
    lo, hi = bracket.lo, bracket.hi
    flo, fhi = f(lo), f(hi)
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    if not (np.isfinite(flo) or np.isfinite(fhi)) or flo * fhi > 0:
        raise BracketError(f"no sign change on [{lo}, {hi}]: f = ({flo}, {fhi})")
    try:
        x, info = _optimize.brentq(
            f, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps, maxiter=maxiter, full_output=True, disp=False
        )
    except ValueError as exc:  # f returned nan inside the bracket
        raise NumericsError(str(exc)) from exc
    if not info.converged:
        raise ConvergenceError(f"root finder did not converge in {maxiter} iterations", best=x)
    return x


def find_root_vec(
    f: Callable[[np.ndarray, np.ndarray], np.ndarray],
    lo: np.ndarray,
    hi: np.ndarray,
    tol: float | np.ndarray = 1e-10,
    maxiter: int = 300,
) -> np.ndarray:
    """Elementwise roots of a batch of increasing functions.

    ``f(x, idx)`` evaluates problem ``idx[k]`` at ``x[k]`` (both 1-D), so
    converged problems drop out of later evaluations. Requires
    ``f(lo) <= 0 <= f(hi)`` elementwise. Illinois-modified regula falsi,
    with a forced bisection every third iteration so every bracket shrinks.
    Returns a flat array of roots.
    """
    lo = np.array(lo, dtype=float).ravel()
    hi = np.array(hi, dtype=float).ravel()
    lo, hi = (np.array(a) for a in np.broadcast_arrays(lo, hi))
    n = lo.size
    tol = np.broadcast_to(np.asarray(tol, dtype=float).ravel(), (n,))
    idx_all = np.arange(n)
    flo = np.asarray(f(lo, idx_all), dtype=float)
    fhi = np.asarray(f(hi, idx_all), dtype=float)
    bad = (flo > 0) | (fhi < 0) | np.isnan(flo) | np.isnan(fhi)
    if bad.any():
        k = int(np.argmax(bad))
        raise BracketError(f"no sign change for element {k}: f(lo)={flo[k]}, f(hi)={fhi[k]}")
    x = 0.5 * (lo + hi)
    x = np.where(flo == 0, lo, np.where(fhi == 0, hi, x))
    done = ((hi - lo) <= tol) | (flo == 0) | (fhi == 0)
    side = np.zeros(n, dtype=np.int8)  # endpoint replaced last time: -1 lo, +1 hi
    for it in range(maxiter):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        a, b, fa, fb = lo[act], hi[act], flo[act], fhi[act]
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            xs = (a * fb - b * fa) / (fb - fa)
        use_mid = (it % 3 == 2) | ~np.isfinite(xs) | (xs <= a) | (xs >= b)
        xs = np.where(use_mid, 0.5 * (a + b), xs)
        fx = np.asarray(f(xs, act), dtype=float)
        if np.isnan(fx).any():
            raise NumericsError("function returned nan inside the bracket")
        left = fx < 0
        s = side[act]
        fa = np.where(left, fx, np.where(s == 1, 0.5 * fa, fa))
        fb = np.where(left, np.where(s == -1, 0.5 * fb, fb), fx)
        a = np.where(left, xs, a)
        b = np.where(left, b, xs)
        side[act] = np.where(left, -1, 1)
        lo[act], hi[act], flo[act], fhi[act] = a, b, fa, fb
        x[act] = xs
        done[act] = ((b - a) <= tol[act]) | (fx == 0)
    if not done.all():
        raise ConvergenceError("vectorized root finder did not converge")
    return x


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------


def integrate(
    f: Callable[[float], float],
    lo: float,
    hi: float,
    tol: float = 1e-8,
    limit: int = 200,
) -> float:
    """Adaptive Gauss-Kronrod quadrature of ``f`` over ``[lo, hi]``.

    Infinite limits are mapped onto a finite interval with ``x = lo + t/(1-t)``
    (and its mirror image); a doubly infinite range is split at zero.
    Raises :class:`ConvergenceError` carrying the best estimate when the
    error estimate stays above ``tol``.
    """
    if lo == hi:
        return 0.0
    if lo > hi:
        return -integrate(f, hi, lo, tol, limit)
    if np.isinf(lo) and np.isinf(hi):
        return integrate(f, -np.inf, 0.0, tol / 2, limit) + integrate(f, 0.0, np.inf, tol / 2, limit)
    if np.isinf(hi):

        def g(t):
            u = 1.0 - t
            return f(lo + t / u) / (u * u)

        a, b, fn = 0.0, 1.0, g
    elif np.isinf(lo):

        def g(t):
            u = 1.0 - t
            return f(hi - t / u) / (u * u)

        a, b, fn = 0.0, 1.0, g
    else:
        a, b, fn = lo, hi, f

    def safe(t):
        # mapped integrand is 0 * inf at t == 1
        if t >= 1.0 and fn is not f:
            return 0.0
        return fn(t)

    val, err, *rest = _integrate.quad(safe, a, b, epsabs=tol, epsrel=tol, limit=limit, full_output=1)
    if err > tol and err > tol * abs(val):
        raise ConvergenceError(f"quadrature error estimate {err:.2e} exceeds tolerance {tol:.1e}", best=val)
    return float(val)


def gauss_legendre_unit(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on (0, 1)."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


def _projected_gradient(x, grad, bounds):
    pg = np.array(grad, dtype=float, copy=True)
    for i, (lo, hi) in enumerate(bounds):
        if lo is not None and x[i] <= lo and pg[i] < 0:
            pg[i] = 0.0
        if hi is not None and x[i] >= hi and pg[i] > 0:
            pg[i] = 0.0
    return pg


def maximize_box(
    fun_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: Sequence[float],
    bounds: Sequence[tuple[float | None, float | None]],
    tol: float = 1e-6,
    maxiter: int = 500,
) -> OptimizerResult:
    """Maximize a smooth function on a box with L-BFGS-B.

    ``fun_and_grad`` returns ``(f(x), grad f(x))``. Convergence is judged on
    the norm of the projected gradient, i.e. components pushing against an
    active bound are ignored.
    """
    x0 = np.asarray(x0, dtype=float)
    for xi, (lo, hi) in zip(x0, bounds):
        if (lo is not None and xi <= lo) or (hi is not None and xi >= hi):
            raise ValueError("x0 must lie strictly inside the bounds")
    last = {"x": x0.copy()}

    def neg(x):
        try:
            val, grad = fun_and_grad(x)
        except Exception as exc:
            raise OptimizationError(f"objective failed: {exc}", last_x=last["x"]) from exc
        if not np.isfinite(val) or not np.all(np.isfinite(grad)):
            raise OptimizationError("objective returned a non-finite value", last_x=last["x"])
        last["x"] = np.array(x, copy=True)
        return -val, -np.asarray(grad, dtype=float)

    res = _optimize.minimize(
        neg,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": maxiter, "gtol": tol * 1e-3, "ftol": 1e-15, "maxcor": 20},
    )
    val, grad = fun_and_grad(res.x)
    pg = _projected_gradient(res.x, grad, bounds)
    gnorm = float(np.linalg.norm(pg))
    return OptimizerResult(
        x=np.asarray(res.x),
        value=float(val),
        gradient_norm=gnorm,
        iterations=int(res.nit),
        converged=gnorm < tol,
        message=str(res.message),
    )


_GOLD = (math.sqrt(5.0) - 1.0) / 2.0


def minimize_golden_vec(
    f: Callable[[np.ndarray], np.ndarray],
    lo: np.ndarray,
    hi: np.ndarray,
    tol: float = 1e-6,
) -> np.ndarray:
    """Elementwise golden-section minimization of a batch of unimodal functions.

    ``f`` maps a 1-D array of abscissae (one per problem) to objective
    values. Every bracket shrinks by the same factor each iteration, so
    a fixed number of iterations reaches ``tol``.
    """
    a = np.array(lo, dtype=float).ravel()
    b = np.array(hi, dtype=float).ravel()
    a, b = (np.array(v) for v in np.broadcast_arrays(a, b))
    width = float(np.max(b - a)) if a.size else 0.0
    if width <= tol:
        return 0.5 * (a + b)
    n_iter = int(math.ceil(math.log(tol / width) / math.log(_GOLD)))
    c = b - _GOLD * (b - a)
    d = a + _GOLD * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(n_iter):
        left = fc <= fd
        # keep [a, d] where f(c) <= f(d), else [c, b]
        a = np.where(left, a, c)
        b = np.where(left, d, b)
        x_new = np.where(left, b - _GOLD * (b - a), a + _GOLD * (b - a))
        f_new = f(x_new)
        c, d = np.where(left, x_new, d), np.where(left, c, x_new)
        fc, fd = np.where(left, f_new, fd), np.where(left, fc, f_new)
    return np.where(fc <= fd, c, d)
