"""Maximum-likelihood fitting of the linking model and of the variance prior.

The Fay-Herriot / SAR hyperparameters are fitted by Fisher scoring on
``(tau2, rho)`` with ``beta`` profiled out by GLS. The scoring loop is
written for a *batch* of independent problems of equal size so that the m
leave-one-out fits of a table run as stacked numpy linear algebra;
:func:`fit_ml` is the single-problem front end.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import numerics
from .domain import AreaTable, HyperParams, InputError, LinkingSpec
from .linking import NormalPrior, conditional_priors_loo, sar_covariance

TAU2_FLOOR = 1e-8
RHO_MAX = 1.0 - 1e-6
SCORE_TOL = 1e-6
LL_RTOL = 1e-10
DECREMENT_TOL = 1e-12
MAX_ITER = 100
MAX_HALVINGS = 30
A_CAP = 1e4
_LOG2PI = math.log(2.0 * math.pi)


class EstimationError(RuntimeError):
    pass


@dataclass
class FitReport:
    psi: HyperParams
    loglik: float
    score_norm: float
    iterations: int
    converged: bool
    step_halvings: int
    at_boundary: bool = False


@dataclass
class BatchFit:
    """Stacked results of :func:`fit_ml_batch`; ``u`` is ``V^{-1}(y - X beta)``."""

    beta: np.ndarray
    tau2: np.ndarray
    rho: np.ndarray
    loglik: np.ndarray
    score_norm: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    step_halvings: np.ndarray
    at_boundary: np.ndarray
    u: np.ndarray

    def report(self, k: int) -> FitReport:
        return FitReport(
            psi=HyperParams(self.beta[k], float(self.tau2[k]), float(self.rho[k])),
            loglik=float(self.loglik[k]),
            score_norm=float(self.score_norm[k]),
            iterations=int(self.iterations[k]),
            converged=bool(self.converged[k]),
            step_halvings=int(self.step_halvings[k]),
            at_boundary=bool(self.at_boundary[k]),
        )


# ---------------------------------------------------------------------------
# Likelihood pieces for a single problem
# ---------------------------------------------------------------------------


def _marginal_cov(tau2, rho, W, D):
    D = np.asarray(D, dtype=float)
    return sar_covariance(tau2, rho, W, m=D.size) + np.diag(D)


def log_likelihood(psi: HyperParams, y, X, W, D) -> float:
    """Gaussian marginal log-likelihood of ``y ~ N(X beta, D + G)`` including ``-m/2 log 2 pi``."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float).reshape(y.size, -1)
    V = _marginal_cov(psi.tau2, psi.rho, W, D)
    try:
        L = np.linalg.cholesky(V)
    except np.linalg.LinAlgError as exc:
        raise EstimationError("marginal covariance is not positive definite") from exc
    r = y - (X @ psi.beta if X.shape[1] else 0.0)
    z = np.linalg.solve(L, r)
    return float(-0.5 * (y.size * _LOG2PI + 2 * np.sum(np.log(np.diag(L))) + z @ z))


def gls_beta(tau2: float, rho: float, y, X, W, D) -> np.ndarray:
    """``(X' V^-1 X)^-1 X' V^-1 y``."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float).reshape(y.size, -1)
    if X.shape[1] == 0:
        return np.zeros(0)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise EstimationError("design matrix is rank deficient")
    V = _marginal_cov(tau2, rho, W, D)
    ViX = np.linalg.solve(V, X)
    return np.linalg.solve(X.T @ ViX, ViX.T @ y)


def _derivs(tau2, rho, W, D):
    """V^-1, dV/dtau2 and dV/drho for one problem."""
    m = np.asarray(D).size
    if W is None:
        Cinv = np.eye(m)
        A = np.zeros((m, m))
    else:
        Binv = np.linalg.inv(np.eye(m) - rho * W)
        Cinv = Binv.T @ Binv
        M = W + W.T - 2.0 * rho * (W @ W.T)
        A = tau2 * Cinv @ M @ Cinv
    V = tau2 * Cinv + np.diag(D)
    return np.linalg.inv(V), Cinv, A


def score(psi: HyperParams, y, X, W, D) -> tuple[float, float]:
    """Partial derivatives of :func:`log_likelihood` in ``tau2`` and ``rho`` at fixed ``beta``."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float).reshape(y.size, -1)
    Vinv, Cinv, A = _derivs(psi.tau2, psi.rho, W, D)
    u = Vinv @ (y - (X @ psi.beta if X.shape[1] else 0.0))
    s_tau = -0.5 * np.sum(Vinv * Cinv) + 0.5 * u @ Cinv @ u
    s_rho = -0.5 * np.sum(Vinv * A) + 0.5 * u @ A @ u
    return float(s_tau), float(s_rho)


def fisher_info(tau2: float, rho: float, W, D) -> np.ndarray:
    """Expected information for ``(tau2, rho)``; ``tr(V^-1 dV_k V^-1 dV_l) / 2``."""
    Vinv, Cinv, A = _derivs(tau2, rho, W, D)
    E1 = Vinv @ Cinv
    E2 = Vinv @ A
    i11 = 0.5 * np.sum(E1 * E1.T)
    i12 = 0.5 * np.sum(E1 * E2.T)
    i22 = 0.5 * np.sum(E2 * E2.T)
    return np.array([[i11, i12], [i12, i22]])


# ---------------------------------------------------------------------------
# Batched Fisher scoring
# ---------------------------------------------------------------------------


def symmetrizer(W, rtol: float = 1e-10) -> np.ndarray | None:
    """Positive ``d`` with ``diag(d) W`` symmetric, or None if there is none.

    Row-standardized symmetric weights always have one (``d`` is the row
    sum before standardization). Deleting rows and columns keeps the
    property, so the vector of the full matrix serves every submatrix.
    """
    W = np.asarray(W, dtype=float)
    nz = W != 0
    if np.any(nz != nz.T) or np.any(W < 0):
        return None
    m = W.shape[0]
    d = np.full(m, np.nan)
    for start in range(m):
        if not np.isnan(d[start]):
            continue
        d[start] = 1.0
        stack = [start]
        while stack:
            i = stack.pop()
            for j in np.flatnonzero(nz[i]):
                if np.isnan(d[j]):
                    d[j] = d[i] * W[i, j] / W[j, i]
                    stack.append(j)
    K = d[:, None] * W
    scale = np.abs(K).max() if K.size else 1.0
    if not np.allclose(K, K.T, rtol=rtol, atol=rtol * scale):
        return None
    return d


@dataclass(frozen=True)
class SpatialBasis:
    """Stacked eigendecompositions ``W = P diag(lam) P^{-1}`` with real spectra."""

    lam: np.ndarray
    P: np.ndarray
    Pinv: np.ndarray

    @classmethod
    def build(cls, Ws, d) -> "SpatialBasis":
        """``d`` (B, n) symmetrizes each matrix in ``Ws`` (B, n, n)."""
        Ws = np.asarray(Ws, dtype=float)
        r = np.sqrt(np.asarray(d, dtype=float))
        S = r[:, :, None] * Ws / r[:, None, :]
        lam, U = np.linalg.eigh(0.5 * (S + np.swapaxes(S, 1, 2)))
        return cls(lam, U / r[:, :, None], np.swapaxes(U, 1, 2) * r[:, None, :])

    def take(self, k) -> "SpatialBasis":
        return SpatialBasis(self.lam[k], self.P[k], self.Pinv[k])


def _spatial_pre(W, D):
    """Per-problem constants for the spatial evaluation: ``D W`` and ``W' D W``."""
    W = np.asarray(W, dtype=float)
    DW = D[:, :, None] * W
    return DW, np.swapaxes(W, 1, 2) @ DW


def _eval_batch(Y, X, D, W, tau2, rho, spatial, pre=None, basis=None):
    """Log-likelihood at the GLS beta, score and expected information for stacked problems.

    The spatial branch works with ``M = B' D B + tau2 I`` where
    ``B = I - rho W``, so that ``V^{-1} = B M^{-1} B'`` and
    ``log|V| = log|M| - 2 log|B|``. In that basis ``V^{-1} dV/dtau2`` is
    similar to ``M^{-1}`` and ``V^{-1} dV/drho`` to
    ``tau2 M^{-1} (R + R')`` with ``R = B^{-1} W``, which gives the traces
    in the information matrix without forming ``V``. With a
    :class:`SpatialBasis`, ``log|B|`` and ``R`` come from the spectrum of W.
    Problems whose ``M`` fails to factor get ``ll = -inf``.
    """
    Bsz, n = Y.shape
    p = X.shape[2]
    ok = np.ones(Bsz, dtype=bool)
    if spatial:
        DW, WtDW = pre if pre is not None else _spatial_pre(W, D)
        r3 = rho[:, None, None]
        eye = np.eye(n)
        BtDW = DW - r3 * WtDW
        M = -r3 * (DW + np.swapaxes(DW, 1, 2)) + (r3 * r3) * WtDW
        M[:, np.arange(n), np.arange(n)] += D + tau2[:, None]
        try:
            L = np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            L = np.empty_like(M)
            for k in range(Bsz):
                try:
                    L[k] = np.linalg.cholesky(M[k])
                except np.linalg.LinAlgError:
                    ok[k] = False
                    L[k] = eye
                    M[k] = eye
        logdet_M = 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
        Minv = np.linalg.inv(M)
        Minv = 0.5 * (Minv + np.swapaxes(Minv, 1, 2))
        if basis is not None:
            one_m = 1.0 - rho[:, None] * basis.lam
            ok &= np.all(one_m > 0, axis=1)
            one_m = np.where(one_m > 0, one_m, 1.0)
            logdet_B = np.sum(np.log(one_m), axis=1)
            R = (basis.P * (basis.lam / one_m)[:, None, :]) @ basis.Pinv
        else:
            sign, logdet_B = np.linalg.slogdet(eye - r3 * W)
            ok &= sign > 0
            R = np.linalg.solve(eye - r3 * W, W)
        Wt = np.swapaxes(W, 1, 2)
        zy = Y - rho[:, None] * np.einsum("bij,bj->bi", Wt, Y)
        if p:
            Z = X - r3 * (Wt @ X)
            ZtMi = np.swapaxes(Z, 1, 2) @ Minv
            beta = np.linalg.solve(ZtMi @ Z, (ZtMi @ zy[:, :, None]))[:, :, 0]
            r = Y - np.einsum("bnp,bp->bn", X, beta)
            z = zy - np.einsum("bnp,bp->bn", Z, beta)
        else:
            beta = np.zeros((Bsz, 0))
            r, z = Y, zy
        v = np.einsum("bij,bj->bi", Minv, z)
        Wv = np.einsum("bij,bj->bi", W, v)
        u = v - rho[:, None] * Wv
        quad = np.sum(z * v, axis=1)
        logdet = logdet_M - 2.0 * logdet_B
        s_tau = -0.5 * np.trace(Minv, axis1=1, axis2=2) + 0.5 * np.sum(v * v, axis=1)
        s_rho = (
            np.sum(Minv * np.swapaxes(BtDW, 1, 2), axis=(1, 2))
            - np.trace(R, axis1=1, axis2=2)
            + np.sum(r * Wv, axis=1)
            - np.einsum("bi,bij,bj->b", v, BtDW, v)
        )
        N = Minv @ (R + np.swapaxes(R, 1, 2))
        t2 = tau2
        i11 = 0.5 * np.sum(Minv * Minv, axis=(1, 2))
        i12 = 0.5 * t2 * np.sum(Minv * np.swapaxes(N, 1, 2), axis=(1, 2))
        i22 = 0.5 * t2 * t2 * np.sum(N * np.swapaxes(N, 1, 2), axis=(1, 2))
        S = np.stack([s_tau, s_rho], axis=1)
        info = np.stack([np.stack([i11, i12], 1), np.stack([i12, i22], 1)], 1)
    else:
        v = D + tau2[:, None]
        ok &= np.all(v > 0, axis=1)
        v = np.where(v > 0, v, 1.0)
        vinv = 1.0 / v
        logdet = np.sum(np.log(v), axis=1)
        if p:
            Xw = X * vinv[:, :, None]
            beta = np.linalg.solve(np.swapaxes(Xw, 1, 2) @ X, np.einsum("bnp,bn->bp", Xw, Y)[:, :, None])[:, :, 0]
            r = Y - np.einsum("bnp,bp->bn", X, beta)
        else:
            beta = np.zeros((Bsz, 0))
            r = Y
        u = r * vinv
        quad = np.sum(r * u, axis=1)
        s_tau = -0.5 * vinv.sum(1) + 0.5 * np.sum(u * u, axis=1)
        S = s_tau[:, None]
        info = (0.5 * np.sum(vinv * vinv, axis=1))[:, None, None]
    ll = -0.5 * (n * _LOG2PI + logdet + quad)
    ll = np.where(ok, ll, -np.inf)
    return {"ll": ll, "beta": beta, "u": u, "score": S, "info": info}


def _projected(S, tau2, rho):
    P = S.copy()
    P[:, 0] = np.where((tau2 <= TAU2_FLOOR) & (P[:, 0] < 0), 0.0, P[:, 0])
    if P.shape[1] > 1:
        P[:, 1] = np.where((rho >= RHO_MAX) & (P[:, 1] > 0), 0.0, P[:, 1])
        P[:, 1] = np.where((rho <= -RHO_MAX) & (P[:, 1] < 0), 0.0, P[:, 1])
    return P


def _decrement(S, info):
    """``S' I^{-1} S`` over the free components (frozen ones have S = 0)."""
    if S.shape[1] == 1:
        return S[:, 0] ** 2 / info[:, 0, 0]
    f = (S != 0).astype(float)
    A = info * f[:, :, None] * f[:, None, :] + (1.0 - f)[:, :, None] * np.eye(2)
    with np.errstate(invalid="ignore", divide="ignore"):
        try:
            return np.sum(S * np.linalg.solve(A, S[:, :, None])[:, :, 0], axis=1)
        except np.linalg.LinAlgError:
            return np.full(S.shape[0], np.inf)


def _take(ev, idx):
    return {k: v[idx] for k, v in ev.items()}


def _put(ev, idx, sub):
    for k in ev:
        ev[k][idx] = sub[k]


def _ols_start(Y, X, D):
    B, n = Y.shape
    if X.shape[2]:
        XtX = np.swapaxes(X, 1, 2) @ X
        b = np.linalg.solve(XtX, np.einsum("bnp,bn->bp", X, Y)[:, :, None])[:, :, 0]
        r = Y - np.einsum("bnp,bp->bn", X, b)
    else:
        r = Y
    v = np.mean(r * r, axis=1)
    return np.maximum(np.maximum(v - D.mean(axis=1), 0.01 * v), 10 * TAU2_FLOOR)


def fit_ml_batch(
    Y,
    X,
    D,
    W=None,
    tau2_init=None,
    rho_init=None,
    tol: float = SCORE_TOL,
    maxiter: int = MAX_ITER,
    basis: SpatialBasis | None = None,
) -> BatchFit:
    """Fisher scoring for a stack of independent problems of equal size.

    ``Y`` and ``D`` are (B, n), ``X`` is (B, n, p) and ``W`` is (B, n, n)
    or None for the non-spatial models (rho held at 0, scoring on tau2
    only). Steps that leave the parameter box are clipped onto it; a step
    that lowers the log-likelihood is halved, at most 30 times. A problem
    converges once the projected score norm is below ``tol`` and the
    relative log-likelihood change is below 1e-10. The score test is
    also passed when ``S' I^{-1} S`` falls below 1e-12, which is the
    scale-free form of the same rule and matters when tau2 is tiny.
    """
    Y = np.asarray(Y, dtype=float)
    Bn, n = Y.shape
    X = np.asarray(X, dtype=float).reshape(Bn, n, -1)
    D = np.broadcast_to(np.asarray(D, dtype=float), Y.shape).copy()
    spatial = W is not None
    if spatial:
        W = np.broadcast_to(np.asarray(W, dtype=float), (Bn, n, n))
    if n <= X.shape[2]:
        raise EstimationError("need more areas than regression coefficients")

    tau2 = _ols_start(Y, X, D) if tau2_init is None else np.array(np.broadcast_to(tau2_init, (Bn,)), dtype=float)
    rho = np.zeros(Bn) if (rho_init is None or not spatial) else np.array(np.broadcast_to(rho_init, (Bn,)), float)
    pre = _spatial_pre(W, D) if spatial else None
    if not spatial:
        basis = None
    ev = _eval_batch(Y, X, D, W, tau2, rho, spatial, pre, basis)
    if not np.all(np.isfinite(ev["ll"])):
        raise EstimationError("initial point has a singular marginal covariance")

    iters = np.zeros(Bn, dtype=int)
    halvings = np.zeros(Bn, dtype=int)
    converged = np.zeros(Bn, dtype=bool)
    active = np.ones(Bn, dtype=bool)
    ll_prev = np.full(Bn, np.nan)
    # secant-corrected scoring matrix; NaN marks "use the information matrix"
    H = np.full((Bn, 2, 2), np.nan)

    for _ in range(maxiter):
        Sp = _projected(ev["score"], tau2, rho)
        pnorm = np.linalg.norm(Sp, axis=1)
        a_idx = np.flatnonzero(active)
        pnorm_ok = pnorm < tol
        pnorm_ok[a_idx] |= _decrement(Sp[a_idx], ev["info"][a_idx]) < DECREMENT_TOL
        small_change = np.abs(ev["ll"] - ll_prev) <= LL_RTOL * np.maximum(1.0, np.abs(ev["ll"]))
        newly = active & pnorm_ok & small_change
        converged |= newly
        active &= ~newly
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        iters[idx] += 1
        # parameters held at a bound by an outward score are frozen for this step
        S_raw = ev["score"][idx].copy()
        S = _projected(S_raw, tau2[idx], rho[idx])
        if spatial:
            free = S != 0
            both = free.all(axis=1)
            info = ev["info"][idx]
            use_h = both & ~np.isnan(H[idx, 0, 0])
            info[use_h] = H[idx[use_h]]
            f = free.astype(float)
            info = info * f[:, :, None] * f[:, None, :] + (1.0 - f)[:, :, None] * np.eye(2)
            ridge = 1e-10 * np.max(np.abs(np.diagonal(info, axis1=1, axis2=2)), axis=1)
            info = info + ridge[:, None, None] * np.eye(2)
            step = np.linalg.solve(info, S[:, :, None])[:, :, 0]
        else:
            step = S / ev["info"][idx][:, :, 0]
        gain = np.sum(S * step, axis=1)
        psi_old = np.stack([tau2[idx], rho[idx]], axis=1)
        lam = np.ones(idx.size)
        if spatial:
            # rho moves at most 90% of the way to the bound it heads for, and
            # never more than half the box (longer steps come from flat profiles)
            dr = np.abs(step[:, 1])
            room = np.where(step[:, 1] > 0, RHO_MAX - rho[idx], rho[idx] + RHO_MAX)
            with np.errstate(divide="ignore", invalid="ignore"):
                lam = np.where(dr > 0, np.minimum(1.0, np.minimum(1.0, 0.9 * room) / dr), 1.0)
        pending = np.arange(idx.size)
        ll_old = ev["ll"][idx]
        ll_prev[idx] = ll_old
        slack = 1e-12 * np.maximum(1.0, np.abs(ll_old))
        for h in range(MAX_HALVINGS + 1):
            k = idx[pending]
            t_new = np.maximum(tau2[k] + lam[pending] * step[pending, 0], TAU2_FLOOR)
            if spatial:
                r_new = np.clip(rho[k] + lam[pending] * step[pending, 1], -RHO_MAX, RHO_MAX)
            else:
                r_new = rho[k]
            sub = _eval_batch(
                Y[k], X[k], D[k], W[k] if spatial else None, t_new, r_new, spatial,
                (pre[0][k], pre[1][k]) if spatial else None,
                None if basis is None else basis.take(k),
            )
            ok = sub["ll"] >= ll_old[pending] - slack[pending]
            if ok.any():
                acc = k[ok]
                tau2[acc] = t_new[ok]
                rho[acc] = r_new[ok]
                _put(ev, acc, _take(sub, np.flatnonzero(ok)))
            # the convergence rule is met by a trial change this small at a point
            # whose score is already below tolerance
            done = ~ok & (np.abs(sub["ll"] - ll_old[pending]) <= LL_RTOL * np.maximum(1.0, np.abs(ll_old[pending])))
            done &= pnorm_ok[k]
            if done.any():
                converged[k[done]] = True
                active[k[done]] = False
            pending = pending[~ok & ~done]
            # below round-off the likelihood cannot resolve further ascent
            flat = lam[pending] * gain[pending] < slack[pending]
            if pending.size == 0 or flat.all():
                break
            halvings[idx[pending]] += 1
            lam[pending] *= 0.5
        if pending.size:
            stuck = idx[pending]
            Sp_s = _projected(ev["score"][stuck], tau2[stuck], rho[stuck])
            converged[stuck] = (np.linalg.norm(Sp_s, axis=1) < tol) | (
                _decrement(Sp_s, ev["info"][stuck]) < DECREMENT_TOL
            )
            active[stuck] = False
        if spatial:
            H[idx] = np.nan
            keep = np.ones(idx.size, dtype=bool)
            keep[pending] = False
            keep &= both
            d = np.stack([tau2[idx], rho[idx]], axis=1) - psi_old
            yv = S_raw - ev["score"][idx]  # minus the change in score
            curv = np.sum(d * yv, axis=1)
            keep &= curv > 1e-12 * np.linalg.norm(d, axis=1) * np.linalg.norm(yv, axis=1)
            if keep.any():
                Bk = info[keep]
                dk, yk = d[keep], yv[keep]
                Bd = np.einsum("bij,bj->bi", Bk, dk)
                H[idx[keep]] = (
                    Bk
                    + yk[:, :, None] * yk[:, None, :] / curv[keep][:, None, None]
                    - Bd[:, :, None] * Bd[:, None, :] / np.sum(dk * Bd, axis=1)[:, None, None]
                )

    pnorm = np.linalg.norm(_projected(ev["score"], tau2, rho), axis=1)
    at_boundary = (tau2 <= TAU2_FLOOR) | (np.abs(rho) >= RHO_MAX)
    return BatchFit(
        beta=ev["beta"],
        tau2=tau2,
        rho=rho,
        loglik=ev["ll"],
        score_norm=pnorm,
        iterations=iters,
        converged=converged,
        step_halvings=halvings,
        at_boundary=at_boundary,
        u=ev["u"],
    )


def fit_ml(y, X, W, D, spec: LinkingSpec | None = None, **kwargs) -> FitReport:
    """Fit one problem. Non-spatial specs ignore ``W`` and hold rho at 0."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float).reshape(y.size, -1)
    if spec is not None and not spec.spatial:
        W = None
    Ws = None if W is None else np.asarray(W, dtype=float)[None]
    if Ws is not None and "basis" not in kwargs:
        d = symmetrizer(Ws[0])
        kwargs["basis"] = None if d is None else SpatialBasis.build(Ws, d[None])
    fit = fit_ml_batch(y[None], X[None], np.asarray(D, float)[None], Ws, **kwargs)
    return fit.report(0)


# ---------------------------------------------------------------------------
# Gamma prior on sampling precisions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PrecisionPrior:
    """Gamma(shape, rate) prior on an area's sampling precision ``1/sigma^2``."""

    shape: float
    rate: float

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise ValueError("gamma shape and rate must be positive")

    @property
    def typical_sigma(self) -> float:
        """``1/sqrt(E[precision])``."""
        return math.sqrt(self.rate / self.shape)


@dataclass
class GammaHyperFit:
    a: float
    b: float
    loglik: float
    gradient_norm: float
    converged: bool
    at_cap: bool = False

    def precision_prior(self, n: int) -> PrecisionPrior:
        """Prior for ``1/sigma^2 = n / omega^2`` of an area with ``n`` records."""
        return PrecisionPrior(self.a, self.b / n)


def _gamma_terms(omega2, n):
    c = 0.5 * (np.asarray(n, dtype=float) - 1.0)
    return c, c * np.asarray(omega2, dtype=float)


def gamma_loglik(a: float, b: float, omega2, n) -> float:
    """Marginal log-likelihood of (a, b) up to a constant."""
    c, cw = _gamma_terms(omega2, n)
    S = c.size
    return float(
        S * (a * math.log(b) - special.gammaln(a)) + np.sum(special.gammaln(c + a) - (c + a) * np.log(cw + b))
    )


def gamma_gradient(a: float, b: float, omega2, n) -> np.ndarray:
    c, cw = _gamma_terms(omega2, n)
    S = c.size
    da = S * (math.log(b) - numerics.digamma(a)) + np.sum(numerics.digamma(c + a) - np.log(cw + b))
    db = S * a / b - np.sum((c + a) / (cw + b))
    return np.array([da, db])


def gamma_hessian(a: float, b: float, omega2, n) -> np.ndarray:
    c, cw = _gamma_terms(omega2, n)
    S = c.size
    daa = np.sum(numerics.trigamma(c + a)) - S * numerics.trigamma(a)
    dab = S / b - np.sum(1.0 / (cw + b))
    dbb = np.sum((c + a) / (cw + b) ** 2) - S * a / b**2
    return np.array([[daa, dab], [dab, dbb]])


def fit_gamma_hyper(omega2_hat, n, exclude=(), tol: float = 1e-6) -> GammaHyperFit:
    """Marginal ML for ``1/omega^2 ~ Gamma(a, rate b)`` from unbiased variance estimates.

    ``exclude`` lists positions to leave out. The fit is done on data
    rescaled by the median variance (``b`` scales with the data), with
    L-BFGS-B on the box ``a <= 1e4`` followed by Newton polishing when the
    optimum is interior.
    """
    w = np.asarray(omega2_hat, dtype=float)
    nn = np.asarray(n, dtype=float)
    keep = np.ones(w.size, dtype=bool)
    keep[list(exclude)] = False
    w, nn = w[keep], nn[keep]
    if w.size < 2:
        raise EstimationError("need at least two areas to fit the variance prior")
    if np.any(nn < 2) or np.any(w <= 0):
        raise EstimationError("every area needs n >= 2 and a positive variance estimate")
    scale = float(np.median(w))
    ws = w / scale

    phi = 1.0 / ws
    vphi = phi.var()
    a0 = phi.mean() ** 2 / vphi if vphi > 0 else 100.0
    a0 = float(np.clip(a0, 0.5, 1e3))
    b0 = a0 / phi.mean()

    def fg(x):
        return gamma_loglik(x[0], x[1], ws, nn), gamma_gradient(x[0], x[1], ws, nn)

    res = numerics.maximize_box(fg, [a0, b0], [(1e-6, A_CAP), (1e-12, None)], tol=tol * 1e-2, maxiter=1000)
    a, b = res.x
    at_cap = a >= A_CAP * (1 - 1e-9)
    if not at_cap:
        for _ in range(20):
            g = gamma_gradient(a, b, ws, nn)
            if np.linalg.norm(g) < 1e-12:
                break
            H = gamma_hessian(a, b, ws, nn)
            try:
                step = np.linalg.solve(H, g)
            except np.linalg.LinAlgError:
                break
            a_new, b_new = a - step[0], b - step[1]
            if not (0 < a_new < A_CAP and b_new > 0):
                break
            if gamma_loglik(a_new, b_new, ws, nn) < gamma_loglik(a, b, ws, nn) - 1e-12:
                break
            a, b = a_new, b_new
    else:
        warnings.warn("gamma shape hit its cap; variance estimates are nearly identical", stacklevel=2)
        a = A_CAP
    # gradient is reported on the original scale of b
    grad = gamma_gradient(a, b * scale, w, nn)
    if at_cap and grad[0] > 0:
        grad[0] = 0.0
    gnorm = float(np.linalg.norm(grad))
    return GammaHyperFit(
        a=float(a),
        b=float(b * scale),
        loglik=gamma_loglik(a, b * scale, w, nn),
        gradient_norm=gnorm,
        converged=gnorm < tol,
        at_cap=bool(at_cap),
    )


# ---------------------------------------------------------------------------
# Leave-one-out orchestration
# ---------------------------------------------------------------------------


@dataclass
class AreaPrior:
    """Indirect information for one area, built without that area's data."""

    normal: NormalPrior | None
    precision: PrecisionPrior | None = None
    fit: FitReport | None = None
    error: str | None = None


def loo_problems(y, X, D, W=None):
    """Stack the m leave-one-out sub-problems of a table.

    The proximity submatrix for each problem is the full matrix with row and
    column j deleted, not re-standardized.
    """
    y = np.asarray(y, dtype=float)
    m = y.size
    X = np.asarray(X, dtype=float).reshape(m, -1)
    D = np.asarray(D, dtype=float)
    keep = ~np.eye(m, dtype=bool)
    idx = np.array([np.flatnonzero(keep[j]) for j in range(m)])
    Ys = y[idx]
    Xs = X[idx]
    Ds = D[idx]
    Ws = None
    if W is not None:
        Ws = W[idx[:, :, None], idx[:, None, :]]
    return idx, Ys, Xs, Ds, Ws


def loo_basis(W) -> SpatialBasis | None:
    """Spectral bases of the m leave-one-out proximity submatrices, if W is symmetrizable.

    Depends on W only, so a caller reusing one W across many data sets can
    build it once.
    """
    W = np.asarray(W, dtype=float)
    d = symmetrizer(W)
    if d is None:
        return None
    m = W.shape[0]
    idx = np.array([np.flatnonzero(np.arange(m) != j) for j in range(m)])
    return SpatialBasis.build(W[idx[:, :, None], idx[:, None, :]], d[idx])


def loo_normal_priors(y, X, D, W=None, chunk: int = 64, basis: SpatialBasis | None = None):
    """Leave-one-out fits and the resulting conditional priors.

    Returns ``(mu, tau2, fit)`` where ``fit`` is a :class:`BatchFit` with
    one row per excluded area. ``basis`` may carry a precomputed
    :func:`loo_basis` for ``W``.
    """
    y = np.asarray(y, dtype=float)
    m = y.size
    X = np.asarray(X, dtype=float).reshape(m, -1)
    D = np.asarray(D, dtype=float)
    if m - 1 <= X.shape[1] + 1:
        raise EstimationError("too few areas for leave-one-out fitting")
    idx, Ys, Xs, Ds, Ws = loo_problems(y, X, D, W)
    if W is not None and basis is None:
        basis = loo_basis(W)
    parts = []
    for s in range(0, m, chunk):
        sl = slice(s, s + chunk)
        parts.append(
            fit_ml_batch(
                Ys[sl], Xs[sl], Ds[sl], None if Ws is None else Ws[sl],
                basis=None if (Ws is None or basis is None) else basis.take(sl),
            )
        )
    fit = BatchFit(*(np.concatenate([getattr(p, f) for p in parts]) for f in BatchFit.__dataclass_fields__))
    theta_sub = Ys - Ds * fit.u
    theta_loo = np.zeros((m, m))
    theta_loo[np.arange(m)[:, None], idx] = theta_sub
    mu, tau2 = conditional_priors_loo(theta_loo, fit.beta, fit.tau2, fit.rho, X, W)
    return mu, tau2, fit


def leave_one_out_priors(table: AreaTable, spec: LinkingSpec, mode: str = "z") -> list[AreaPrior | None]:
    """Per-area priors, each computed from the other areas only.

    ``mode='z'`` gives normal priors; ``mode='t'`` also fits the gamma prior
    on sampling precisions with the area excluded, using the estimated
    variances as plug-in sampling variances in the linking-model fit.
    Ineligible areas get ``None``. Areas whose fit fails get an
    :class:`AreaPrior` with ``error`` set.
    """
    if mode not in ("z", "t"):
        raise ValueError("mode must be 'z' or 't'")
    spec.check(table)
    elig = table.eligible
    sub = table.subset(elig) if not elig.all() else table
    if mode == "t" and any(a.sigma2_hat is None for a in sub.areas):
        raise InputError("t mode needs estimated variances with degrees of freedom")
    X = spec.design(sub.covariates)
    D = sub.variances
    W = sub.W if spec.spatial else None
    mu, tau2, fit = loo_normal_priors(sub.y, X, D, W)

    precs: list[PrecisionPrior | None] = [None] * sub.m
    errors: list[str | None] = [None] * sub.m
    if mode == "t":
        n = np.array([a.n if a.n is not None else a.dof + 1 for a in sub.areas], dtype=float)
        omega2 = D * n
        for j in range(sub.m):
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    g = fit_gamma_hyper(omega2, n, exclude=[j])
                precs[j] = g.precision_prior(int(n[j]))
            except (EstimationError, numerics.NumericsError) as exc:
                errors[j] = f"variance prior fit failed: {exc}"

    out_sub: list[AreaPrior] = []
    for j in range(sub.m):
        rep = fit.report(j)
        err = errors[j]
        normal = None
        if not np.isfinite(mu[j]) or not tau2[j] > 0:
            err = err or "linking-model fit failed"
        else:
            normal = NormalPrior(float(mu[j]), float(tau2[j]))
        if not rep.converged:
            warnings.warn(f"area {sub.areas[j].id}: leave-one-out fit did not converge", stacklevel=2)
        out_sub.append(AreaPrior(normal, precs[j], rep, err))
        if err:
            warnings.warn(f"area {sub.areas[j].id}: {err}; falling back to the direct interval", stacklevel=2)

    it = iter(out_sub)
    return [next(it) if e else None for e in elig]
