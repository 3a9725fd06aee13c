"""SAR covariance, leave-one-out conditional priors and EBLUPs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import HyperParams

COND_LIMIT = 1e12


class LinkingError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class NormalPrior:
    mu: float
    tau2: float

    def __post_init__(self):
        if not self.tau2 > 0:
            raise ValueError("prior variance must be positive")


def _sar_factor(rho: float, W: np.ndarray) -> np.ndarray:
    m = W.shape[0]
    B = np.eye(m) - rho * W
    if np.linalg.cond(B) > COND_LIMIT:
        raise LinkingError(f"I - rho W is numerically singular at rho={rho}")
    return B


def sar_precision(tau2: float, rho: float, W: np.ndarray | None, m: int | None = None) -> np.ndarray:
    """Inverse of the SAR covariance, ``(I - rho W)(I - rho W')/tau2``."""
    if W is None or rho == 0:
        m = m if W is None else W.shape[0]
        return np.eye(m) / tau2
    B = _sar_factor(rho, np.asarray(W, dtype=float))
    return B @ B.T / tau2


def sar_covariance(tau2: float, rho: float, W: np.ndarray | None, m: int | None = None) -> np.ndarray:
    """``tau2 * [(I - rho W)(I - rho W')]^{-1}``; exactly ``tau2 * I`` when rho is 0."""
    if not tau2 > 0:
        raise ValueError("tau2 must be positive")
    if not abs(rho) < 1:
        raise ValueError("rho must lie in (-1, 1)")
    if W is None or rho == 0:
        m = m if W is None else np.asarray(W).shape[0]
        return tau2 * np.eye(m)
    B = _sar_factor(rho, np.asarray(W, dtype=float))
    Binv = np.linalg.inv(B)
    G = tau2 * (Binv.T @ Binv)
    return 0.5 * (G + G.T)


def conditional_prior(
    j: int,
    theta_hat_minus_j: np.ndarray,
    psi: HyperParams,
    X: np.ndarray,
    W: np.ndarray | None,
) -> NormalPrior:
    """Distribution of area ``j``'s mean given plug-in means of all other areas.

    ``X`` and ``W`` cover all m areas; ``theta_hat_minus_j`` has the m-1
    other areas in their original order. Uses the precision form of the
    Gaussian conditional, ``mean = x_j'b - Q_j,-j (theta_-j - X_-j b) / Q_jj``
    and ``var = 1/Q_jj``, which equals the Schur-complement expression in
    terms of the covariance.
    """
    X = np.asarray(X, dtype=float)
    m = X.shape[0]
    theta = np.asarray(theta_hat_minus_j, dtype=float)
    if theta.shape != (m - 1,):
        raise ValueError(f"expected {m - 1} plug-in means, got shape {theta.shape}")
    mean = X @ psi.beta if X.shape[1] else np.zeros(m)
    if W is None or psi.rho == 0:
        return NormalPrior(float(mean[j]), float(psi.tau2))
    Q = sar_precision(psi.tau2, psi.rho, W)
    others = np.arange(m) != j
    qjj = Q[j, j]
    mu = mean[j] - Q[j, others] @ (theta - mean[others]) / qjj
    return NormalPrior(float(mu), float(1.0 / qjj))


def conditional_priors_loo(
    theta_loo: np.ndarray,
    beta: np.ndarray,
    tau2: np.ndarray,
    rho: np.ndarray,
    X: np.ndarray,
    W: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    """All m leave-one-out conditional priors at once.

    Row ``j`` of ``theta_loo`` (m x m) holds the plug-in means from the fit
    without area ``j``; its diagonal entry is ignored. ``beta`` is m x p and
    ``tau2``, ``rho`` have length m, one fit per excluded area.
    Returns prior means and variances.
    """
    m = theta_loo.shape[0]
    X = np.asarray(X, dtype=float)
    fitted = beta @ X.T if X.shape[1] else np.zeros((m, m))  # row j: X b_j
    own = fitted[np.arange(m), np.arange(m)]
    if W is None:
        return own.copy(), np.asarray(tau2, dtype=float).copy()
    Wsym = W + W.T
    WWt = W @ W.T
    # row j of (I - rho W)(I - rho W') at rho_j
    C = np.eye(m) - rho[:, None] * Wsym + (rho**2)[:, None] * WWt
    cjj = C[np.arange(m), np.arange(m)]
    resid = np.asarray(theta_loo, dtype=float) - fitted
    off = C.copy()
    off[np.arange(m), np.arange(m)] = 0.0
    resid = np.where(np.eye(m, dtype=bool), 0.0, resid)
    mu = own - np.sum(off * resid, axis=1) / cjj
    return mu, tau2 / cjj


def eblup(
    psi: HyperParams,
    y: np.ndarray,
    X: np.ndarray,
    W: np.ndarray | None,
    D: np.ndarray,
) -> np.ndarray:
    """Plug-in conditional means ``X b + G V^{-1} (y - X b)`` with ``V = D + G``."""
    y = np.asarray(y, dtype=float)
    D = np.asarray(D, dtype=float)
    if np.any(D <= 0):
        raise ValueError("sampling variances must be positive")
    X = np.asarray(X, dtype=float)
    mean = X @ psi.beta if X.shape[1] else np.zeros_like(y)
    G = sar_covariance(psi.tau2, psi.rho, W, m=y.size)
    V = G + np.diag(D)
    try:
        u = np.linalg.solve(V, y - mean)
    except np.linalg.LinAlgError as exc:
        raise LinkingError(f"singular marginal covariance: {exc}") from exc
    # G V^-1 r = r - D V^-1 r
    return y - D * u
