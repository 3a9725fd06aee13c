"""Area-level data model, proximity matrices and CSV ingestion."""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd


class InputError(ValueError):
    """Malformed user input (files, columns, dimensions)."""


class Variant(enum.Enum):
    EXCHANGEABLE = "exchangeable"
    COVARIATE = "covariate"
    SPATIAL = "spatial"
    FULL = "full"


class Method(enum.Enum):
    DIRECT = "direct"
    BAYES = "bayes"
    EB = "eb"
    FABZ = "fab-z"
    FABT = "fab-t"


@dataclass(frozen=True)
class AreaDatum:
    """One area: direct estimate plus its known or estimated sampling variance.

    ``eligible`` is False for areas whose variance could not be estimated
    (fewer than two observations); such areas carry neither ``sigma2`` nor
    ``sigma2_hat``.
    """

    id: str
    y: float
    sigma2: float | None = None
    sigma2_hat: float | None = None
    dof: int | None = None
    n: int | None = None
    x: tuple[float, ...] = ()
    centroid: tuple[float, float] | None = None
    eligible: bool = True

    def __post_init__(self):
        known = self.sigma2 is not None
        est = self.sigma2_hat is not None or self.dof is not None
        if known and est:
            raise InputError(f"area {self.id}: give either sigma2 or (sigma2_hat, dof), not both")
        if est and (self.sigma2_hat is None or self.dof is None):
            raise InputError(f"area {self.id}: sigma2_hat and dof must be given together")
        if self.eligible and not (known or est):
            raise InputError(f"area {self.id}: missing sampling variance")
        if known and not self.sigma2 > 0:
            raise InputError(f"area {self.id}: sigma2 must be positive")
        if est and not (self.sigma2_hat > 0 and self.dof >= 1):
            raise InputError(f"area {self.id}: need sigma2_hat > 0 and dof >= 1")
        if not math.isfinite(self.y):
            raise InputError(f"area {self.id}: non-finite direct estimate")

    @property
    def variance(self) -> float:
        """Known variance, else the estimate."""
        return self.sigma2 if self.sigma2 is not None else self.sigma2_hat

    @property
    def known_variance(self) -> bool:
        return self.sigma2 is not None


@dataclass(frozen=True)
class AreaTable:
    areas: tuple[AreaDatum, ...]
    W: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "areas", tuple(self.areas))
        if len(self.areas) == 0:
            raise InputError("empty area table")
        dims = {len(a.x) for a in self.areas}
        if len(dims) > 1:
            raise InputError("covariate dimension differs across areas")
        ids = [a.id for a in self.areas]
        if len(set(ids)) != len(ids):
            raise InputError("duplicate area ids")
        if self.W is not None:
            W = np.asarray(self.W, dtype=float)
            m = len(self.areas)
            if W.shape != (m, m):
                raise InputError(f"proximity matrix must be {m}x{m}, got {W.shape}")
            if np.any(np.diag(W) != 0):
                raise InputError("proximity matrix must have a zero diagonal")
            if np.any(W < 0):
                raise InputError("proximity matrix must be nonnegative")
            W.setflags(write=False)
            object.__setattr__(self, "W", W)

    @property
    def m(self) -> int:
        return len(self.areas)

    @property
    def ids(self) -> list[str]:
        return [a.id for a in self.areas]

    @property
    def y(self) -> np.ndarray:
        return np.array([a.y for a in self.areas], dtype=float)

    @property
    def variances(self) -> np.ndarray:
        return np.array([a.variance if a.eligible else np.nan for a in self.areas], dtype=float)

    @property
    def covariates(self) -> np.ndarray:
        k = len(self.areas[0].x)
        return np.array([a.x for a in self.areas], dtype=float).reshape(self.m, k)

    @property
    def eligible(self) -> np.ndarray:
        return np.array([a.eligible for a in self.areas], dtype=bool)

    def subset(self, mask: Sequence[bool] | np.ndarray, restandardize: bool = True) -> "AreaTable":
        """Table restricted to ``mask``; the proximity submatrix is re-standardized by default."""
        mask = np.asarray(mask, dtype=bool)
        areas = tuple(a for a, keep in zip(self.areas, mask) if keep)
        W = None
        if self.W is not None:
            W = self.W[np.ix_(mask, mask)]
            if restandardize:
                W = row_standardize(W)
        return AreaTable(areas, W)


@dataclass(frozen=True)
class LinkingSpec:
    """Which linking model to fit.

    Exchangeable and spatial models have a constant mean: an estimated
    intercept when ``intercept`` is True, else a mean fixed at zero.
    Covariate and full models regress on the area covariates, with a
    leading column of ones when ``intercept`` is True.
    """

    variant: Variant
    intercept: bool = True

    @classmethod
    def parse(cls, name: str, intercept: bool = True) -> "LinkingSpec":
        try:
            return cls(Variant(name.lower()), intercept)
        except ValueError:
            raise InputError(f"unknown linking model {name!r}") from None

    @property
    def spatial(self) -> bool:
        return self.variant in (Variant.SPATIAL, Variant.FULL)

    @property
    def uses_covariates(self) -> bool:
        return self.variant in (Variant.COVARIATE, Variant.FULL)

    def design(self, covariates: np.ndarray) -> np.ndarray:
        covariates = np.asarray(covariates, dtype=float)
        m = covariates.shape[0]
        cols = []
        if self.intercept:
            cols.append(np.ones((m, 1)))
        if self.uses_covariates:
            if covariates.ndim != 2 or covariates.shape[1] == 0:
                raise InputError(f"{self.variant.value} model requires covariates")
            cols.append(covariates)
        if not cols:
            return np.zeros((m, 0))
        return np.hstack(cols)

    def check(self, table: AreaTable) -> None:
        if self.spatial and table.W is None:
            raise InputError(f"{self.variant.value} model requires a proximity matrix")
        if self.uses_covariates and len(table.areas[0].x) == 0:
            raise InputError(f"{self.variant.value} model requires covariates")


@dataclass(frozen=True)
class HyperParams:
    beta: np.ndarray
    tau2: float
    rho: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        if not self.tau2 > 0:
            raise ValueError("tau2 must be positive")
        if not abs(self.rho) < 1:
            raise ValueError("rho must lie in (-1, 1)")


@dataclass(frozen=True)
class Interval:
    lower: float
    upper: float
    alpha: float
    method: Method

    def __post_init__(self):
        if not self.lower <= self.upper:
            raise ValueError(f"interval lower {self.lower} exceeds upper {self.upper}")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0, 1)")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def __contains__(self, value: float) -> bool:
        return self.lower < value < self.upper


# ---------------------------------------------------------------------------
# Proximity matrices
# ---------------------------------------------------------------------------


def row_standardize(W, return_isolated: bool = False):
    """Scale each nonzero row of ``W`` to sum to one.

    All-zero rows (isolated areas) are left as they are; pass
    ``return_isolated=True`` to also get a boolean mask of them.
    """
    W = np.array(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise InputError("proximity matrix must be square")
    if np.any(W < 0):
        raise InputError("proximity matrix must be nonnegative")
    sums = W.sum(axis=1)
    isolated = sums == 0
    W[~isolated] /= sums[~isolated, None]
    if isolated.any() and not return_isolated:
        warnings.warn(f"{int(isolated.sum())} isolated area(s) with no neighbours", stacklevel=2)
    if return_isolated:
        return W, isolated
    return W


def lattice_contiguity(rows: int, cols: int) -> np.ndarray:
    """Row-standardized rook (4-neighbour) contiguity on a rows x cols grid.

    Cells are numbered row-major.
    """
    if rows < 1 or cols < 1 or rows * cols < 2:
        raise InputError("lattice needs at least two cells")
    m = rows * cols
    A = np.zeros((m, m))
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if r + 1 < rows:
                A[i, i + cols] = A[i + cols, i] = 1.0
            if c + 1 < cols:
                A[i, i + 1] = A[i + 1, i] = 1.0
    return row_standardize(A)


def sqexp_proximity(centroids, scale: float = 1.0) -> np.ndarray:
    """Row-standardized squared-exponential weights between centroids.

    Distances are Euclidean on the raw coordinates divided by ``scale``;
    for (lon, lat) pairs no great-circle correction is applied.
    """
    P = np.asarray(centroids, dtype=float)
    if P.ndim != 2 or P.shape[0] < 2:
        raise InputError("need at least two centroids")
    diff = (P[:, None, :] - P[None, :, :]) / scale
    d2 = np.sum(diff * diff, axis=-1)
    K = np.exp(-d2)
    np.fill_diagonal(K, 0.0)
    return row_standardize(K)


def read_proximity_csv(path: str | Path) -> np.ndarray:
    """Dense header-free proximity matrix; row-standardized on load."""
    try:
        W = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc
    return row_standardize(W)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

AREA_ID = "area_id"
_AREA_RESERVED = {"area_id", "y", "sigma2", "sigma2_hat", "dof", "n", "lon", "lat", "eligible"}
_HOUSE_RESERVED = {"area_id", "value", "lon", "lat"}


@dataclass(frozen=True)
class IngestConfig:
    """Options for household-level ingestion.

    ``offset`` is added to raw values before the log transform.
    """

    log_transform: bool = True
    offset: float = 0.0
    min_n: int = 2
    value_column: str = "value"
    covariates: tuple[str, ...] | None = None


def _read_csv(path: str | Path) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, dtype={AREA_ID: str})
    except pd.errors.EmptyDataError:
        raise InputError(f"{path}: empty file") from None
    except FileNotFoundError:
        raise InputError(f"{path}: no such file") from None
    if df.empty:
        raise InputError(f"{path}: no data rows")
    return df


def _numeric(df: pd.DataFrame, cols: Iterable[str], path) -> None:
    for c in cols:
        if not pd.api.types.is_numeric_dtype(df[c]):
            raise InputError(f"{path}: column {c!r} is not numeric")
        if df[c].isna().any():
            raise InputError(f"{path}: column {c!r} has missing values")


def ingest_household_csv(path: str | Path, config: IngestConfig = IngestConfig()) -> AreaTable:
    """Aggregate unit-level records to area means with estimated variances.

    For each area the (optionally log-transformed) values give the mean, the
    sample variance with divisor n-1, ``sigma2_hat = var / n`` and
    ``dof = n - 1``. Areas with fewer than ``config.min_n`` records are kept
    but marked ineligible. Area covariates and coordinates are averaged over
    the area's records. Areas are returned sorted by id.
    """
    df = _read_csv(path)
    vcol = config.value_column
    missing = {AREA_ID, vcol} - set(df.columns)
    if missing:
        raise InputError(f"{path}: missing column(s) {sorted(missing)}")
    if config.covariates is None:
        cov_cols = [c for c in df.columns if c not in _HOUSE_RESERVED | {vcol}]
    else:
        cov_cols = list(config.covariates)
        absent = set(cov_cols) - set(df.columns)
        if absent:
            raise InputError(f"{path}: missing covariate column(s) {sorted(absent)}")
    has_loc = {"lon", "lat"} <= set(df.columns)
    _numeric(df, [vcol, *cov_cols, *(["lon", "lat"] if has_loc else [])], path)
    if df[AREA_ID].isna().any():
        raise InputError(f"{path}: missing area ids")

    vals = df[vcol].to_numpy(dtype=float) + config.offset
    if config.log_transform:
        if np.any(vals <= 0):
            raise InputError(f"{path}: non-positive values cannot be log-transformed (adjust the offset)")
        vals = np.log(vals)
    df = df.assign(_v=vals)

    areas = []
    for aid, grp in sorted(df.groupby(AREA_ID, sort=False), key=lambda kv: kv[0]):
        v = np.sort(grp["_v"].to_numpy())
        n = v.size
        x = tuple(float(grp[c].mean()) for c in cov_cols)
        cen = (float(grp["lon"].mean()), float(grp["lat"].mean())) if has_loc else None
        ybar = float(v.mean())
        if n >= max(config.min_n, 2):
            var = float(v.var(ddof=1))
            if var <= 0:
                warnings.warn(f"area {aid}: zero within-area variance, marked ineligible", stacklevel=2)
                areas.append(AreaDatum(str(aid), ybar, n=n, x=x, centroid=cen, eligible=False))
                continue
            areas.append(AreaDatum(str(aid), ybar, sigma2_hat=var / n, dof=n - 1, n=n, x=x, centroid=cen))
        else:
            areas.append(AreaDatum(str(aid), ybar, n=n, x=x, centroid=cen, eligible=False))
    return AreaTable(tuple(areas))


def read_area_csv(path: str | Path, W: np.ndarray | None = None) -> AreaTable:
    """Area-level CSV: ``area_id, y`` and either ``sigma2`` or ``sigma2_hat, dof``.

    Optional columns: ``n``, ``lon``, ``lat``, ``eligible``; every other
    column is a covariate, in file order. Blank variance cells are allowed
    only for rows with ``eligible`` = 0.
    """
    df = _read_csv(path)
    cols = set(df.columns)
    if not {AREA_ID, "y"} <= cols:
        raise InputError(f"{path}: need columns area_id and y")
    known = "sigma2" in cols
    est = {"sigma2_hat", "dof"} <= cols
    if not (known or est):
        raise InputError(f"{path}: need sigma2, or sigma2_hat and dof")
    cov_cols = [c for c in df.columns if c not in _AREA_RESERVED]
    has_loc = {"lon", "lat"} <= cols
    _numeric(df, ["y", *cov_cols, *(["lon", "lat"] if has_loc else [])], path)
    for c in ("sigma2", "sigma2_hat", "dof", "n"):
        if c in cols and not pd.api.types.is_numeric_dtype(df[c]):
            raise InputError(f"{path}: column {c!r} is not numeric")

    def opt(row, c, cast=float):
        if c not in cols or pd.isna(row[c]):
            return None
        return cast(row[c])

    areas = []
    for _, row in df.iterrows():
        eligible = bool(int(row["eligible"])) if "eligible" in cols and not pd.isna(row["eligible"]) else True
        s2 = opt(row, "sigma2")
        s2h = opt(row, "sigma2_hat")
        dof = opt(row, "dof", lambda v: int(round(v)))
        if s2 is not None:
            s2h = dof = None
        try:
            areas.append(
                AreaDatum(
                    id=str(row[AREA_ID]),
                    y=float(row["y"]),
                    sigma2=s2,
                    sigma2_hat=s2h,
                    dof=dof,
                    n=opt(row, "n", lambda v: int(round(v))),
                    x=tuple(float(row[c]) for c in cov_cols),
                    centroid=(float(row["lon"]), float(row["lat"])) if has_loc else None,
                    eligible=eligible and (s2 is not None or s2h is not None),
                )
            )
        except InputError as exc:
            raise InputError(f"{path}: {exc}") from None
    return AreaTable(tuple(areas), W)


def write_area_csv(table: AreaTable, path_or_buf) -> None:
    rows = []
    k = len(table.areas[0].x)
    for a in table.areas:
        row = {
            AREA_ID: a.id,
            "y": a.y,
            "sigma2": a.sigma2,
            "sigma2_hat": a.sigma2_hat,
            "dof": a.dof,
            "n": a.n,
            "eligible": int(a.eligible),
        }
        for i in range(k):
            row[f"x{i + 1}"] = a.x[i]
        if a.centroid is not None:
            row["lon"], row["lat"] = a.centroid
        rows.append(row)
    df = pd.DataFrame(rows)
    if df["sigma2"].isna().all():
        df = df.drop(columns="sigma2")
    else:
        df = df.drop(columns=["sigma2_hat", "dof"])
    df.to_csv(path_or_buf, index=False, float_format="%.10g")


def with_proximity(table: AreaTable, W: np.ndarray | None) -> AreaTable:
    return replace(table, W=W)
