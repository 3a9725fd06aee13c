"""Seeded Monte Carlo harness for interval widths and coverage on a lattice.

Each replication draws one covariate vector, one set of area means under
the SAR linking model and one set of direct estimates with unit sampling
variance. Every requested linking model is then fitted to the same data,
so all summaries for a setting come from one pass over the replications.

Replication ``r`` draws from ``SeedSequence(seed, spawn_key=(r,))``; the
results do not depend on the order or the process in which replications
run.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from . import numerics
from .domain import LinkingSpec, Variant, lattice_contiguity
from .estimation import EstimationError, SpatialBasis, fit_ml, loo_basis, loo_normal_priors, symmetrizer
from .intervals import credible_coverage, eb_moments, fab_z_endpoints
from .linking import LinkingError

ALL_SPECS = tuple(LinkingSpec(v) for v in Variant)
PAPER_SETTINGS = tuple(
    (tau2, beta, rho) for tau2 in (0.5, 5.0) for beta in (0.0, 10.0) for rho in (0.0, 0.9)
)
FIGURE_BINS = np.arange(-4.0, 4.0 + 1e-12, 0.5)


@dataclass(frozen=True)
class SimSetting:
    rho: float
    tau2: float
    beta: float
    m: int = 49
    n_reps: int = 2000
    seed: int = 1
    alpha: float = 0.05

    def __post_init__(self):
        if not -1 < self.rho < 1:
            raise ValueError("rho must lie in (-1, 1)")
        if self.tau2 < 0:
            raise ValueError("tau2 must be nonnegative")
        if self.n_reps < 1:
            raise ValueError("n_reps must be at least 1")
        if math.isqrt(self.m) ** 2 != self.m:
            raise ValueError("m must be a perfect square for the lattice")
        if not 0 < self.alpha < 0.5:
            raise ValueError("alpha must lie in (0, 0.5)")

    @property
    def label(self) -> str:
        return f"tau2={self.tau2:g},beta={self.beta:g},rho={self.rho:g}"


def paper_settings(n_reps: int = 2000, seed: int = 1) -> list[SimSetting]:
    """The eight (tau2, beta, rho) combinations in table column order."""
    return [SimSetting(rho, tau2, beta, n_reps=n_reps, seed=seed) for tau2, beta, rho in PAPER_SETTINGS]


def lattice_W(m: int) -> np.ndarray:
    k = math.isqrt(m)
    return lattice_contiguity(k, k)


def rep_rng(seed: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep,)))


@dataclass
class Dataset:
    theta: np.ndarray
    y: np.ndarray
    X: np.ndarray  # m x 1 standardized covariate, no intercept column
    W: np.ndarray

    @property
    def sigma2(self) -> np.ndarray:
        return np.ones(self.y.size)


def gen_dataset(setting: SimSetting, rep: int, W: np.ndarray | None = None) -> Dataset:
    """Draw covariates, area means and direct estimates for one replication.

    ``x`` is centered and divided by its sample standard deviation
    (divisor m-1). The means have covariance
    ``tau2 [(I - rho W)(I - rho W')]^{-1}``.
    """
    m = setting.m
    W = lattice_W(m) if W is None else W
    rng = rep_rng(setting.seed, rep)
    u = rng.uniform(size=m)
    x = (u - u.mean()) / u.std(ddof=1)
    z = rng.standard_normal(m)
    e = rng.standard_normal(m)
    A = np.eye(m) - setting.rho * W
    # cov(A^{-T} z) = (A A')^{-1}
    dev = math.sqrt(setting.tau2) * np.linalg.solve(A.T, z)
    theta = setting.beta * x + dev
    return Dataset(theta, theta + e, x[:, None], W)


# ---------------------------------------------------------------------------
# One replication
# ---------------------------------------------------------------------------


@dataclass
class RepOutcome:
    """Per-area widths and coverage flags for every spec in one replication.

    Arrays are (n_specs, m); rows of a failed spec are nan.
    """

    delta: np.ndarray  # theta - x beta, length m
    fab_width: np.ndarray
    fab_cover: np.ndarray
    eb_width: np.ndarray
    eb_cover: np.ndarray
    direct_cover: np.ndarray  # length m
    failed: np.ndarray  # (n_specs,) bool
    nonconverged: np.ndarray  # (n_specs,) count of fits not converged


class _Context:
    """Per-worker cache of quantities that depend only on m and the specs."""

    def __init__(self, m: int):
        self.W = lattice_W(m)
        self.basis = loo_basis(self.W)
        d = symmetrizer(self.W)
        self.full_basis = None if d is None else SpatialBasis.build(self.W[None], d[None])


_CTX: dict[int, _Context] = {}


def _context(m: int) -> _Context:
    if m not in _CTX:
        _CTX[m] = _Context(m)
    return _CTX[m]


def run_replication(setting: SimSetting, rep: int, specs=ALL_SPECS) -> RepOutcome:
    ctx = _context(setting.m)
    data = gen_dataset(setting, rep, ctx.W)
    m, k = setting.m, len(specs)
    y, D = data.y, data.sigma2
    z = numerics.norm_quantile(1 - setting.alpha / 2)
    theta = data.theta
    out = RepOutcome(
        delta=theta - setting.beta * data.X[:, 0],
        fab_width=np.full((k, m), np.nan),
        fab_cover=np.full((k, m), np.nan),
        eb_width=np.full((k, m), np.nan),
        eb_cover=np.full((k, m), np.nan),
        direct_cover=(np.abs(y - theta) < z).astype(float),
        failed=np.zeros(k, dtype=bool),
        nonconverged=np.zeros(k, dtype=int),
    )
    for i, spec in enumerate(specs):
        X = spec.design(data.X)
        W = ctx.W if spec.spatial else None
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                mu, tau2, fit = loo_normal_priors(y, X, D, W, basis=ctx.basis if W is not None else None)
                if not (np.all(np.isfinite(mu)) and np.all(tau2 > 0)):
                    raise EstimationError("invalid leave-one-out prior")
                lo, hi = fab_z_endpoints(y, 1.0, mu, tau2, setting.alpha)
                full = fit_ml(y, X, W, D, basis=ctx.full_basis if W is not None else None)
                mean, var = eb_moments(full.psi, y, X, W, D)
        except (EstimationError, LinkingError, numerics.NumericsError, np.linalg.LinAlgError, ValueError):
            out.failed[i] = True
            continue
        out.nonconverged[i] = int(np.sum(~fit.converged)) + int(not full.converged)
        out.fab_width[i] = hi - lo
        out.fab_cover[i] = (lo < theta) & (theta < hi)
        half = z * np.sqrt(var)
        out.eb_width[i] = 2 * half
        out.eb_cover[i] = np.abs(theta - mean) < half
    return out


def _run_one(args):
    setting, rep, specs = args
    return run_replication(setting, rep, specs)


def run_replications(setting: SimSetting, specs=ALL_SPECS, threads: int = 1) -> list[RepOutcome]:
    """All replications of a setting, in replication order."""
    jobs = [(setting, r, tuple(specs)) for r in range(setting.n_reps)]
    if threads <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_run_one, jobs, chunksize=max(1, len(jobs) // (8 * threads))))


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------


def _mean_se(per_rep: np.ndarray) -> tuple[float, float]:
    v = per_rep[np.isfinite(per_rep)]
    if v.size == 0:
        return float("nan"), float("nan")
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("nan")
    return float(v.mean()), se


@dataclass
class SpecSummary:
    spec: str
    n_ok: int
    failures: int
    nonconverged: int
    fab_width: float
    fab_width_se: float
    rel_width: float
    rel_width_se: float
    frac_narrower: float
    frac_narrower_se: float
    fab_coverage: float
    fab_coverage_se: float
    eb_width: float
    eb_width_se: float
    eb_coverage: float
    eb_coverage_se: float


@dataclass
class SimResult:
    """Summaries per spec for one setting. Standard errors treat replications as iid."""

    setting: SimSetting
    direct_width: float
    direct_coverage: float
    direct_coverage_se: float
    specs: list[SpecSummary] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        s = self.setting
        rows = []
        for sp in self.specs:
            row = {"tau2": s.tau2, "beta": s.beta, "rho": s.rho, "m": s.m, "n_reps": s.n_reps, "seed": s.seed}
            row.update(asdict(sp))
            row.update(
                direct_width=self.direct_width,
                direct_coverage=self.direct_coverage,
                direct_coverage_se=self.direct_coverage_se,
            )
            rows.append(row)
        return pd.DataFrame(rows)


def summarize(setting: SimSetting, outcomes: list[RepOutcome], specs=ALL_SPECS) -> SimResult:
    z = numerics.norm_quantile(1 - setting.alpha / 2)
    dw = 2 * z
    dc = np.array([o.direct_cover.mean() for o in outcomes])
    res = SimResult(setting, dw, *_mean_se(dc))
    for i, spec in enumerate(specs):
        fw = np.array([o.fab_width[i].mean() for o in outcomes])
        nar = np.array([(o.fab_width[i] < dw).mean() if not o.failed[i] else np.nan for o in outcomes])
        fc = np.array([o.fab_cover[i].mean() for o in outcomes])
        ew = np.array([o.eb_width[i].mean() for o in outcomes])
        ec = np.array([o.eb_cover[i].mean() for o in outcomes])
        fails = int(sum(o.failed[i] for o in outcomes))
        fwm, fws = _mean_se(fw)
        res.specs.append(
            SpecSummary(
                spec=spec.variant.value,
                n_ok=len(outcomes) - fails,
                failures=fails,
                nonconverged=int(sum(o.nonconverged[i] for o in outcomes)),
                fab_width=fwm,
                fab_width_se=fws,
                rel_width=fwm / dw,
                rel_width_se=fws / dw,
                frac_narrower=_mean_se(nar)[0],
                frac_narrower_se=_mean_se(nar)[1],
                fab_coverage=_mean_se(fc)[0],
                fab_coverage_se=_mean_se(fc)[1],
                eb_width=_mean_se(ew)[0],
                eb_width_se=_mean_se(ew)[1],
                eb_coverage=_mean_se(ec)[0],
                eb_coverage_se=_mean_se(ec)[1],
            )
        )
    return res


def run_study(setting: SimSetting, specs=ALL_SPECS, threads: int = 1) -> SimResult:
    """Widths, narrower-than-direct fractions and coverage for FAB and EB intervals."""
    return summarize(setting, run_replications(setting, specs, threads), specs)


def run_width_study(setting: SimSetting, specs=ALL_SPECS, threads: int = 1) -> SimResult:
    """Relative FAB widths and fractions narrower than direct."""
    return run_study(setting, specs, threads)


def run_eb_comparison(setting: SimSetting, specs=ALL_SPECS, threads: int = 1) -> SimResult:
    """Absolute mean widths of FAB and naive EB intervals."""
    return run_study(setting, specs, threads)


TABLE_QUANTITY = {"table1": "rel_width", "table2": "frac_narrower", "table3": ("eb_width", "fab_width")}


def study_frame(results: list[SimResult]) -> pd.DataFrame:
    return pd.concat([r.to_frame() for r in results], ignore_index=True)


def table_layout(frame: pd.DataFrame, quantity: str) -> pd.DataFrame:
    """Pivot a study frame into rows by spec and columns by (tau2, beta, rho)."""
    order = [v.value for v in Variant]
    t = frame.pivot_table(index="spec", columns=["tau2", "beta", "rho"], values=quantity, aggfunc="first")
    t = t.reindex([o for o in order if o in t.index])
    return t.sort_index(axis=1)


# ---------------------------------------------------------------------------
# Coverage curves
# ---------------------------------------------------------------------------

PROCEDURES = ("direct", "eb", "fab-z")


def coverage_curve(
    procedure: str,
    setting: SimSetting,
    spec: LinkingSpec = LinkingSpec(Variant.FULL),
    bins: np.ndarray = FIGURE_BINS,
    outcomes: list[RepOutcome] | None = None,
    threads: int = 1,
    index: int = 0,
) -> pd.DataFrame:
    """Empirical coverage binned by ``theta - x beta``, with binomial standard errors.

    Columns: ``bin_lo, bin_hi, center, n, coverage, se, lower, upper`` and,
    for the EB procedure with rho = 0, ``analytic`` from the credible
    coverage formula at the bin center. Empty bins have nan coverage.
    Precomputed ``outcomes`` may be passed with ``index`` locating ``spec``
    among the specs they were run with.
    """
    if procedure not in PROCEDURES:
        raise ValueError(f"procedure must be one of {PROCEDURES}")
    if outcomes is None:
        outcomes = run_replications(setting, (spec,), threads)
        index = 0
    i = index
    delta = np.concatenate([o.delta for o in outcomes])
    if procedure == "direct":
        cov = np.concatenate([o.direct_cover for o in outcomes])
    elif procedure == "eb":
        cov = np.concatenate([o.eb_cover[i] for o in outcomes])
    else:
        cov = np.concatenate([o.fab_cover[i] for o in outcomes])
    ok = np.isfinite(cov)
    delta, cov = delta[ok], cov[ok]
    bins = np.asarray(bins, dtype=float)
    which = np.digitize(delta, bins) - 1
    rows = []
    for b in range(bins.size - 1):
        sel = which == b
        n = int(sel.sum())
        p = float(cov[sel].mean()) if n else float("nan")
        se = math.sqrt(p * (1 - p) / n) if n else float("nan")
        c = 0.5 * (bins[b] + bins[b + 1])
        row = {
            "procedure": procedure,
            "bin_lo": bins[b],
            "bin_hi": bins[b + 1],
            "center": c,
            "n": n,
            "coverage": p,
            "se": se,
            "lower": p - 1.96 * se,
            "upper": p + 1.96 * se,
        }
        if procedure == "eb":
            row["analytic"] = (
                credible_coverage(c, 1.0, setting.tau2, setting.alpha) if setting.rho == 0 and setting.tau2 > 0 else float("nan")
            )
        rows.append(row)
    return pd.DataFrame(rows)


FIGURE1_SETTINGS = ((0.0, 5.0, 10.0), (0.0, 0.5, 0.0))  # (rho, tau2, beta)


def figure1(n_reps: int = 2000, seed: int = 1, threads: int = 1) -> pd.DataFrame:
    """EB and FAB coverage curves under the full linking model for the two figure panels."""
    frames = []
    spec = LinkingSpec(Variant.FULL)
    for rho, tau2, beta in FIGURE1_SETTINGS:
        s = SimSetting(rho, tau2, beta, n_reps=n_reps, seed=seed)
        outs = run_replications(s, (spec,), threads)
        for proc in PROCEDURES:
            f = coverage_curve(proc, s, spec, outcomes=outs)
            f.insert(0, "rho", rho)
            f.insert(1, "tau2", tau2)
            f.insert(2, "beta", beta)
            frames.append(f)
    return pd.concat(frames, ignore_index=True)
