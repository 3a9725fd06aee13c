"""Command-line interface.

Data go to ``--out`` (or stdout); warnings and diagnostics go to stderr.
Exit codes: 0 success, 1 input error, 2 numerical failure (including a fit
that did not converge, whose report is still written).
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, numerics
from .domain import (
    AreaTable,
    IngestConfig,
    InputError,
    LinkingSpec,
    Method,
    ingest_household_csv,
    lattice_contiguity,
    read_area_csv,
    read_proximity_csv,
    sqexp_proximity,
    with_proximity,
    write_area_csv,
)
from .estimation import EstimationError, fisher_info, fit_ml
from .intervals import area_intervals
from .linking import LinkingError
from .simulation import (
    ALL_SPECS,
    FIGURE_BINS,
    SimSetting,
    coverage_curve,
    figure1,
    paper_settings,
    run_replications,
    run_study,
    study_frame,
    table_layout,
)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2
SCHEMA = "fabsae/1"
INTERVAL_COLUMNS = ["area_id", "y", "sigma", "lower", "upper", "width", "method", "prior_mu", "prior_tau2", "note"]
SINGLE_FIT_CAVEAT = (
    "--single-fit: the prior for each area is built from data that include that area, "
    "so exact area-specific coverage is no longer guaranteed"
)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _alpha(text: str) -> float:
    a = float(text)
    if not 0 < a < 0.5:
        raise argparse.ArgumentTypeError("alpha must lie in (0, 0.5)")
    return a


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def resolve_proximity(w: str | None, table: AreaTable) -> np.ndarray | None:
    """Parse ``--w``: ``lattice:RxC``, ``csv:path`` or ``sqexp[:scale]``."""
    if w is None:
        return None
    kind, _, arg = w.partition(":")
    if kind == "lattice":
        try:
            r, c = (int(v) for v in arg.lower().split("x"))
        except ValueError:
            raise InputError(f"bad lattice spec {w!r}; expected lattice:RxC") from None
        if r * c != table.m:
            raise InputError(f"lattice {r}x{c} has {r * c} cells but the table has {table.m} areas")
        return lattice_contiguity(r, c)
    if kind == "csv":
        if not arg:
            raise InputError("csv proximity needs a path: csv:path")
        return read_proximity_csv(arg)
    if kind == "sqexp":
        scale = float(arg) if arg else 1.0
        if any(a.centroid is None for a in table.areas):
            raise InputError("sqexp proximity needs lon and lat columns")
        return sqexp_proximity([a.centroid for a in table.areas], scale)
    raise InputError(f"unknown proximity spec {w!r}")


def _load_table(args) -> AreaTable:
    table = read_area_csv(args.input)
    return with_proximity(table, resolve_proximity(args.w, table))


def _emit_frame(df: pd.DataFrame, args, meta: dict | None = None) -> None:
    if args.format == "json":
        payload = {"schema": SCHEMA, **(meta or {}), "rows": json.loads(df.to_json(orient="records"))}
        text = json.dumps(payload, indent=2) + "\n"
    else:
        text = df.to_csv(index=False, float_format="%.10g", lineterminator="\n")
    _write(text, args.out)


def _write(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _setting_from(args, n_reps: int) -> SimSetting:
    return SimSetting(args.rho, args.tau2, args.beta, m=args.m, n_reps=n_reps, seed=args.seed, alpha=args.alpha)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_fit(args) -> int:
    table = _load_table(args)
    spec = LinkingSpec.parse(args.spec)
    spec.check(table)
    elig = table.eligible
    sub = table.subset(elig) if not elig.all() else table
    X = spec.design(sub.covariates)
    W = sub.W if spec.spatial else None
    rep = fit_ml(sub.y, X, W, sub.variances, spec=spec)
    out = {
        "schema": SCHEMA,
        "spec": spec.variant.value,
        "m": sub.m,
        "beta": rep.psi.beta.tolist(),
        "tau2": rep.psi.tau2,
        "loglik": rep.loglik,
        "score_norm": rep.score_norm,
        "iterations": rep.iterations,
        "converged": rep.converged,
        "step_halvings": rep.step_halvings,
        "at_boundary": rep.at_boundary,
    }
    if spec.spatial:
        out["rho"] = rep.psi.rho
    # information-based standard errors; omitted at a boundary or a singular information
    try:
        info = fisher_info(rep.psi.tau2, rep.psi.rho, W, sub.variances)
        if not spec.spatial:
            info = info[:1, :1]
        se = np.sqrt(np.diag(np.linalg.inv(info)))
        if np.all(np.isfinite(se)) and not rep.at_boundary:
            out["se_tau2"] = float(se[0])
            if spec.spatial:
                out["se_rho"] = float(se[1])
    except (np.linalg.LinAlgError, ValueError):
        pass
    _write(json.dumps(out, indent=2) + "\n", args.out)
    if not rep.converged:
        print("fit did not converge; report written", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_intervals(args) -> int:
    table = _load_table(args)
    spec = LinkingSpec.parse(args.spec)
    method = Method(args.method)
    if method in (Method.BAYES, Method.EB, Method.FABZ, Method.FABT):
        spec.check(table)
    if args.single_fit:
        print(f"warning: {SINGLE_FIT_CAVEAT}", file=sys.stderr)
    rows = area_intervals(table, spec, method, args.alpha, single_fit=args.single_fit)
    df = pd.DataFrame(
        [
            {
                "area_id": r.id,
                "y": r.y,
                "sigma": r.sigma,
                "lower": r.lower,
                "upper": r.upper,
                "width": r.width,
                "method": r.method,
                "prior_mu": r.prior_mu,
                "prior_tau2": r.prior_tau2,
                "note": r.note,
            }
            for r in rows
        ],
        columns=INTERVAL_COLUMNS,
    )
    for r in rows:
        if r.note:
            print(f"warning: area {r.id}: {r.note}", file=sys.stderr)
    _emit_frame(df, args, {"method": method.value, "spec": spec.variant.value, "alpha": args.alpha})
    return EXIT_OK


def _table_csv(frame: pd.DataFrame, preset: str) -> pd.DataFrame:
    def flat(t: pd.DataFrame, prefix: str = "") -> pd.DataFrame:
        t = t.copy()
        t.columns = [f"tau2={a:g}|beta={b:g}|rho={c:g}" for a, b, c in t.columns]
        t.index = [f"{prefix}{i}" for i in t.index]
        return t.rename_axis("row").reset_index()

    if preset == "table1":
        return flat(table_layout(frame, "rel_width"))
    if preset == "table2":
        t = table_layout(frame, "frac_narrower") * 100
        return flat(t)
    return pd.concat(
        [flat(table_layout(frame, "eb_width"), "EB "), flat(table_layout(frame, "fab_width"), "FAB ")],
        ignore_index=True,
    )


def cmd_simulate(args) -> int:
    threads = args.threads
    if args.preset == "figure1":
        df = figure1(n_reps=args.reps, seed=args.seed, threads=threads)
        _emit_frame(df, args, {"preset": "figure1", "reps": args.reps, "seed": args.seed})
        return EXIT_OK
    if args.preset in ("table1", "table2", "table3"):
        results = []
        for s in paper_settings(args.reps, args.seed):
            results.append(run_study(s, ALL_SPECS, threads))
            print(f"done {s.label}", file=sys.stderr)
        frame = study_frame(results)
        df = frame if args.detail else _table_csv(frame, args.preset)
    else:
        setting = _setting_from(args, args.reps)
        specs = [LinkingSpec.parse(args.spec)] if args.spec else list(ALL_SPECS)
        df = run_study(setting, specs, threads).to_frame()
    if args.reps < 30:
        print(f"note: only {args.reps} replications; Monte Carlo error is large", file=sys.stderr)
    _emit_frame(df, args, {"preset": args.preset, "reps": args.reps, "seed": args.seed})
    return EXIT_OK


def cmd_coverage(args) -> int:
    setting = _setting_from(args, args.reps)
    spec = LinkingSpec.parse(args.spec or "full")
    method = args.method or "fab-z"
    if method not in ("direct", "eb", "fab-z"):
        raise InputError("coverage curves support --method direct, eb or fab-z")
    if args.bins:
        lo, hi, wdt = (float(v) for v in args.bins.split(","))
        bins = np.arange(lo, hi + 1e-12, wdt)
    else:
        bins = FIGURE_BINS
    outs = run_replications(setting, (spec,), args.threads)
    df = coverage_curve(method, setting, spec, bins, outcomes=outs)
    _emit_frame(df, args, {"method": method, "spec": spec.variant.value, **asdict(setting)})
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = IngestConfig(log_transform=not args.no_log, offset=args.offset, min_n=args.min_n, value_column=args.value_column)
    table = ingest_household_csv(args.input, cfg)
    inel = [a.id for a in table.areas if not a.eligible]
    if inel:
        print(f"warning: {len(inel)} area(s) with fewer than {cfg.min_n} records marked ineligible", file=sys.stderr)
    if args.out is None or args.out == "-":
        write_area_csv(table, sys.stdout)
    else:
        write_area_csv(table, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    # usage errors are input errors; argparse's default status 2 is taken by numerical failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fabsae", description="FAB and comparison intervals for small-area means.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--alpha", type=_alpha, default=0.05)
        sp.add_argument("--out", default=None, help="output file (default stdout)")
        sp.add_argument("--format", choices=["csv", "json"], default="csv")
        sp.add_argument("--threads", type=_positive_int, default=1)
        if data:
            sp.add_argument("--input", required=True, help="area-level CSV")
            sp.add_argument("--w", default=None, help="proximity: lattice:RxC, csv:path or sqexp[:scale]")

    specs = [s.variant.value for s in ALL_SPECS]
    methods = [m.value for m in Method]

    f = sub.add_parser("fit", help="fit the linking model by maximum likelihood")
    common(f)
    f.add_argument("--spec", choices=specs, default="exchangeable")
    f.set_defaults(func=cmd_fit)

    i = sub.add_parser("intervals", help="per-area intervals")
    common(i)
    i.add_argument("--spec", choices=specs, default="exchangeable")
    i.add_argument("--method", choices=methods, default="fab-z")
    i.add_argument("--single-fit", action="store_true", help="one full-table fit for all priors (faster; see warning)")
    i.set_defaults(func=cmd_intervals)

    for name, func, helptext in (
        ("simulate", cmd_simulate, "lattice simulation study"),
        ("coverage", cmd_coverage, "coverage curve binned by theta - x'beta"),
    ):
        s = sub.add_parser(name, help=helptext)
        common(s, data=False)
        s.add_argument("--seed", type=int, default=1)
        s.add_argument("--reps", type=_positive_int, default=2000)
        s.add_argument("--rho", type=float, default=0.0)
        s.add_argument("--tau2", type=float, default=0.5)
        s.add_argument("--beta", type=float, default=0.0)
        s.add_argument("--m", type=_positive_int, default=49)
        s.add_argument("--spec", choices=specs, default=None)
        s.set_defaults(func=func)
        if name == "simulate":
            s.add_argument("--preset", choices=["table1", "table2", "table3", "figure1"], default=None)
            s.add_argument("--detail", action="store_true", help="write the long per-spec frame for table presets")
        else:
            s.add_argument("--method", choices=["direct", "eb", "fab-z"], default="fab-z")
            s.add_argument("--bins", default=None, help="lo,hi,width (default -4,4,0.5)")

    g = sub.add_parser("ingest", help="aggregate household records to an area-level CSV")
    g.add_argument("--input", required=True)
    g.add_argument("--out", default=None)
    g.add_argument("--min-n", type=int, default=2)
    g.add_argument("--offset", type=float, default=0.0)
    g.add_argument("--no-log", action="store_true", help="do not log-transform values")
    g.add_argument("--value-column", default="value")
    g.set_defaults(func=cmd_ingest)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # --help, --version and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_INPUT
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        warnings.showwarning = _show_warning
        try:
            return args.func(args)
        # numerical classes first: several of them also derive from ValueError
        except (numerics.NumericsError, EstimationError, LinkingError, np.linalg.LinAlgError, FloatingPointError) as exc:
            print(f"error: numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        except BrokenPipeError:
            # reader went away (e.g. piped into head); nothing left to report
            sys.stdout = None
            return EXIT_OK
        except (InputError, ValueError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INPUT


def _show_warning(message, category, filename, lineno, file=None, line=None):
    print(f"warning: {message}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
