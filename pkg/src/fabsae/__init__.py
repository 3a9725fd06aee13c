"""Frequentist-assisted-by-Bayes (FAB) confidence intervals for small-area means.

Direct, Bayes and empirical-Bayes intervals are provided for comparison.
Linking models are Fay-Herriot regressions with optional SAR spatial
dependence, fitted by maximum likelihood.
"""

__version__ = "0.1.0"

from .domain import (  # noqa: E402
    AreaDatum,
    AreaTable,
    HyperParams,
    InputError,
    Interval,
    LinkingSpec,
    Method,
    Variant,
)
from .estimation import PrecisionPrior, fit_gamma_hyper, fit_ml, leave_one_out_priors  # noqa: E402
from .intervals import (  # noqa: E402
    area_intervals,
    bayes_interval,
    credible_coverage,
    direct_interval,
    direct_t_interval,
    eb_interval,
    expected_width_ratio_z,
    fab_t_interval,
    fab_z_interval,
)
from .linking import NormalPrior  # noqa: E402

__all__ = [
    "AreaDatum",
    "AreaTable",
    "HyperParams",
    "InputError",
    "Interval",
    "LinkingSpec",
    "Method",
    "NormalPrior",
    "PrecisionPrior",
    "Variant",
    "area_intervals",
    "bayes_interval",
    "credible_coverage",
    "direct_interval",
    "direct_t_interval",
    "eb_interval",
    "expected_width_ratio_z",
    "fab_t_interval",
    "fab_z_interval",
    "fit_gamma_hyper",
    "fit_ml",
    "leave_one_out_priors",
]
