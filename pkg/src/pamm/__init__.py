"""Piecewise exponential additive mixed models.

Hazard regression for right-censored survival data via the Poisson likelihood
of the piecewise-exponential data expansion, with penalized spline baselines
and group-specific, smoothly time-varying covariate effects.
"""

__version__ = "0.1.0"

from .ped import (
    SurvivalRecord,
    CutPoints,
    PedRow,
    PedSchema,
    PedDataset,
    make_cut_points,
    as_ped,
    write_ped_csv,
    read_ped_csv,
)
from .errors import ConfigError, NumericError
from .fit import (
    ModelSpec,
    Intercept,
    Linear,
    Factor,
    Smooth,
    VaryingCoef,
    RandomIntercept,
    RandomSlope,
    Fre,
    FittedModel,
    fit,
    coefficient_table,
    model_to_json,
    model_from_json,
)
from .metrics import (
    model_loglik,
    brier_score,
    integrated_brier_score,
    fit_report,
    FitReport,
)
from .sim import SimConfig, sample_dataset, calibrate_censoring, run_scenarios

__all__ = [
    "__version__",
    "SurvivalRecord",
    "CutPoints",
    "PedRow",
    "PedSchema",
    "PedDataset",
    "make_cut_points",
    "as_ped",
    "write_ped_csv",
    "read_ped_csv",
    "ConfigError",
    "NumericError",
    "ModelSpec",
    "Intercept",
    "Linear",
    "Factor",
    "Smooth",
    "VaryingCoef",
    "RandomIntercept",
    "RandomSlope",
    "Fre",
    "FittedModel",
    "fit",
    "coefficient_table",
    "model_to_json",
    "model_from_json",
    "model_loglik",
    "brier_score",
    "integrated_brier_score",
    "fit_report",
    "FitReport",
    "SimConfig",
    "sample_dataset",
    "calibrate_censoring",
    "run_scenarios",
]
