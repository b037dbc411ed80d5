"""Latent subgroup discovery in panel data via fused nonparametric quantile
regression: B-spline sieve estimation with a pairwise SCAD fusion penalty,
solved by a nested ADMM, tuned by the Schwarz information criterion, with
group-level refitting and pointwise confidence intervals."""

from .admm import AdmmConfig, FitResult, solve_fixed_lambda
from .config import RunConfig, load_config
from .exceptions import (
    ConfigError,
    DataError,
    InferenceError,
    QuantfuseError,
    SelectionError,
    SolverDivergenceError,
)
from .inference import confidence_band, estimate_density_at_zero, variance_at
from .model import GroupStructure, PanelData, StackedParams, normalize_covariates
from .pipeline import fit_single_tau
from .selection import lambda_grid, refit_oracle, run_path, select, sic_value
from .simulation import DgpSpec, StudyReport, run_study
from .splines import SplineSystem, make_knots, make_system

__version__ = "0.1.0"

__all__ = [
    "AdmmConfig",
    "ConfigError",
    "DataError",
    "DgpSpec",
    "FitResult",
    "GroupStructure",
    "InferenceError",
    "PanelData",
    "QuantfuseError",
    "RunConfig",
    "SelectionError",
    "SolverDivergenceError",
    "SplineSystem",
    "StackedParams",
    "StudyReport",
    "confidence_band",
    "estimate_density_at_zero",
    "fit_single_tau",
    "lambda_grid",
    "load_config",
    "make_knots",
    "make_system",
    "normalize_covariates",
    "refit_oracle",
    "run_path",
    "run_study",
    "select",
    "sic_value",
    "solve_fixed_lambda",
    "variance_at",
    "__version__",
]
