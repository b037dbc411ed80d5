"""End-to-end fitting pipeline shared by the CLI and the simulation driver."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .inference import ConfidenceBand, DensityEstimate, confidence_band, estimate_density_at_zero
from .model import PanelData, residuals
from .selection import LambdaPath, SelectionReport, run_path, select
from .splines import SplineSystem, default_dimension, make_system

__all__ = ["TauFit", "spline_system_for", "interior_grid", "fit_single_tau"]


def spline_system_for(cfg: RunConfig, n_obs: int) -> SplineSystem:
    """Spline system from configuration; 'auto' applies the dimension rule."""
    order = cfg.spline.order
    if cfg.spline.interior == "auto":
        interior = default_dimension(n_obs, order) - order
    else:
        interior = cfg.spline.interior
    return make_system(interior, order)


def interior_grid(size: int) -> np.ndarray:
    """Equispaced interior evaluation grid avoiding both boundaries."""
    return np.arange(1, size + 1) / (size + 1.0)


@dataclass(eq=False)
class TauFit:
    """Everything produced for one quantile level."""

    tau: float
    sys: SplineSystem
    path: LambdaPath
    report: SelectionReport
    density: DensityEstimate | None
    bands: list[ConfidenceBand] | None
    band_grid: np.ndarray | None


def fit_single_tau(panel: PanelData, tau: float, cfg: RunConfig,
                   sys: SplineSystem | None = None,
                   with_inference: bool | None = None) -> TauFit:
    """Penalty path, SIC selection, refit, and optional confidence bands."""
    if sys is None:
        sys = spline_system_for(cfg, panel.n_obs)
    lam_max = None if cfg.lam.max == "auto" else float(cfg.lam.max)
    path = run_path(panel, sys, tau, cfg.admm, lambda_max=lam_max,
                    grid_size=cfg.lam.grid_size, spacing=cfg.lam.spacing,
                    min_ratio=cfg.lam.min_ratio, scad_a=cfg.scad.a,
                    refine=cfg.lam.refine)
    report = select(panel, sys, tau, path, k_max=cfg.selection.k_max,
                    polish=cfg.selection.polish,
                    ladder_beam=cfg.selection.ladder_beam)

    density = None
    bands = None
    grid = None
    enabled = cfg.inference.enabled if with_inference is None else with_inference
    if enabled:
        refit_params = report.refit.per_individual_params()
        res = residuals(panel, sys, refit_params)
        density = estimate_density_at_zero(panel, res, report.groups,
                                           method=cfg.inference.density,
                                           floor=cfg.inference.floor)
        grid = interior_grid(cfg.inference.grid_size)
        bands = confidence_band(grid, panel, sys, report.groups,
                                report.refit.group_coeffs, density, tau,
                                level=cfg.inference.level)
    return TauFit(tau=tau, sys=sys, path=path, report=report,
                  density=density, bands=bands, band_grid=grid)
