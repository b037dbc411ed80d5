"""Pointwise confidence intervals for the group functions.

The asymptotic variance is a sandwich built from the within-group design rows
and the conditional density of the fit residuals at zero, which is estimated
by Nadaraya-Watson (or re-weighted Nadaraya-Watson) kernel smoothing with
Gaussian kernels and rule-of-thumb bandwidths.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.stats import norm

from .exceptions import InferenceError
from .model import GroupStructure, PanelData
from .splines import SplineSystem, eval_reduced_basis_many

__all__ = [
    "DensityEstimate",
    "ConfidenceBand",
    "GroupVariance",
    "estimate_density_at_zero",
    "variance_at",
    "confidence_band",
    "DENSITY_FLOOR",
]

DENSITY_FLOOR = 1e-3
_GRID_POINTS = 401


@dataclass(eq=False)
class DensityEstimate:
    """Conditional density of the residuals at zero, per observation."""

    values: np.ndarray          # (n, T), floored
    bandwidth_x: dict           # per group
    bandwidth_r: dict
    kernel: str
    method: str                 # "nw" or "rnw"
    floored: int                # observations clipped at the floor


def _rot_bandwidth(values: np.ndarray) -> float:
    spread = float(np.std(values))
    if spread <= 0:
        spread = 1e-3
    return 1.06 * spread * values.size ** (-0.2)


def _reweight(xs: np.ndarray, kx: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Empirical-likelihood adjusted kernel weights per grid point.

    Solves, for each grid point, the scalar multiplier making the weighted
    first moment of (x_j - x) vanish; weights stay nonnegative.
    """
    out = np.empty_like(kx)
    for g in range(grid.size):
        k = kx[g]
        d = xs - grid[g]
        s = k.sum()
        if s <= 0:
            out[g] = k
            continue

        def moment(xi):
            denom = 1.0 + xi * d
            denom = np.where(denom > 1e-10, denom, 1e-10)
            return float(np.sum(k * d / denom))

        lo_lim = d.min()
        hi_lim = d.max()
        # admissible xi keeps 1 + xi*d positive
        lo = (-1.0 / hi_lim + 1e-8) if hi_lim > 0 else -1e8
        hi = (-1.0 / lo_lim - 1e-8) if lo_lim < 0 else 1e8
        if lo >= hi:
            out[g] = k
            continue
        f_lo, f_hi = moment(lo), moment(hi)
        if f_lo * f_hi > 0:
            out[g] = k
            continue
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            f_mid = moment(mid)
            if f_lo * f_mid <= 0:
                hi = mid
            else:
                lo, f_lo = mid, f_mid
        xi = 0.5 * (lo + hi)
        denom = np.where(1.0 + xi * d > 1e-10, 1.0 + xi * d, 1e-10)
        out[g] = k / denom
    return out


def estimate_density_at_zero(panel: PanelData, residuals: np.ndarray,
                             groups: GroupStructure, bandwidth: float | None = None,
                             method: str = "nw",
                             floor: float = DENSITY_FLOOR) -> DensityEstimate:
    """f(0|x_it) estimated from within-group residual/covariate pairs.

    Evaluated on a fine covariate grid per group and interpolated to the
    observed covariates; estimates below ``floor`` are clipped and counted.
    """
    if bandwidth is not None and bandwidth <= 0:
        raise InferenceError("bandwidth must be positive")
    if method not in ("nw", "rnw"):
        raise InferenceError(f"unknown density method '{method}'")
    values = np.empty_like(panel.x)
    bx: dict[int, float] = {}
    br: dict[int, float] = {}
    floored = 0
    grid = np.linspace(0.0, 1.0, _GRID_POINTS)
    for k in range(1, groups.n_groups + 1):
        members = groups.members(k)
        xs = panel.x[members].ravel()
        rs = residuals[members].ravel()
        hx = bandwidth if bandwidth is not None else _rot_bandwidth(xs)
        hr = bandwidth if bandwidth is not None else _rot_bandwidth(rs)
        bx[k], br[k] = hx, hr
        kx = np.exp(-0.5 * ((grid[:, None] - xs[None, :]) / hx) ** 2)
        if method == "rnw":
            kx = _reweight(xs, kx, grid)
        kr = np.exp(-0.5 * (rs / hr) ** 2) / (hr * np.sqrt(2.0 * np.pi))
        denom = kx.sum(axis=1)
        denom = np.where(denom > 0, denom, 1.0)
        dens_grid = (kx @ kr) / denom
        est = np.interp(panel.x[members].ravel(), grid, dens_grid)
        floored += int((est < floor).sum())
        values[members] = np.maximum(est, floor).reshape(members.size, panel.T)
    return DensityEstimate(values=values, bandwidth_x=bx, bandwidth_r=br,
                           kernel="gaussian", method=method, floored=floored)


@dataclass(eq=False)
class GroupVariance:
    """Cached per-group factors of the sandwich variance."""

    rows: np.ndarray            # (N_k, H-1) design rows of the group
    cho_weighted: tuple         # Cholesky of rows' * diag(f) * rows
    tau: float

    def variance(self, pi_x: np.ndarray) -> float:
        s = scipy.linalg.cho_solve(self.cho_weighted, pi_x, check_finite=False)
        g = self.rows @ s
        return float(self.tau * (1.0 - self.tau) * (g @ g))


def _group_variance(panel: PanelData, sys: SplineSystem, groups: GroupStructure,
                    density: DensityEstimate, tau: float, k: int) -> GroupVariance:
    members = groups.members(k)
    if members.size == 0:
        raise InferenceError(f"group {k} is empty")
    rows = eval_reduced_basis_many(sys, panel.x[members].ravel())
    f = density.values[members].ravel()
    weighted = rows.T @ (rows * f[:, None])
    try:
        cho = scipy.linalg.cho_factor(weighted, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise InferenceError(
            f"singular weighted design for group {k}; use a smaller basis "
            f"dimension or a larger group") from exc
    return GroupVariance(rows=rows, cho_weighted=cho, tau=tau)


def variance_at(x: float, k: int, panel: PanelData, sys: SplineSystem,
                groups: GroupStructure, density: DensityEstimate,
                tau: float) -> float:
    """Sandwich variance of the group-k curve estimate at one point.

    Assembled as an inner product of a common vector with itself, so the
    result is nonnegative up to rounding.
    """
    gv = _group_variance(panel, sys, groups, density, tau, k)
    return gv.variance(eval_reduced_basis_many(sys, [x])[0])


@dataclass(eq=False)
class ConfidenceBand:
    """Pointwise normal band for one group curve."""

    x: np.ndarray
    estimate: np.ndarray
    se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float


def confidence_band(x_grid, panel: PanelData, sys: SplineSystem,
                    groups: GroupStructure, group_coeffs: np.ndarray,
                    density: DensityEstimate, tau: float,
                    level: float = 0.95) -> list[ConfidenceBand]:
    """Pointwise bands, one per group, over the given covariate grid."""
    if not 0.0 < level < 1.0:
        raise InferenceError(f"confidence level must be in (0, 1), got {level}")
    x_grid = np.asarray(x_grid, dtype=float)
    z = float(norm.ppf(0.5 * (1.0 + level)))
    pi = eval_reduced_basis_many(sys, x_grid)
    bands = []
    for k in range(1, groups.n_groups + 1):
        gv = _group_variance(panel, sys, groups, density, tau, k)
        est = pi @ group_coeffs[k - 1]
        se = np.sqrt(np.maximum([gv.variance(row) for row in pi], 0.0))
        bands.append(ConfidenceBand(x=x_grid, estimate=est, se=se,
                                    lower=est - z * se, upper=est + z * se,
                                    level=level))
    return bands
