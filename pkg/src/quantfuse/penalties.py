"""Check loss, SCAD penalty, and the proximal operators used by the solver.

Everything here is elementwise / blockwise pure numpy and safe to call
concurrently.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ScadParams",
    "check_loss",
    "scad_value",
    "scad_deriv_plus",
    "prox_check",
    "group_shrink",
    "scad_group_update",
    "scad_group_prox_exact",
]


@dataclass(frozen=True)
class ScadParams:
    """Fusion strength and SCAD shape; the penalty is flat beyond a*lam."""

    lam: float
    a: float = 3.7

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if self.a <= 2:
            raise ValueError(f"SCAD shape parameter must exceed 2, got {self.a}")


def check_loss(v, tau: float):
    """Asymmetric absolute loss tau*v - v*1{v<=0}; minimized by the tau-quantile."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    v = np.asarray(v, dtype=float)
    return np.where(v >= 0, tau * v, (tau - 1.0) * v)


def scad_value(u, p: ScadParams):
    """SCAD penalty value: linear, then quadratically tapered, then constant."""
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise ValueError("SCAD is defined for nonnegative arguments")
    lam, a = p.lam, p.a
    if lam == 0.0:
        return np.zeros_like(u)
    mid = (a * lam * u - (u * u + lam * lam) / 2.0) / (a - 1.0)
    out = np.where(u < lam, lam * u, np.where(u <= a * lam, mid, (a + 1.0) * lam * lam / 2.0))
    return out


def scad_deriv_plus(u, p: ScadParams):
    """Right derivative of the SCAD penalty; vanishes beyond a*lam."""
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise ValueError("SCAD derivative is defined for nonnegative arguments")
    lam, a = p.lam, p.a
    if lam == 0.0:
        return np.zeros_like(u)
    mid = (a * lam - u) / (a - 1.0)
    return np.where(u < lam, lam, np.where(u < a * lam, mid, 0.0))


def prox_check(zeta, c, tau: float):
    """Minimizer of c*check_loss(r, tau) + (r - zeta)^2 / 2.

    The asymmetric soft-threshold: shift down by c*tau on the right, up by
    c*(1-tau) on the left, with a dead zone collapsing to zero in between.
    """
    if c < 0:
        raise ValueError("prox scale must be nonnegative")
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    zeta = np.asarray(zeta, dtype=float)
    return zeta - np.clip(zeta, -c * (1.0 - tau), c * tau)


def group_shrink(z, t):
    """Radial shrinkage z * (1 - t/||z||)_+ applied to the last axis.

    ``t`` may be a scalar or one threshold per row.
    """
    z = np.asarray(z, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("shrinkage threshold must be nonnegative")
    norms = np.linalg.norm(z, axis=-1)
    safe = np.where(norms > 0, norms, 1.0)
    factor = np.clip(1.0 - t / safe, 0.0, None)
    factor = np.where(norms > 0, factor, 0.0)
    return z * factor[..., None]


def scad_group_update(z, v_prev, p: ScadParams, gamma: float):
    """One majorized SCAD proximal step for the fused difference blocks.

    The concave penalty is linearized at the previous iterate, so each block
    undergoes radial shrinkage with threshold scad_deriv_plus(||v_prev||)/gamma.
    Blocks whose previous norm exceeds a*lam pass through unchanged.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    v_prev = np.asarray(v_prev, dtype=float)
    thresholds = scad_deriv_plus(np.linalg.norm(v_prev, axis=-1), p) / gamma
    return group_shrink(z, thresholds)


def scad_group_prox_exact(z, p: ScadParams, gamma: float):
    """Exact minimizer of scad(||v||) + gamma/2 ||v - z||^2 per block.

    Solved along the ray through z by comparing the candidate minimizers of
    the three SCAD branches; used only when the exact proximal operator is
    requested in configuration.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    z = np.asarray(z, dtype=float)
    lam, a = p.lam, p.a
    norms = np.linalg.norm(z, axis=-1)
    if lam == 0.0:
        return z.copy()

    def branch_objective(m):
        return scad_value(m, p) + 0.5 * gamma * (m - norms) ** 2

    # candidate magnitudes, each clipped into its branch
    cand1 = np.clip(np.maximum(norms - lam / gamma, 0.0), 0.0, lam)
    denom = gamma * (a - 1.0) - 1.0
    if abs(denom) < 1e-12:
        cand2 = np.full_like(norms, lam)
    else:
        cand2 = np.clip((gamma * (a - 1.0) * norms - a * lam) / denom, lam, a * lam)
    cand3 = np.maximum(norms, a * lam)
    stack = np.stack([cand1, cand2, cand3])
    values = branch_objective(stack)
    idx = np.argmin(values, axis=0)
    best = np.take_along_axis(stack, idx[None, ...], axis=0)[0]
    safe = np.where(norms > 0, norms, 1.0)
    factor = np.where(norms > 0, best / safe, 0.0)
    return z * factor[..., None]
