"""Panel container, parameter layout, residuals and the penalized objective.

The parameter vector stacks one block per individual: a scalar intercept
followed by the reduced spline coefficients, so a panel with n individuals
and basis dimension H carries n*H parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataError
from .penalties import ScadParams, check_loss, scad_value
from .splines import SplineSystem, eval_reduced_basis_many

__all__ = [
    "PanelData",
    "AffineMap",
    "StackedParams",
    "GroupStructure",
    "normalize_covariates",
    "residuals",
    "objective",
    "extract_groups",
]


@dataclass(eq=False)
class PanelData:
    """Balanced panel of responses and a scalar covariate in [0,1].

    ``y`` and ``x`` are n x T arrays (individual-major).  Immutable after
    construction by convention; safe to share across threads and workers.
    """

    y: np.ndarray
    x: np.ndarray
    ids: list[str] | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.x = np.asarray(self.x, dtype=float)
        if self.y.ndim != 2 or self.x.shape != self.y.shape:
            raise DataError(
                f"panel arrays must be matching 2-D (n, T) arrays, got "
                f"y{self.y.shape} x{self.x.shape}"
            )
        if not (np.isfinite(self.y).all() and np.isfinite(self.x).all()):
            raise DataError("panel contains non-finite values")
        if self.x.min() < 0.0 or self.x.max() > 1.0:
            raise DataError("covariates must be normalized into [0, 1]")
        if self.ids is not None and len(self.ids) != self.y.shape[0]:
            raise DataError("ids length does not match individual count")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def n_obs(self) -> int:
        return self.y.size


@dataclass
class AffineMap:
    """Min-max map used to normalize covariates; kept for prediction."""

    lo: float
    hi: float

    def forward(self, raw):
        return (np.asarray(raw, dtype=float) - self.lo) / (self.hi - self.lo)

    def inverse(self, z):
        return self.lo + np.asarray(z, dtype=float) * (self.hi - self.lo)


def normalize_covariates(raw) -> tuple[np.ndarray, AffineMap]:
    """Min-max normalize a covariate array into [0,1].

    Raises DataError for a constant covariate (the map would be degenerate).
    """
    raw = np.asarray(raw, dtype=float)
    lo = float(raw.min())
    hi = float(raw.max())
    if hi <= lo:
        raise DataError("covariate is constant; cannot normalize to [0, 1]")
    amap = AffineMap(lo=lo, hi=hi)
    return amap.forward(raw), amap


@dataclass(eq=False)
class StackedParams:
    """All individual parameters stacked into one vector of length n*H.

    Block i is (intercept_i, coeffs_i) with coeffs_i of length H-1.
    """

    w: np.ndarray
    n: int
    block: int  # H

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if self.w.shape != (self.n * self.block,):
            raise ValueError(
                f"parameter vector has length {self.w.size}, expected {self.n * self.block}"
            )

    @classmethod
    def from_parts(cls, intercepts, coeffs) -> "StackedParams":
        intercepts = np.asarray(intercepts, dtype=float)
        coeffs = np.atleast_2d(np.asarray(coeffs, dtype=float))
        n = intercepts.size
        block = 1 + coeffs.shape[1]
        w = np.empty(n * block)
        w.reshape(n, block)[:, 0] = intercepts
        w.reshape(n, block)[:, 1:] = coeffs
        return cls(w=w, n=n, block=block)

    def intercepts(self) -> np.ndarray:
        return self.w.reshape(self.n, self.block)[:, 0].copy()

    def coeffs(self) -> np.ndarray:
        return self.w.reshape(self.n, self.block)[:, 1:].copy()


@dataclass(eq=False)
class GroupStructure:
    """Partition of individuals with one coefficient vector per group.

    Labels are 1-based and canonical: individual 0 is in group 1, and groups
    are ordered by their smallest member index.
    """

    labels: np.ndarray
    representatives: np.ndarray | None = None
    intercepts: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        self.labels = _canonical_labels(self.labels)

    @property
    def n_groups(self) -> int:
        return int(self.labels.max())

    @property
    def n(self) -> int:
        return self.labels.size

    def members(self, k: int) -> np.ndarray:
        """0-based indices of the individuals in group k (1-based k)."""
        return np.flatnonzero(self.labels == k)


def _canonical_labels(labels: np.ndarray) -> np.ndarray:
    remap: dict[int, int] = {}
    out = np.empty_like(labels)
    for i, lab in enumerate(labels):
        if lab not in remap:
            remap[lab] = len(remap) + 1
        out[i] = remap[lab]
    return out


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def extract_groups(v: np.ndarray, pairs: np.ndarray, theta: np.ndarray,
                   tol: float) -> GroupStructure:
    """Groups from the fused pairwise differences.

    An edge joins individuals i and j when the fused difference block for the
    pair has Euclidean norm <= tol; groups are the connected components, so
    fusion is transitive.  Representatives are within-group averages of the
    per-individual coefficient vectors.
    """
    if tol < 0:
        raise ValueError("tolerance must be nonnegative")
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    n = theta.shape[0]
    blocks = np.asarray(v, dtype=float).reshape(len(pairs), theta.shape[1])
    norms = np.linalg.norm(blocks, axis=1)
    uf = _UnionFind(n)
    for (i, j), nm in zip(pairs, norms):
        if nm <= tol:
            uf.union(int(i), int(j))
    roots = np.array([uf.find(i) for i in range(n)])
    structure = GroupStructure(labels=roots + 1)
    k = structure.n_groups
    reps = np.vstack([theta[structure.members(g)].mean(axis=0) for g in range(1, k + 1)])
    structure.representatives = reps
    return structure


def residuals(panel: PanelData, sys: SplineSystem, params: StackedParams) -> np.ndarray:
    """r_it = y_it - intercept_i - reduced_basis(x_it) . coeffs_i, shape (n, T)."""
    if params.n != panel.n or params.block != sys.dimension:
        raise ValueError(
            f"parameter layout ({params.n} x {params.block}) does not match "
            f"panel ({panel.n}) and basis dimension ({sys.dimension})"
        )
    pi = eval_reduced_basis_many(sys, panel.x.ravel()).reshape(panel.n, panel.T, -1)
    fitted = params.intercepts()[:, None] + np.einsum("ith,ih->it", pi, params.coeffs())
    return panel.y - fitted


def objective(panel: PanelData, sys: SplineSystem, params: StackedParams,
              tau: float, lam: float, a: float = 3.7) -> float:
    """Averaged check loss plus the averaged pairwise fusion penalty.

    The penalty acts on the reduced coefficient blocks only; intercepts are
    never penalized.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    res = residuals(panel, sys, params)
    loss = check_loss(res, tau).mean()
    if lam == 0.0 or panel.n < 2:
        return float(loss)
    scad = ScadParams(lam=lam, a=a)
    theta = params.coeffs()
    n = panel.n
    penalty = 0.0
    for i in range(n - 1):
        dists = np.linalg.norm(theta[i + 1 :] - theta[i], axis=1)
        penalty += scad_value(dists, scad).sum()
    return float(loss + penalty / (n * (n - 1) / 2))
