"""B-spline bases on [0,1] and the integral-zero reparameterization.

Provides clamped knot construction, Cox-de Boor basis evaluation, exact basis
integrals, and an orthonormal rotation that converts the zero-integral
constraint on spline coefficients into an unconstrained parameterization of
one dimension less.  All evaluators are pure and reentrant.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "KnotVector",
    "SplineSystem",
    "make_knots",
    "make_system",
    "eval_basis",
    "eval_basis_many",
    "basis_integrals",
    "build_rotation",
    "eval_reduced_basis",
    "eval_reduced_basis_many",
    "reduced_to_full_coefficients",
    "default_dimension",
]


@dataclass(eq=False)
class KnotVector:
    """Clamped knot sequence on [0,1].

    ``knots`` is the extended sequence with both boundary knots repeated
    ``order`` times, so the basis dimension is ``interior_count + order``.
    """

    interior_count: int
    order: int
    knots: np.ndarray

    @property
    def dimension(self) -> int:
        return self.interior_count + self.order


@dataclass(eq=False)
class SplineSystem:
    """Knots plus the machinery for the constrained-coefficient rotation.

    ``integrals`` holds the basis integrals over [0,1] (they sum to one) and
    ``rotation`` is the (H-1) x H matrix with orthonormal rows spanning the
    orthogonal complement of the integral vector.
    """

    knots: KnotVector
    integrals: np.ndarray
    rotation: np.ndarray

    @property
    def dimension(self) -> int:
        return self.knots.dimension


def make_knots(interior_count: int, order: int) -> KnotVector:
    """Equally spaced clamped knots with ``interior_count`` interior knots."""
    if order < 1:
        raise ValueError(f"spline order must be >= 1, got {order}")
    if interior_count < 0:
        raise ValueError(f"interior knot count must be >= 0, got {interior_count}")
    interior = np.linspace(0.0, 1.0, interior_count + 2)[1:-1]
    knots = np.concatenate([np.zeros(order), interior, np.ones(order)])
    return KnotVector(interior_count=interior_count, order=order, knots=knots)


def eval_basis_many(kv: KnotVector, x) -> np.ndarray:
    """Evaluate all basis functions at points ``x``; returns shape (N, H).

    The right boundary x = 1 is assigned to the last nonempty interval so the
    partition of unity holds on the closed interval.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError("spline evaluation points must lie in [0, 1]")
    t = kv.knots
    q = kv.order
    # order-1 bases: indicators of [t_h, t_{h+1})
    basis = ((t[:-1] <= x[:, None]) & (x[:, None] < t[1:])).astype(float)
    at_one = x == 1.0
    if at_one.any():
        last = (t[:-1] < 1.0) & (t[1:] == 1.0)
        basis[at_one] = last.astype(float)
    for k in range(2, q + 1):
        cnt = t.size - k
        den_left = t[k - 1 : k - 1 + cnt] - t[:cnt]
        den_right = t[k : k + cnt] - t[1 : 1 + cnt]
        safe_left = np.where(den_left > 0.0, den_left, 1.0)
        safe_right = np.where(den_right > 0.0, den_right, 1.0)
        left = np.where(den_left > 0.0, (x[:, None] - t[:cnt]) / safe_left, 0.0)
        right = np.where(den_right > 0.0, (t[k : k + cnt] - x[:, None]) / safe_right, 0.0)
        basis = left * basis[:, :cnt] + right * basis[:, 1 : cnt + 1]
    return basis


def eval_basis(kv: KnotVector, x: float) -> np.ndarray:
    """Basis vector (length H) at a single point."""
    return eval_basis_many(kv, [x])[0]


def basis_integrals(kv: KnotVector) -> np.ndarray:
    """Exact integrals of each basis function over [0,1].

    For a clamped knot sequence the integral of basis h is
    (t_{h+q} - t_h)/q, and the integrals sum to one.
    """
    t = kv.knots
    q = kv.order
    h = kv.dimension
    return (t[q : q + h] - t[:h]) / q


def build_rotation(b) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement of ``b``, as rows.

    Canonical choice: the Householder reflection mapping b/||b|| onto the
    first coordinate axis, with the first row dropped.  Deterministic, and any
    valid complement produces the same fitted functions downstream.
    """
    b = np.asarray(b, dtype=float)
    norm = np.linalg.norm(b)
    if norm == 0.0:
        raise ValueError("cannot build a rotation for the zero vector")
    h = b.size
    unit = b / norm
    v = unit.copy()
    v[0] -= 1.0
    vnorm2 = float(v @ v)
    if vnorm2 < 1e-30:
        # b already along the first axis
        reflector = np.eye(h)
    else:
        reflector = np.eye(h) - 2.0 * np.outer(v, v) / vnorm2
    return reflector[1:, :]


def make_system(interior_count: int, order: int) -> SplineSystem:
    kv = make_knots(interior_count, order)
    b = basis_integrals(kv)
    return SplineSystem(knots=kv, integrals=b, rotation=build_rotation(b))


def eval_reduced_basis_many(sys: SplineSystem, x) -> np.ndarray:
    """Constraint-free basis sqrt(H) * rotation @ B(x); shape (N, H-1).

    Any coefficient vector in this parameterization yields a spline whose
    integral over [0,1] is exactly zero.
    """
    full = eval_basis_many(sys.knots, x)
    scale = np.sqrt(sys.dimension)
    return scale * (full @ sys.rotation.T)


def eval_reduced_basis(sys: SplineSystem, x: float) -> np.ndarray:
    return eval_reduced_basis_many(sys, [x])[0]


def reduced_to_full_coefficients(sys: SplineSystem, theta: np.ndarray) -> np.ndarray:
    """Map reduced coefficients to full spline coefficients (length H)."""
    return np.sqrt(sys.dimension) * (sys.rotation.T @ theta)


def default_dimension(n_obs: int, order: int) -> int:
    """Default basis dimension for a panel with ``n_obs`` total observations.

    Grows like the fifth root of the sample size (second-order smoothness),
    floored so there are at least two interior knots.
    """
    if n_obs < 1:
        raise ValueError("n_obs must be positive")
    return max(order + 2, int(round(n_obs ** 0.2)) + 2)
