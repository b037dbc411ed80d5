"""Nested two-layer ADMM for the pairwise-fused quantile panel objective.

The outer layer handles the fusion constraint (pairwise coefficient
differences equal a dummy block vector that the SCAD shrinkage acts on); the
inner layer handles the non-smooth check loss through a residual dummy.  The
quadratic solved in every w-update has a fixed matrix, so its factorization
is computed once per (gamma, kappa) and reused throughout a whole penalty
path.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse

from .exceptions import SolverDivergenceError
from .model import GroupStructure, PanelData, StackedParams, extract_groups
from .penalties import ScadParams, prox_check, scad_group_prox_exact, scad_group_update
from .splines import SplineSystem, eval_reduced_basis_many

__all__ = [
    "AdmmConfig",
    "DifferenceOperator",
    "DesignMatrix",
    "Factorization",
    "AdmmState",
    "build_difference_operator",
    "assemble_design",
    "factorize",
    "inner_step",
    "outer_step",
    "solve_fixed_lambda",
    "FitResult",
    "fusion_tolerance",
]


@dataclass
class AdmmConfig:
    """Solver knobs; defaults follow the stacked objective's natural scaling."""

    gamma: float = 1.0        # outer augmentation (fusion constraint)
    kappa: float = 1.0        # inner augmentation (residual constraint)
    outer_max: int = 200
    inner_max: int = 10
    tol_primal: float = 1e-5  # absolute tolerances; a relative term is added
    tol_dual: float = 1e-5
    rel_tol: float = 1e-4
    majorization_steps: int = 1
    exact_scad_prox: bool = False
    stall_window: int = 20    # 0 disables stall detection
    stall_improve: float = 0.02

    def __post_init__(self):
        if self.gamma <= 0 or self.kappa <= 0:
            raise ValueError("augmentation parameters must be positive")
        if self.outer_max < 1 or self.inner_max < 1:
            raise ValueError("iteration caps must be at least 1")
        if self.tol_primal < 0 or self.tol_dual < 0 or self.rel_tol < 0:
            raise ValueError("tolerances must be nonnegative")
        if self.majorization_steps < 1:
            raise ValueError("majorization_steps must be at least 1")
        if self.stall_window < 0 or self.stall_improve < 0:
            raise ValueError("stall parameters must be nonnegative")


@dataclass(eq=False)
class DifferenceOperator:
    """Sparse pairwise difference map acting on the coefficient blocks only.

    Row block p corresponds to the ordered pair ``pairs[p] = (i, j)`` with
    i < j, and maps the stacked parameter vector to coeffs_i - coeffs_j.
    Intercept columns are identically zero.  The transpose is materialized
    once since the solver applies it every iteration.
    """

    matrix: scipy.sparse.csr_matrix
    matrix_t: scipy.sparse.csr_matrix
    pairs: np.ndarray  # (P, 2) int
    n: int
    block: int         # H

    @property
    def n_pairs(self) -> int:
        return self.pairs.shape[0]

    @property
    def diff_dim(self) -> int:
        return self.n_pairs * (self.block - 1)


def build_difference_operator(n: int, block: int) -> DifferenceOperator:
    """All C(n,2) pairwise differences in lexicographic order (0,1),(0,2),..."""
    if n < 2:
        raise ValueError(f"need at least two individuals, got {n}")
    if block < 2:
        raise ValueError("block size must be at least 2 (intercept + coeffs)")
    d = block - 1
    pairs = np.array([(i, j) for i in range(n - 1) for j in range(i + 1, n)], dtype=int)
    p = pairs.shape[0]
    rows = np.repeat(np.arange(p) * d, 2 * d) + np.tile(np.tile(np.arange(d), 2), p)
    # +I at theta columns of i, -I at theta columns of j (skip intercept col 0)
    cols_i = pairs[:, 0][:, None] * block + 1 + np.arange(d)[None, :]
    cols_j = pairs[:, 1][:, None] * block + 1 + np.arange(d)[None, :]
    cols = np.concatenate([cols_i, cols_j], axis=1).ravel()
    data = np.tile(np.concatenate([np.ones(d), -np.ones(d)]), p)
    matrix = scipy.sparse.csr_matrix((data, (rows, cols)), shape=(p * d, n * block))
    return DifferenceOperator(matrix=matrix, matrix_t=matrix.T.tocsr(),
                              pairs=pairs, n=n, block=block)


@dataclass(eq=False)
class DesignMatrix:
    """Block-diagonal design: per individual, an intercept column of ones
    followed by the reduced-basis rows at that individual's covariates.

    Stored as per-individual blocks (and their transposes) so products with
    the stacked parameter and observation vectors are batched matrix
    multiplies instead of one huge sparse product.
    """

    blocks: np.ndarray    # (n, T, H)
    blocks_t: np.ndarray  # (n, H, T)
    n: int
    T: int
    block: int

    def matvec(self, w: np.ndarray) -> np.ndarray:
        wb = w.reshape(self.n, self.block, 1)
        return np.matmul(self.blocks, wb).ravel()

    def rmatvec(self, z: np.ndarray) -> np.ndarray:
        zb = z.reshape(self.n, self.T, 1)
        return np.matmul(self.blocks_t, zb).ravel()

    def gram(self) -> np.ndarray:
        """Per-individual H x H Gram blocks."""
        return np.matmul(self.blocks_t, self.blocks)

    def full(self) -> np.ndarray:
        """Dense nT x nH matrix; intended for small test instances."""
        out = np.zeros((self.n * self.T, self.n * self.block))
        for i in range(self.n):
            out[i * self.T : (i + 1) * self.T, i * self.block : (i + 1) * self.block] = self.blocks[i]
        return out


def assemble_design(panel: PanelData, sys: SplineSystem) -> DesignMatrix:
    pi = eval_reduced_basis_many(sys, panel.x.ravel()).reshape(panel.n, panel.T, -1)
    blocks = np.concatenate([np.ones((panel.n, panel.T, 1)), pi], axis=2)
    return DesignMatrix(blocks=blocks,
                        blocks_t=np.ascontiguousarray(blocks.transpose(0, 2, 1)),
                        n=panel.n, T=panel.T, block=sys.dimension)


@dataclass(eq=False)
class Factorization:
    """Cached factorization of the w-update normal equations.

    The quadratic minimized by every w-update is
    gamma/2 ||A w - b1||^2 + kappa/2 ||Pi w - b2||^2 whose matrix
    gamma A'A + kappa Pi'Pi never changes within a solve, so one
    factorization serves all iterations.  For the canonical all-pairs
    difference operator the matrix is block diagonal minus a rank-(H-1)
    correction (gamma A'A couples every pair of coefficient blocks
    identically), so the solve uses per-individual inverses plus a small
    capacitance system instead of one large triangular factor.  A tiny ridge
    is added only if a block is numerically rank deficient, and reported.
    """

    gamma: float
    kappa: float
    ridge: float
    n: int
    block: int
    dinv: np.ndarray | None = None      # (n, H, H) inverses of the diagonal blocks
    dinv_u: np.ndarray | None = None    # (n, H, H-1): dinv restricted to coeff cols
    cap_cho: tuple | None = None        # Cholesky of the capacitance matrix
    cho: tuple | None = None            # dense fallback for non-canonical operators

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.cho is not None:
            return scipy.linalg.cho_solve(self.cho, rhs, check_finite=False)
        b = rhs.reshape(self.n, self.block, 1)
        t1 = np.matmul(self.dinv, b)[:, :, 0]
        if self.cap_cho is None:
            return t1.ravel()
        s1 = t1[:, 1:].sum(axis=0)
        z = scipy.linalg.cho_solve(self.cap_cho, s1, check_finite=False)
        return (t1 + self.dinv_u @ z).ravel()


_RIDGE = 1e-10


def _is_canonical(diff: DifferenceOperator) -> bool:
    n = diff.n
    return diff.n_pairs == n * (n - 1) // 2


def factorize(design: DesignMatrix, diff: DifferenceOperator, gamma: float,
              kappa: float) -> Factorization:
    if gamma <= 0 or kappa <= 0:
        raise ValueError("gamma and kappa must be positive")
    n, h = design.n, design.block
    if not _is_canonical(diff):
        return _factorize_dense(design, diff, gamma, kappa)

    # diagonal blocks kappa Gram_i + gamma n E, with E zero on the intercept
    gram = design.gram()
    diag = kappa * gram
    idx = np.arange(1, h)
    diag[:, idx, idx] += gamma * n
    ridge = 0.0
    try:
        dinv = np.linalg.inv(diag)
        if not np.isfinite(dinv).all():
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        ridge = _RIDGE
        diag[:, np.arange(h), np.arange(h)] += ridge
        dinv = np.linalg.inv(diag)
    if h == 1:
        return Factorization(gamma=gamma, kappa=kappa, ridge=ridge, n=n,
                             block=h, dinv=dinv, dinv_u=None, cap_cho=None)
    cap = np.eye(h - 1) / gamma - dinv[:, 1:, 1:].sum(axis=0)
    try:
        cap_cho = scipy.linalg.cho_factor(cap, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError:
        return _factorize_dense(design, diff, gamma, kappa)
    return Factorization(gamma=gamma, kappa=kappa, ridge=ridge, n=n, block=h,
                         dinv=dinv, dinv_u=np.ascontiguousarray(dinv[:, :, 1:]),
                         cap_cho=cap_cho)


def _factorize_dense(design: DesignMatrix, diff: DifferenceOperator,
                     gamma: float, kappa: float) -> Factorization:
    nh = design.n * design.block
    m = np.zeros((nh, nh))
    gram = design.gram()
    for i in range(design.n):
        sl = slice(i * design.block, (i + 1) * design.block)
        m[sl, sl] = kappa * gram[i]
    m += gamma * (diff.matrix_t @ diff.matrix).toarray()
    ridge = 0.0
    try:
        cho = scipy.linalg.cho_factor(m, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError:
        ridge = _RIDGE
        cho = scipy.linalg.cho_factor(m + ridge * np.eye(nh), lower=True,
                                      check_finite=False)
    return Factorization(gamma=gamma, kappa=kappa, ridge=ridge, n=design.n,
                         block=design.block, cho=cho)


@dataclass(eq=False)
class AdmmState:
    """Mutable iterate of the nested solver.

    ``v``/``u`` live in the fused-difference space (one block per pair),
    ``r``/``h`` in observation space.  ``fitted`` caches the design times the
    current w to avoid recomputing it at the top of each inner step.
    """

    w: np.ndarray
    v: np.ndarray
    u: np.ndarray
    r: np.ndarray
    h: np.ndarray
    fitted: np.ndarray | None = None
    outer_iters: int = 0
    inner_iters: int = 0
    inner_primal: float = np.inf  # ||r + Pi w - y|| after the last inner step
    inner_dual: float = np.inf    # kappa ||Pi'(r_new - r_old)|| likewise
    history: list = field(default_factory=list)

    @classmethod
    def zeros(cls, n: int, T: int, block: int, n_pairs: int) -> "AdmmState":
        d = block - 1
        return cls(
            w=np.zeros(n * block),
            v=np.zeros(n_pairs * d),
            u=np.zeros(n_pairs * d),
            r=np.zeros(n * T),
            h=np.zeros(n * T),
        )

    def copy(self) -> "AdmmState":
        return AdmmState(
            w=self.w.copy(), v=self.v.copy(), u=self.u.copy(),
            r=self.r.copy(), h=self.h.copy(),
            fitted=None if self.fitted is None else self.fitted.copy(),
        )


def _loss_scale(n: int, T: int) -> float:
    # stacked-objective weight on the check loss; kept positive for n = 1
    return max(n - 1, 1) / (2.0 * T)


def inner_step(state: AdmmState, fact: Factorization, design: DesignMatrix,
               diff: DifferenceOperator, y: np.ndarray, tau: float,
               cfg: AdmmConfig) -> None:
    """One (r, w, h) sweep of the inner layer, in place.

    The r-update is the elementwise check-loss prox, the w-update reuses the
    cached factorization, and h takes a dual ascent step on the residual
    constraint.
    """
    kappa = cfg.kappa
    gamma = cfg.gamma
    if state.fitted is None:
        state.fitted = design.matvec(state.w)
    c = _loss_scale(design.n, design.T) / kappa
    r_old = state.r
    state.r = prox_check(y - state.fitted - state.h / kappa, c, tau)
    rhs = diff.matrix_t @ (gamma * state.v - state.u)
    rhs += kappa * design.rmatvec(y - state.r - state.h / kappa)
    state.w = fact.solve(rhs)
    state.fitted = design.matvec(state.w)
    gap = state.r + state.fitted - y
    state.h = state.h + kappa * gap
    state.inner_primal = float(np.linalg.norm(gap))
    state.inner_dual = float(kappa * np.linalg.norm(design.rmatvec(state.r - r_old)))
    state.inner_iters += 1
    if not (np.isfinite(state.w).all() and np.isfinite(state.h).all()):
        raise SolverDivergenceError(
            "non-finite values in inner update",
            outer_iter=state.outer_iters, inner_iter=state.inner_iters,
        )


def outer_step(state: AdmmState, diff: DifferenceOperator, scad: ScadParams,
               cfg: AdmmConfig) -> tuple[float, float]:
    """One (v, u) sweep of the outer layer; returns (primal, dual) residuals."""
    gamma = cfg.gamma
    d = diff.block - 1
    aw = diff.matrix @ state.w
    z = (aw + state.u / gamma).reshape(-1, d)
    v_old = state.v
    anchor = v_old.reshape(-1, d)
    if cfg.exact_scad_prox:
        v_new = scad_group_prox_exact(z, scad, gamma)
    else:
        v_new = anchor
        for _ in range(cfg.majorization_steps):
            v_new = scad_group_update(z, v_new, scad, gamma)
    state.v = v_new.ravel()
    state.u = state.u + gamma * (aw - state.v)
    primal = float(np.linalg.norm(aw - state.v))
    dual = float(gamma * np.linalg.norm(diff.matrix_t @ (state.v - v_old)))
    state.outer_iters += 1
    if not (np.isfinite(state.v).all() and np.isfinite(state.u).all()):
        raise SolverDivergenceError("non-finite values in outer update",
                                    outer_iter=state.outer_iters)
    return primal, dual


def fusion_tolerance(block: int) -> float:
    """Norm threshold below which a fused difference block counts as zero."""
    return 1e-6 * np.sqrt(block - 1)


@dataclass(eq=False)
class FitResult:
    """Solution of one fixed-penalty solve plus diagnostics.

    Nonconvexity can park the outer iteration in a small-amplitude limit
    cycle around a partially fused solution; such solves stop early with
    ``stalled`` set and the most feasible iterate seen is returned.  They are
    usable for model selection, unlike diverged or still-improving capped
    runs.
    """

    params: StackedParams
    v: np.ndarray
    u: np.ndarray
    lam: float
    tau: float
    groups: GroupStructure
    converged: bool
    stalled: bool
    diverged: bool
    n_outer: int
    n_inner: int
    primal: float
    dual: float
    feas_inner: float
    state: AdmmState

    @property
    def usable(self) -> bool:
        return (self.converged or self.stalled) and not self.diverged


def _empty_difference(n: int, block: int) -> DifferenceOperator:
    # degenerate operator for a single-individual panel: no pairs, no rows
    matrix = scipy.sparse.csr_matrix((0, n * block))
    return DifferenceOperator(matrix=matrix, matrix_t=matrix.T.tocsr(),
                              pairs=np.empty((0, 2), dtype=int),
                              n=n, block=block)


def solve_fixed_lambda(panel: PanelData, sys: SplineSystem, tau: float, lam: float,
                       cfg: AdmmConfig, init: AdmmState | None = None,
                       design: DesignMatrix | None = None,
                       diff: DifferenceOperator | None = None,
                       fact: Factorization | None = None,
                       scad_a: float = 3.7) -> FitResult:
    """Run the nested solver at one penalty value.

    Stops when the fusion-constraint primal and dual residuals and the
    residual-dummy feasibility gap all fall below their (absolute + relative)
    tolerances, or at the outer iteration cap.  Divergence or hitting the cap
    flags the result as not converged; the iterate is still returned.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if design is None:
        design = assemble_design(panel, sys)
    if diff is None:
        diff = (build_difference_operator(panel.n, sys.dimension)
                if panel.n >= 2 else _empty_difference(panel.n, sys.dimension))
    if fact is None:
        fact = factorize(design, diff, cfg.gamma, cfg.kappa)
    y = panel.y.ravel()
    state = init.copy() if init is not None else AdmmState.zeros(
        panel.n, panel.T, sys.dimension, diff.n_pairs)
    scad = ScadParams(lam=lam, a=scad_a)

    dim_v = max(diff.diff_dim, 1)
    dim_w = state.w.size
    dim_r = y.size
    y_norm = float(np.linalg.norm(y))

    converged = False
    stalled = False
    diverged = False
    primal = dual = np.inf
    best_score = np.inf
    best_at = 0
    snapshot = None
    try:
        for outer in range(1, cfg.outer_max + 1):
            eps_feas = np.sqrt(dim_r) * cfg.tol_primal + cfg.rel_tol * max(
                float(np.linalg.norm(state.r)), float(np.linalg.norm(state.fitted))
                if state.fitted is not None else 0.0, y_norm)
            eps_idual = np.sqrt(dim_w) * cfg.tol_dual + cfg.rel_tol * float(
                np.linalg.norm(design.rmatvec(state.h)))
            for _ in range(cfg.inner_max):
                inner_step(state, fact, design, diff, y, tau, cfg)
                # the inner quadratic's data changes only at outer steps, so
                # once its own residuals are tiny further sweeps are no-ops
                if state.inner_primal <= eps_feas and state.inner_dual <= eps_idual:
                    break
            primal, dual = outer_step(state, diff, scad, cfg)
            state.history.append((primal, dual, state.inner_primal, state.inner_dual))
            aw_norm = float(np.linalg.norm(diff.matrix @ state.w))
            v_norm = float(np.linalg.norm(state.v))
            eps_pri = np.sqrt(dim_v) * cfg.tol_primal + cfg.rel_tol * max(aw_norm, v_norm)
            eps_dual = np.sqrt(dim_w) * cfg.tol_dual + cfg.rel_tol * float(
                np.linalg.norm(diff.matrix_t @ state.u))
            if (primal <= eps_pri and dual <= eps_dual
                    and state.inner_primal <= eps_feas
                    and state.inner_dual <= eps_idual):
                converged = True
                break
            score = primal + state.inner_primal
            if score < best_score * (1.0 - cfg.stall_improve) or snapshot is None:
                best_score = score
                best_at = outer
                snapshot = (state.w.copy(), state.v.copy(), state.u.copy(),
                            state.r.copy(), state.h.copy())
            elif cfg.stall_window and outer - best_at >= cfg.stall_window:
                # limit cycle: feasibility has stopped improving, so keep the
                # most feasible iterate seen instead of burning the cap
                stalled = True
                break
    except SolverDivergenceError:
        diverged = True

    if stalled and snapshot is not None:
        state.w, state.v, state.u, state.r, state.h = (a.copy() for a in snapshot)
        state.fitted = design.matvec(state.w)
        gap = state.r + state.fitted - y
        primal = float(np.linalg.norm((diff.matrix @ state.w) - state.v))
        state.inner_primal = float(np.linalg.norm(gap))

    params = StackedParams(w=state.w.copy(), n=panel.n, block=sys.dimension)
    groups = extract_groups(state.v, diff.pairs, params.coeffs(),
                            fusion_tolerance(sys.dimension))
    return FitResult(
        params=params, v=state.v.copy(), u=state.u.copy(), lam=lam, tau=tau,
        groups=groups, converged=converged and not diverged,
        stalled=stalled and not diverged, diverged=diverged,
        n_outer=state.outer_iters, n_inner=state.inner_iters,
        primal=primal, dual=dual, feas_inner=state.inner_primal, state=state,
    )
