"""Benchmark data generators and the Monte Carlo study driver.

Four generating processes: iid uniform covariates with normal noise,
autoregressive covariates pushed through a probability-integral transform,
heavy-tailed t(5) noise, and a heteroskedastic design whose group structure
changes with the quantile level.  Individual effects are drawn once per study
and reused across replications; every replication gets its own random stream
derived from the study seed and the replication index.
"""
from __future__ import annotations

import concurrent.futures
import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm, t as student_t

from .config import RunConfig
from .exceptions import ConfigError, QuantfuseError
from .inference import confidence_band, estimate_density_at_zero
from .model import GroupStructure, PanelData, residuals
from .pipeline import fit_single_tau, spline_system_for
from .selection import refit_oracle
from .splines import eval_reduced_basis_many

__all__ = [
    "DgpSpec",
    "TruePanel",
    "StudyReport",
    "gen_experiment1",
    "gen_experiment2",
    "gen_experiment3",
    "gen_experiment4",
    "generate",
    "true_group_count",
    "mse",
    "run_study",
    "replication_seed",
]

_SIGNAL_LEVELS = (0.2, 1.0, 2.0)
_AR_COEF = 0.5
_AR_BURNIN = 200


@dataclass
class DgpSpec:
    """One simulated study: which process, panel size, quantile, seed."""

    experiment: int
    n: int
    T: int
    tau: float
    seed: int

    def __post_init__(self):
        if self.experiment not in (1, 2, 3, 4):
            raise ConfigError(f"unknown experiment id {self.experiment}")
        if self.experiment in (1, 2, 3) and self.n % 3 != 0:
            raise ConfigError("experiments 1-3 need n divisible by 3")
        if self.experiment == 4 and self.n != 60:
            raise ConfigError("experiment 4 uses n = 60 unless custom partitions are supplied")
        if not 0 < self.tau < 1:
            raise ConfigError(f"tau must be in (0, 1), got {self.tau}")


@dataclass(eq=False)
class TruePanel:
    """Generated panel plus the truth needed for metrics."""

    panel: PanelData
    m_obs: np.ndarray       # true centered quantile function at observed x, (n, T)
    labels: np.ndarray      # true group labels, 1-based
    m_funcs: list           # per-individual callables x -> m_i(x)

    @property
    def k(self) -> int:
        return int(self.labels.max())


def _signal_labels(n: int) -> tuple[np.ndarray, np.ndarray]:
    third = n // 3
    c = np.repeat(_SIGNAL_LEVELS, third)
    labels = np.repeat([1, 2, 3], third)
    return c, labels


def gen_experiment1(n: int, T: int, tau: float, mu: np.ndarray,
                    rng: np.random.Generator) -> TruePanel:
    """iid U(0,1) covariates; normal noise shifted so its tau-quantile is 0."""
    c, labels = _signal_labels(n)
    x = rng.uniform(size=(n, T))
    e = 0.1 * (rng.standard_normal((n, T)) - norm.ppf(tau))
    m_obs = c[:, None] * np.sin(2.0 * np.pi * x)
    y = mu[:, None] + m_obs + e
    funcs = [(lambda xx, ci=ci: ci * np.sin(2.0 * np.pi * np.asarray(xx)))
             for ci in c]
    return TruePanel(panel=PanelData(y=y, x=x), m_obs=m_obs, labels=labels,
                     m_funcs=funcs)


def gen_experiment2(n: int, T: int, tau: float, mu: np.ndarray,
                    rng: np.random.Generator) -> TruePanel:
    """AR(1) latent covariates mapped into [0,1] by the stationary normal CDF."""
    c, labels = _signal_labels(n)
    innov = rng.standard_normal((n, T + _AR_BURNIN))
    latent = np.zeros(n)
    series = np.empty((n, T + _AR_BURNIN))
    for s in range(T + _AR_BURNIN):
        latent = _AR_COEF * latent + innov[:, s]
        series[:, s] = latent
    x = norm.cdf(series[:, _AR_BURNIN:], scale=np.sqrt(4.0 / 3.0))
    e = 0.1 * (rng.standard_normal((n, T)) - norm.ppf(tau))
    m_obs = c[:, None] * np.sin(2.0 * np.pi * x)
    y = mu[:, None] + m_obs + e
    funcs = [(lambda xx, ci=ci: ci * np.sin(2.0 * np.pi * np.asarray(xx)))
             for ci in c]
    return TruePanel(panel=PanelData(y=y, x=x), m_obs=m_obs, labels=labels,
                     m_funcs=funcs)


def gen_experiment3(n: int, T: int, tau: float, mu: np.ndarray,
                    rng: np.random.Generator) -> TruePanel:
    """Heavy-tailed t(5) noise, scaled by 0.1 and centered at its tau-quantile."""
    c, labels = _signal_labels(n)
    x = rng.uniform(size=(n, T))
    eps = rng.standard_t(5, size=(n, T))
    e = 0.1 * (eps - student_t.ppf(tau, 5))
    m_obs = c[:, None] * np.sin(2.0 * np.pi * x)
    y = mu[:, None] + m_obs + e
    funcs = [(lambda xx, ci=ci: ci * np.sin(2.0 * np.pi * np.asarray(xx)))
             for ci in c]
    return TruePanel(panel=PanelData(y=y, x=x), m_obs=m_obs, labels=labels,
                     m_funcs=funcs)


# scale branches of experiment 4: (intercept, slope) of sigma(x)
_EXP4_LOWER = [(0.4, 0.8), (1.2, -0.8)]          # two groups of 30
_EXP4_UPPER = [(0.4, 0.8), (1.2, -0.8), (0.4, 0.0)]  # three groups of 20


def _exp4_partitions(n: int = 60) -> tuple[np.ndarray, np.ndarray]:
    lower = np.repeat([1, 2], n // 2)
    upper = np.repeat([1, 2, 3], n // 3)
    return lower, upper


def true_group_count(experiment: int, tau: float) -> int:
    if experiment in (1, 2, 3):
        return 3
    if tau == 0.5:
        return 1
    return 2 if tau < 0.5 else 3


def _exp4_true_labels(tau: float, n: int = 60) -> np.ndarray:
    lower, upper = _exp4_partitions(n)
    if tau == 0.5:
        return np.ones(n, dtype=int)
    return lower if tau < 0.5 else upper


def gen_experiment4(n: int, T: int, tau: float, mu: np.ndarray,
                    rng: np.random.Generator) -> TruePanel:
    """Two-sided heteroskedastic scale; the grouping depends on tau.

    The centered quantile function adds the de-meaned scale branch times the
    normal quantile, so the zero-integral constraint holds exactly.
    """
    lower, upper = _exp4_partitions(n)
    x = rng.uniform(size=(n, T))
    eps = rng.standard_normal((n, T))
    sig_lo = np.empty((n, T))
    sig_up = np.empty((n, T))
    for g, (b0, b1) in enumerate(_EXP4_LOWER, start=1):
        mask = lower == g
        sig_lo[mask] = b0 + b1 * x[mask]
    for g, (b0, b1) in enumerate(_EXP4_UPPER, start=1):
        mask = upper == g
        sig_up[mask] = b0 + b1 * x[mask]
    sigma = np.where(eps < 0.0, sig_lo, sig_up)
    y = mu[:, None] + np.sin(2.0 * np.pi * x) + sigma * eps

    z = norm.ppf(tau)
    labels = _exp4_true_labels(tau, n)
    branches = _EXP4_LOWER if tau < 0.5 else _EXP4_UPPER
    m_obs = np.sin(2.0 * np.pi * x)
    funcs = []
    for i in range(n):
        if tau == 0.5:
            funcs.append(lambda xx: np.sin(2.0 * np.pi * np.asarray(xx)))
        else:
            b0, b1 = branches[labels[i] - 1]
            mean = b0 + 0.5 * b1

            def f(xx, b0=b0, b1=b1, mean=mean, z=z):
                xx = np.asarray(xx)
                return np.sin(2.0 * np.pi * xx) + (b0 + b1 * xx - mean) * z

            funcs.append(f)
            m_obs[i] += (b0 + b1 * x[i] - mean) * z
    return TruePanel(panel=PanelData(y=y, x=x), m_obs=m_obs, labels=labels,
                     m_funcs=funcs)


_GENERATORS = {1: gen_experiment1, 2: gen_experiment2, 3: gen_experiment3,
               4: gen_experiment4}


def generate(spec: DgpSpec, mu: np.ndarray, rng: np.random.Generator) -> TruePanel:
    return _GENERATORS[spec.experiment](spec.n, spec.T, spec.tau, mu, rng)


def replication_seed(seed: int, rep: int) -> int:
    """Stream seed for a replication: study seed XOR 1-based replication index."""
    return seed ^ (rep + 1)


def mse(fitted_m: np.ndarray, true_m: np.ndarray) -> float:
    """Mean squared deviation between fitted and true curves at observed points."""
    fitted_m = np.asarray(fitted_m, dtype=float)
    true_m = np.asarray(true_m, dtype=float)
    if fitted_m.shape != true_m.shape:
        raise ValueError(f"shape mismatch {fitted_m.shape} vs {true_m.shape}")
    return float(np.mean((fitted_m - true_m) ** 2))


@dataclass
class RepOutcome:
    rep: int
    failed: bool = False
    error: str = ""
    k_hat: int = 0
    k_correct: bool = False
    exact_partition: bool = False
    lam: float = np.nan
    mse_penalized: float = np.nan  # refit on the estimated grouping
    mse_oracle: float = np.nan     # refit on the true grouping
    mse_raw: float = np.nan        # consensus of the raw penalized blocks
    n_outer: int = 0
    coverage_est: np.ndarray | None = None   # hits per coverage point, est groups
    coverage_true: np.ndarray | None = None  # hits per coverage point, true groups


def _coverage_hits(panel, sys, groups: GroupStructure, coeffs, truth: TruePanel,
                   tau, cov_x, level, density_method, floor) -> np.ndarray:
    """Fraction of individuals whose true curve lies inside the band, per x."""
    params_int = groups.intercepts
    from .model import StackedParams

    theta = coeffs[groups.labels - 1]
    res = residuals(panel, sys, StackedParams.from_parts(params_int, theta))
    density = estimate_density_at_zero(panel, res, groups,
                                       method=density_method, floor=floor)
    bands = confidence_band(cov_x, panel, sys, groups, coeffs, density, tau,
                            level=level)
    hits = np.zeros(len(cov_x))
    for i in range(panel.n):
        band = bands[groups.labels[i] - 1]
        target = truth.m_funcs[i](np.asarray(cov_x))
        hits += ((band.lower <= target) & (target <= band.upper)).astype(float)
    return hits / panel.n


def _run_replication(spec: DgpSpec, cfg: RunConfig, mu: np.ndarray,
                     rep: int) -> RepOutcome:
    out = RepOutcome(rep=rep)
    try:
        rng = np.random.default_rng(replication_seed(spec.seed, rep))
        truth = generate(spec, mu, rng)
        panel = truth.panel
        sys = spline_system_for(cfg, panel.n_obs)
        fit = fit_single_tau(panel, spec.tau, cfg, sys=sys, with_inference=False)
        report = fit.report

        out.k_hat = report.k
        out.lam = report.lam
        out.k_correct = report.k == truth.k
        out.exact_partition = bool(
            np.array_equal(report.groups.labels,
                           GroupStructure(labels=truth.labels).labels))
        out.n_outer = fit.path.total_outer

        pi = eval_reduced_basis_many(sys, panel.x.ravel()).reshape(panel.n, panel.T, -1)
        # raw solver iterate, consensus-averaged within each fused group
        # (diagnostic; it carries the concave penalty's shrinkage bias)
        theta_raw = report.params.coeffs()
        theta_con = np.vstack([
            theta_raw[report.groups.members(g)].mean(axis=0)
            for g in range(1, report.k + 1)
        ])[report.groups.labels - 1]
        out.mse_raw = mse(np.einsum("ith,ih->it", pi, theta_con), truth.m_obs)

        # reported estimator: group-level refit on the estimated partition
        theta_r = report.refit.group_coeffs[report.groups.labels - 1]
        fitted_refit = np.einsum("ith,ih->it", pi, theta_r)
        out.mse_penalized = mse(fitted_refit, truth.m_obs)

        true_groups = GroupStructure(labels=truth.labels.copy())
        oracle = refit_oracle(panel, sys, spec.tau, true_groups)
        theta_o = oracle.group_coeffs[oracle.groups.labels - 1]
        fitted_oracle = np.einsum("ith,ih->it", pi, theta_o)
        out.mse_oracle = mse(fitted_oracle, truth.m_obs)

        if cfg.simulation.coverage and cfg.simulation.coverage_x:
            cov_x = np.asarray(cfg.simulation.coverage_x, dtype=float)
            level = cfg.inference.level
            out.coverage_est = _coverage_hits(
                panel, sys, report.groups, report.refit.group_coeffs, truth,
                spec.tau, cov_x, level, cfg.inference.density, cfg.inference.floor)
            true_struct = GroupStructure(labels=truth.labels.copy(),
                                         intercepts=oracle.intercepts)
            out.coverage_true = _coverage_hits(
                panel, sys, true_struct, oracle.group_coeffs, truth,
                spec.tau, cov_x, level, cfg.inference.density, cfg.inference.floor)
    except (QuantfuseError, np.linalg.LinAlgError) as exc:
        out.failed = True
        out.error = f"{type(exc).__name__}: {exc}"
    return out


@dataclass(eq=False)
class StudyReport:
    """Aggregate of one Monte Carlo study."""

    experiment: int
    n: int
    T: int
    tau: float
    seed: int
    replications: int
    failures: int
    pct_correct_k: float
    pct_exact_partition: float
    mse_oracle: float
    mse_penalized: float
    mse_raw: float
    k_histogram: dict
    coverage_x: list
    coverage_est: list
    coverage_true: list
    mean_lambda: float
    mean_outer_iters: float
    outcomes: list = field(default_factory=list, repr=False)
    elapsed_seconds: float = 0.0  # never serialized; reports stay byte-stable


def run_study(spec: DgpSpec, cfg: RunConfig) -> StudyReport:
    """Run all replications (optionally in parallel) and aggregate metrics.

    Individual effects are drawn once from the study seed; replication r uses
    the stream seeded by seed XOR (r+1), so reports are reproducible bit for
    bit regardless of the worker count.  Failed replications are counted and
    excluded from the averages.
    """
    start = time.perf_counter()
    reps = cfg.simulation.replications
    mu = np.random.default_rng(spec.seed).standard_normal(spec.n)
    workers = cfg.simulation.workers or (os.cpu_count() or 1)

    if workers > 1 and reps > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_replication_entry,
                                     [(spec, cfg, mu, r) for r in range(reps)]))
    else:
        outcomes = [_run_replication(spec, cfg, mu, r) for r in range(reps)]

    ok = [o for o in outcomes if not o.failed]
    failures = len(outcomes) - len(ok)
    cov_x = list(cfg.simulation.coverage_x) if cfg.simulation.coverage else []

    def mean_of(attr):
        vals = [getattr(o, attr) for o in ok]
        return float(np.mean(vals)) if vals else float("nan")

    k_hist: dict[int, int] = {}
    for o in ok:
        k_hist[o.k_hat] = k_hist.get(o.k_hat, 0) + 1

    cov_est = cov_true = []
    if cov_x and ok:
        have_est = [o.coverage_est for o in ok if o.coverage_est is not None]
        have_true = [o.coverage_true for o in ok if o.coverage_true is not None]
        cov_est = list(np.mean(have_est, axis=0)) if have_est else []
        cov_true = list(np.mean(have_true, axis=0)) if have_true else []

    report = StudyReport(
        experiment=spec.experiment, n=spec.n, T=spec.T, tau=spec.tau,
        seed=spec.seed, replications=reps, failures=failures,
        pct_correct_k=100.0 * float(np.mean([o.k_correct for o in ok])) if ok else float("nan"),
        pct_exact_partition=100.0 * float(np.mean([o.exact_partition for o in ok])) if ok else float("nan"),
        mse_oracle=mean_of("mse_oracle"),
        mse_penalized=mean_of("mse_penalized"),
        mse_raw=mean_of("mse_raw"),
        k_histogram={int(k): v for k, v in sorted(k_hist.items())},
        coverage_x=cov_x,
        coverage_est=[float(v) for v in cov_est],
        coverage_true=[float(v) for v in cov_true],
        mean_lambda=mean_of("lam"),
        mean_outer_iters=mean_of("n_outer"),
        outcomes=outcomes,
    )
    report.elapsed_seconds = time.perf_counter() - start
    return report


def _replication_entry(args) -> RepOutcome:
    return _run_replication(*args)
