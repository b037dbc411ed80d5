"""Figure rendering for the CLI report path (written next to the CSVs)."""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["plot_fit_figures", "plot_study_figures"]


def plot_fit_figures(out_dir: str, fits, ids) -> list[str]:
    """SIC curve, group-count curve, and fitted group curves per quantile."""
    written = []

    fig, axes = plt.subplots(1, 2, figsize=(9.6, 3.6))
    for fit in fits:
        lams = [row[0] for row in fit.report.sic_table]
        ks = [row[1] for row in fit.report.sic_table]
        sics = [row[2] for row in fit.report.sic_table]
        axes[0].plot(lams, sics, marker=".", label=f"tau={fit.tau:g}")
        axes[1].step(lams, ks, where="post", label=f"tau={fit.tau:g}")
        axes[0].axvline(fit.report.lam, color="grey", lw=0.6, ls="--")
    axes[0].set_xlabel("penalty")
    axes[0].set_ylabel("SIC")
    axes[1].set_xlabel("penalty")
    axes[1].set_ylabel("number of groups")
    axes[1].legend(fontsize=8)
    fig.tight_layout()
    path = os.path.join(out_dir, "sic_and_groups.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    for fit in fits:
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        if fit.bands is not None:
            for g, band in enumerate(fit.bands, start=1):
                size = int(np.sum(fit.report.groups.labels == g))
                line, = ax.plot(band.x, band.estimate, label=f"group {g} (n={size})")
                ax.fill_between(band.x, band.lower, band.upper,
                                color=line.get_color(), alpha=0.2, lw=0)
        else:
            from .splines import eval_reduced_basis_many

            grid = np.linspace(0.01, 0.99, 99)
            pi = eval_reduced_basis_many(fit.sys, grid)
            for g in range(fit.report.k):
                size = int(np.sum(fit.report.groups.labels == g + 1))
                ax.plot(grid, pi @ fit.report.refit.group_coeffs[g],
                        label=f"group {g + 1} (n={size})")
        ax.set_xlabel("normalized covariate")
        ax.set_ylabel("estimated group function")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = os.path.join(out_dir, f"group_curves_tau{fit.tau:g}.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def plot_study_figures(out_dir: str, report) -> list[str]:
    """Group-count histogram and coverage profile for a simulation study."""
    written = []

    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    ks = sorted(report.k_histogram)
    ax.bar([str(k) for k in ks], [report.k_histogram[k] for k in ks])
    ax.set_xlabel("estimated number of groups")
    ax.set_ylabel("replications")
    ax.set_title(f"experiment {report.experiment}, tau={report.tau:g}")
    fig.tight_layout()
    path = os.path.join(out_dir, "k_histogram.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    if report.coverage_x:
        fig, ax = plt.subplots(figsize=(5.0, 3.5))
        ax.plot(report.coverage_x, report.coverage_est, marker="o",
                label="estimated groups")
        if report.coverage_true:
            ax.plot(report.coverage_x, report.coverage_true, marker="s",
                    label="true groups")
        ax.axhline(0.95, color="grey", lw=0.8, ls="--")
        ax.set_ylim(0.0, 1.05)
        ax.set_xlabel("x")
        ax.set_ylabel("empirical coverage")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = os.path.join(out_dir, "coverage.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
