"""Command-line interface: fit, simulate, predict.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 solver or
selection failure, 5 inference error, 1 anything unexpected.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from .bundle import (
    build_bundle,
    load_bundle,
    load_panel_csv,
    write_bundle,
    write_fit_csvs,
    write_study_report,
)
from .config import RunConfig, load_config
from .exceptions import (
    ConfigError,
    DataError,
    InferenceError,
    QuantfuseError,
    SelectionError,
    SolverDivergenceError,
)
from .model import AffineMap, PanelData, normalize_covariates
from .pipeline import fit_single_tau
from .simulation import DgpSpec, run_study
from .splines import eval_reduced_basis_many, make_system

__all__ = ["main", "build_parser"]

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_SOLVER = 4
EXIT_INFERENCE = 5


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quantfuse",
        description="Latent subgroup discovery in panel data via fused "
                    "nonparametric quantile regression.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--out", help="output directory (default from config)")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--tau", type=float, action="append",
                       help="quantile level; repeatable")
        p.add_argument("--lambda-max", type=float, dest="lambda_max",
                       help="top of the penalty grid")
        p.add_argument("--grid-size", type=int, dest="grid_size",
                       help="number of penalty grid steps")
        p.add_argument("--knots", type=int, help="interior knot count")
        p.add_argument("--order", type=int, help="spline order")
        p.add_argument("--kmax", type=int, help="largest admissible group count")
        p.add_argument("--level", type=float, help="confidence level")
        p.add_argument("--no-figures", action="store_true",
                       help="skip figure rendering")

    p_fit = sub.add_parser("fit", help="fit a panel CSV and emit a result bundle")
    add_common(p_fit)
    p_fit.add_argument("--data", required=True, help="input CSV with header id,t,y,x")
    p_fit.add_argument("--no-inference", action="store_true",
                       help="skip confidence bands")

    p_sim = sub.add_parser("simulate", help="run a Monte Carlo study")
    add_common(p_sim)
    p_sim.add_argument("--experiment", type=int, help="generating process id (1-4)")
    p_sim.add_argument("--n", type=int, help="number of individuals")
    p_sim.add_argument("--T", type=int, dest="T", help="number of time points")
    p_sim.add_argument("--reps", type=int, help="number of replications")
    p_sim.add_argument("--workers", type=int, help="parallel worker processes")

    p_pred = sub.add_parser("predict", help="evaluate fitted group curves")
    p_pred.add_argument("--bundle", required=True, help="result bundle JSON")
    p_pred.add_argument("--out", help="output CSV (default: stdout)")
    p_pred.add_argument("--x", type=float, action="append", default=None,
                        help="covariate value in original units; repeatable")
    p_pred.add_argument("--grid", type=int,
                        help="evaluate on a grid of this many points instead")
    p_pred.add_argument("--id", dest="individual",
                        help="also report the named individual's curve")
    p_pred.add_argument("--tau", type=float, action="append",
                        help="restrict to these quantile levels")
    return parser


def _config_from_args(args) -> RunConfig:
    overrides = {
        "seed": getattr(args, "seed", None),
        "tau": args.tau if getattr(args, "tau", None) else None,
        "lambda.max": getattr(args, "lambda_max", None),
        "lambda.grid_size": getattr(args, "grid_size", None),
        "spline.interior": getattr(args, "knots", None),
        "spline.order": getattr(args, "order", None),
        "selection.k_max": getattr(args, "kmax", None),
        "inference.level": getattr(args, "level", None),
        "simulation.experiment": getattr(args, "experiment", None),
        "simulation.n": getattr(args, "n", None),
        "simulation.T": getattr(args, "T", None),
        "simulation.replications": getattr(args, "reps", None),
        "simulation.workers": getattr(args, "workers", None),
        "output.dir": getattr(args, "out", None),
    }
    if getattr(args, "no_figures", False):
        overrides["output.figures"] = False
    if getattr(args, "no_inference", False):
        overrides["inference.enabled"] = False
    return load_config(args.config, overrides)


def _stage(name: str):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and isinstance(exc, QuantfuseError):
                exc.args = (f"[{name}] {exc}",)
            return False

    return _Ctx()


def cmd_fit(args) -> int:
    cfg = _config_from_args(args)
    out_dir = cfg.output.dir
    os.makedirs(out_dir, exist_ok=True)
    with _stage("data"):
        y_raw, x_raw, ids = load_panel_csv(args.data)
        x_norm, amap = normalize_covariates(x_raw)
        panel = PanelData(y=y_raw, x=x_norm, ids=ids)
    fits = []
    for tau in cfg.tau:
        with _stage(f"fit tau={tau:g}"):
            fits.append(fit_single_tau(panel, tau, cfg))
    with _stage("output"):
        doc = build_bundle(cfg, fits, amap, panel)
        bundle_path = os.path.join(out_dir, "result_bundle.json")
        write_bundle(doc, bundle_path)
        written = [bundle_path] + write_fit_csvs(out_dir, fits, ids)
        if cfg.output.figures:
            from .plots import plot_fit_figures

            written += plot_fit_figures(out_dir, fits, ids)
    for fit in fits:
        print(f"tau={fit.tau:g}: K={fit.report.k} at lambda={fit.report.lam:g} "
              f"(path of {len(fit.report.sic_table)} penalties, "
              f"{fit.report.n_excluded} non-converged excluded)")
    print("wrote: " + ", ".join(os.path.relpath(p, out_dir) for p in written)
          + f" in {out_dir}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config_from_args(args)
    out_root = cfg.output.dir
    os.makedirs(out_root, exist_ok=True)
    taus = cfg.tau
    for tau in taus:
        spec = DgpSpec(experiment=cfg.simulation.experiment, n=cfg.simulation.n,
                       T=cfg.simulation.T, tau=tau, seed=cfg.seed)
        out_dir = out_root if len(taus) == 1 else os.path.join(out_root, f"tau{tau:g}")
        os.makedirs(out_dir, exist_ok=True)
        with _stage(f"simulate tau={tau:g}"):
            report = run_study(spec, cfg)
            written = write_study_report(out_dir, report)
            if cfg.output.figures:
                from .plots import plot_study_figures

                written += plot_study_figures(out_dir, report)
        print(f"experiment {spec.experiment} tau={tau:g}: "
              f"{report.pct_correct_k:.1f}% correct group count over "
              f"{report.replications} replications ({report.failures} failed), "
              f"MSE oracle={report.mse_oracle:.3e} penalized={report.mse_penalized:.3e} "
              f"[{report.elapsed_seconds:.1f}s]")
        print("wrote: " + ", ".join(os.path.relpath(p, out_root) for p in written))
    return EXIT_OK


def cmd_predict(args) -> int:
    doc = load_bundle(args.bundle)
    lo = doc["normalization"]["lo"]
    hi = doc["normalization"]["hi"]
    amap = AffineMap(lo=lo, hi=hi)
    if args.x is not None and args.grid is not None:
        raise ConfigError("give either --x values or --grid, not both")
    if args.grid is not None:
        if args.grid < 0:
            raise ConfigError("--grid must be nonnegative")
        xs = np.linspace(lo, hi, args.grid) if args.grid else np.array([])
    else:
        xs = np.array(args.x if args.x is not None else [], dtype=float)

    want_taus = set(args.tau) if args.tau else None
    ids = doc["panel"]["ids"]
    ind_index = None
    if args.individual is not None:
        if args.individual not in ids:
            raise DataError(f"unknown individual id '{args.individual}'")
        ind_index = ids.index(args.individual)

    header = ["tau", "x", "extrapolated", "group", "estimate"]
    if ind_index is not None:
        header.append(f"individual_{args.individual}")
    rows = []
    for fit in doc["fits"]:
        if want_taus is not None and fit["tau"] not in want_taus:
            continue
        sys_ = make_system(fit["spline"]["interior"], fit["spline"]["order"])
        coeffs = np.asarray(fit["group_coeffs"], dtype=float)
        intercepts = np.asarray(fit["intercepts"], dtype=float)
        labels = fit["labels"]
        if xs.size:
            norm_x = amap.forward(xs)
            outside = (norm_x < 0.0) | (norm_x > 1.0)
            clipped = np.clip(norm_x, 0.0, 1.0)
            pi = eval_reduced_basis_many(sys_, clipped)
            est = pi @ coeffs.T  # (len(xs), K)
            for j, xval in enumerate(xs):
                for g in range(coeffs.shape[0]):
                    row = [fit["tau"], float(xval), int(outside[j]), g + 1,
                           float(est[j, g])]
                    if ind_index is not None:
                        if labels[ind_index] == g + 1:
                            row.append(float(intercepts[ind_index] + est[j, g]))
                        else:
                            row.append("")
                    rows.append(row)

    buf = [",".join(header)]
    for row in rows:
        buf.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    text = "\n".join(buf) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        print(f"wrote {args.out} ({len(rows)} rows)")
    else:
        sys.stdout.write(text)
    return EXIT_OK


_COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "predict": cmd_predict}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SolverDivergenceError, SelectionError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except InferenceError as exc:
        print(f"inference error: {exc}", file=sys.stderr)
        return EXIT_INFERENCE
    except QuantfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    raise SystemExit(main())
