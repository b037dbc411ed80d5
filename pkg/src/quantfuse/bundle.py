"""Result serialization: panel CSV ingestion, the JSON result bundle, and the
flat CSV outputs that accompany it.

All emitted documents are deterministic: keys sorted, no timestamps, floats
rendered by Python's repr.  Identical configuration and seed therefore yield
byte-identical files.
"""
from __future__ import annotations

import csv
import io
import json
import os

import numpy as np

from .config import RunConfig
from .exceptions import DataError
from .model import AffineMap, PanelData
from .pipeline import TauFit
from .simulation import StudyReport

__all__ = [
    "load_panel_csv",
    "write_panel_csv",
    "build_bundle",
    "write_bundle",
    "load_bundle",
    "write_fit_csvs",
    "write_study_report",
    "BUNDLE_FORMAT",
    "BUNDLE_VERSION",
]

BUNDLE_FORMAT = "quantfuse-bundle"
BUNDLE_VERSION = 1

_HEADER = ["id", "t", "y", "x"]


def load_panel_csv(path: str) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Read a long-format panel CSV with header id,t,y,x.

    Individuals are ordered by first appearance; every id must carry exactly
    the same set of time points.  Returns raw (un-normalized) y and x as
    (n, T) arrays plus the id labels.
    """
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except FileNotFoundError as exc:
        raise DataError(f"panel file not found: {path}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration as exc:
            raise DataError(f"{path}: empty file") from exc
        if [h.strip() for h in header] != _HEADER:
            raise DataError(f"{path}: header must be exactly 'id,t,y,x'")
        rows: dict[str, dict[float, tuple[float, float]]] = {}
        order: list[str] = []
        for lineno, parts in enumerate(reader, start=2):
            if not parts or (len(parts) == 1 and not parts[0].strip()):
                continue
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            ident = parts[0].strip()
            try:
                tval = float(parts[1])
                yval = float(parts[2])
                xval = float(parts[3])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric field: {exc}") from exc
            if ident not in rows:
                rows[ident] = {}
                order.append(ident)
            if tval in rows[ident]:
                raise DataError(f"{path}:{lineno}: duplicate (id, t) = ({ident}, {parts[1]})")
            rows[ident][tval] = (yval, xval)

    if not order:
        raise DataError(f"{path}: no data rows")
    times = sorted(rows[order[0]].keys())
    time_set = set(times)
    bad = [ident for ident in order if set(rows[ident].keys()) != time_set]
    if bad:
        raise DataError(
            f"{path}: unbalanced panel; ids with differing time points: {bad}")
    n, T = len(order), len(times)
    y = np.empty((n, T))
    x = np.empty((n, T))
    for i, ident in enumerate(order):
        for j, tval in enumerate(times):
            y[i, j], x[i, j] = rows[ident][tval]
    return y, x, order


def write_panel_csv(path: str, y: np.ndarray, x: np.ndarray,
                    ids: list[str] | None = None) -> None:
    """Write a long-format panel CSV (inverse of load_panel_csv)."""
    n, T = y.shape
    ids = ids if ids is not None else [str(i + 1) for i in range(n)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_HEADER)
        for i in range(n):
            for t in range(T):
                writer.writerow([ids[i], t + 1, repr(float(y[i, t])), repr(float(x[i, t]))])


def _native(obj):
    """Recursively convert numpy scalars/arrays to plain Python objects."""
    if isinstance(obj, dict):
        return {str(k): _native(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_native(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_native(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def build_bundle(cfg: RunConfig, fits: list[TauFit], amap: AffineMap,
                 panel: PanelData) -> dict:
    """Assemble the self-describing result document for a fit run."""
    ids = panel.ids if panel.ids is not None else [str(i + 1) for i in range(panel.n)]
    fit_docs = []
    for fit in fits:
        report = fit.report
        doc = {
            "tau": fit.tau,
            "spline": {
                "order": fit.sys.knots.order,
                "interior": fit.sys.knots.interior_count,
                "dimension": fit.sys.dimension,
            },
            "lambda": report.lam,
            "k": report.k,
            "labels": report.groups.labels,
            "intercepts": report.refit.intercepts,
            "group_coeffs": report.refit.group_coeffs,
            "penalized_coeffs": report.params.coeffs(),
            "sic_table": [
                {"lambda": lam, "k": k, "sic": s, "status": status}
                for lam, k, s, status in report.sic_table
            ],
            "n_excluded": report.n_excluded,
            "diagnostics": {
                "path_outer_iters": fit.path.total_outer,
                "path_inner_iters": fit.path.total_inner,
                "refit_converged": report.refit.converged,
                "refit_iters": report.refit.n_iter,
            },
        }
        if fit.bands is not None:
            doc["bands"] = {
                "level": cfg.inference.level,
                "x": fit.band_grid,
                "groups": [
                    {"estimate": b.estimate, "se": b.se,
                     "lower": b.lower, "upper": b.upper}
                    for b in fit.bands
                ],
            }
            doc["diagnostics"]["density_floored"] = fit.density.floored
            doc["diagnostics"]["density_method"] = fit.density.method
        fit_docs.append(doc)
    bundle = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "config": cfg.to_dict(),
        "normalization": {"lo": amap.lo, "hi": amap.hi},
        "panel": {"n": panel.n, "T": panel.T, "ids": ids},
        "fits": fit_docs,
    }
    return _native(bundle)


def _dump_json(doc: dict, path: str) -> None:
    text = json.dumps(doc, sort_keys=True, indent=2)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text + "\n")


def write_bundle(doc: dict, path: str) -> None:
    _dump_json(doc, path)


def load_bundle(path: str) -> dict:
    """Read a bundle back and check its format tag and required keys."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"bundle not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"bundle is not valid JSON: {exc}") from exc
    if doc.get("format") != BUNDLE_FORMAT:
        raise DataError(f"{path}: not a result bundle")
    if doc.get("version") != BUNDLE_VERSION:
        raise DataError(f"{path}: unsupported bundle version {doc.get('version')}")
    for key in ("config", "normalization", "panel", "fits"):
        if key not in doc:
            raise DataError(f"{path}: bundle is missing '{key}'")
    return doc


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_fit_csvs(out_dir: str, fits: list[TauFit], ids: list[str]) -> list[str]:
    """SIC table, group memberships, and fitted-curve samples as flat CSVs."""
    written = []
    sic_rows = []
    group_rows = []
    curve_rows = []
    for fit in fits:
        for lam, k, s, status in fit.report.sic_table:
            sic_rows.append([fit.tau, float(lam), int(k), float(s), status])
        for i, ident in enumerate(ids):
            group_rows.append([fit.tau, ident, int(fit.report.groups.labels[i]),
                               float(fit.report.refit.intercepts[i])])
        if fit.bands is not None:
            for g, band in enumerate(fit.bands, start=1):
                for j in range(band.x.size):
                    curve_rows.append([
                        fit.tau, g, float(band.x[j]), float(band.estimate[j]),
                        float(band.se[j]), float(band.lower[j]), float(band.upper[j]),
                    ])
    path = os.path.join(out_dir, "sic_curve.csv")
    _write_csv(path, ["tau", "lambda", "k", "sic", "status"], sic_rows)
    written.append(path)
    path = os.path.join(out_dir, "groups.csv")
    _write_csv(path, ["tau", "id", "group", "intercept"], group_rows)
    written.append(path)
    if curve_rows:
        path = os.path.join(out_dir, "fitted_curves.csv")
        _write_csv(path, ["tau", "group", "x", "estimate", "se", "lower", "upper"],
                   curve_rows)
        written.append(path)
    return written


def write_study_report(out_dir: str, report: StudyReport) -> list[str]:
    """Study summary JSON plus per-replication metrics and coverage CSVs.

    Wall-clock timing is deliberately left out of the files so that repeated
    runs with the same seed produce identical bytes.
    """
    written = []
    doc = {
        "format": "quantfuse-study",
        "version": BUNDLE_VERSION,
        "experiment": report.experiment,
        "n": report.n,
        "T": report.T,
        "tau": report.tau,
        "seed": report.seed,
        "replications": report.replications,
        "failures": report.failures,
        "pct_correct_k": report.pct_correct_k,
        "pct_exact_partition": report.pct_exact_partition,
        "mse_oracle": report.mse_oracle,
        "mse_penalized": report.mse_penalized,
        "mse_raw": report.mse_raw,
        "k_histogram": report.k_histogram,
        "coverage_x": report.coverage_x,
        "coverage_est": report.coverage_est,
        "coverage_true": report.coverage_true,
        "mean_lambda": report.mean_lambda,
        "mean_outer_iters": report.mean_outer_iters,
    }
    path = os.path.join(out_dir, "study_report.json")
    _dump_json(_native(doc), path)
    written.append(path)

    rows = []
    for o in report.outcomes:
        rows.append([
            o.rep, int(o.failed), o.k_hat, int(o.k_correct), int(o.exact_partition),
            float(o.lam), float(o.mse_penalized), float(o.mse_oracle),
            float(o.mse_raw), o.n_outer, o.error,
        ])
    path = os.path.join(out_dir, "replications.csv")
    _write_csv(path, ["rep", "failed", "k_hat", "k_correct", "exact_partition",
                      "lambda", "mse_penalized", "mse_oracle", "mse_raw",
                      "outer_iters", "error"], rows)
    written.append(path)

    if report.coverage_x:
        cov_rows = []
        for j, xval in enumerate(report.coverage_x):
            est = report.coverage_est[j] if j < len(report.coverage_est) else float("nan")
            tru = report.coverage_true[j] if j < len(report.coverage_true) else float("nan")
            cov_rows.append([report.tau, float(xval), float(est), float(tru)])
        path = os.path.join(out_dir, "coverage.csv")
        _write_csv(path, ["tau", "x", "coverage_est", "coverage_true"], cov_rows)
        written.append(path)
    return written
