"""Command line front end: simulation sweeps, CSV estimation, and gamma CV.

Outputs are tidy CSVs with fixed headers plus a key=value metadata sidecar
echoing the seed and full configuration. Exit codes: 0 success, 2 usage or
configuration error, 3 I/O error, 4 solver non-convergence on ``estimate``.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from typing import Optional, Sequence

import numpy as np

from .data import BasisSpec, BasisTerm, Dataset, build_basis, validate
from .errors import DrCalibError, MissingColumn
from .estimators import parse_roster, run_roster
from .gamma import gamma_cv_profile
from .propensity import fit_logistic_mle
from .simulate import ScenarioSpec, run_monte_carlo

DEFAULT_ROSTER = "CC,GLM,HM,Tan,APS,APSg0.5"


class ConfigError(Exception):
    pass


def _fmt(x) -> str:
    """Shortest round-trip decimal for floats; empty for missing."""
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        if np.isnan(x):
            return "nan"
        return repr(float(x))
    return str(x)


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"cannot parse float list {text!r}: {exc}") from None


def _load_config_file(path: str) -> dict[str, str]:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"config line without '=': {line!r}")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _merge_config(args: argparse.Namespace, defaults: dict) -> argparse.Namespace:
    """Fill None-valued options from the config file, then hard defaults; flags win."""
    cfg = _load_config_file(args.config) if getattr(args, "config", None) else {}
    for key, value in cfg.items():
        if getattr(args, key, None) is None and hasattr(args, key):
            setattr(args, key, value)
    for key, value in defaults.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    return args


def _write_csv(path: str, header: list[str], rows: list[list], created: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    created.append(path)


def _write_metadata(path: str, pairs: dict, created: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in pairs.items():
            fh.write(f"{key}={_fmt(value)}\n")
    created.append(path)


def _read_table(path: str, outcome_col: str, covariate_cols: Optional[list[str]]):
    """Parse the input CSV: empty or literal NA in the outcome column means missing."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ConfigError(f"{path}: empty file, header row required")
        header = list(reader.fieldnames)
        if outcome_col not in header:
            raise ConfigError(f"{path}: outcome column {outcome_col!r} not in header")
        if covariate_cols is None:
            covariate_cols = [c for c in header if c != outcome_col]
        for col in covariate_cols:
            if col not in header:
                raise ConfigError(f"{path}: covariate column {col!r} not in header")
        xs, deltas, ys = [], [], []
        for i, record in enumerate(reader):
            row = []
            for col in covariate_cols:
                cell = (record.get(col) or "").strip()
                try:
                    row.append(float(cell))
                except ValueError:
                    raise ConfigError(
                        f"{path}: row {i + 2} column {col!r}: cannot parse {cell!r}"
                    ) from None
            xs.append(row)
            cell = (record.get(outcome_col) or "").strip()
            if cell == "" or cell == "NA":
                deltas.append(0)
                ys.append(np.nan)
            else:
                try:
                    ys.append(float(cell))
                except ValueError:
                    raise ConfigError(
                        f"{path}: row {i + 2} column {outcome_col!r}: cannot parse {cell!r}"
                    ) from None
                deltas.append(1)
    if not xs:
        raise ConfigError(f"{path}: no data rows")
    return np.array(xs, dtype=float), np.array(deltas), np.array(ys), covariate_cols


def _basis_from_tokens(tokens: Optional[str], covariate_cols: list[str]) -> BasisSpec:
    """Column-name tokens become raw terms; anything else must be a registered transform."""
    if not tokens:
        return BasisSpec.default(len(covariate_cols))
    terms = [BasisTerm("intercept")]
    for tok in tokens.split(","):
        tok = tok.strip()
        if not tok or tok == "1":
            continue
        if tok in covariate_cols:
            terms.append(BasisTerm("raw", covariate_cols.index(tok)))
        else:
            terms.append(BasisTerm("transform", name=tok))
    return BasisSpec(tuple(terms))


def _design_from_cols(dataset: Dataset, cols: Optional[str], covariate_cols: list[str]) -> np.ndarray:
    if not cols:
        return np.column_stack([np.ones(dataset.n), dataset.covariates])
    idx = []
    for tok in cols.split(","):
        tok = tok.strip()
        if tok not in covariate_cols:
            raise ConfigError(f"propensity column {tok!r} not among covariates")
        idx.append(covariate_cols.index(tok))
    return np.column_stack([np.ones(dataset.n), dataset.covariates[:, idx]])


def cmd_simulate(args: argparse.Namespace, created: list[str]) -> int:
    roster = [t.strip() for t in args.roster.split(",") if t.strip()]
    for kind, gamma in parse_roster(roster):  # fail fast on unknown tags
        if kind == "APSg" and gamma is None:
            raise ConfigError("simulate needs a fixed gamma in APSg tags, e.g. APSg0.5")
    contamination = None
    if args.contamination:
        vals = _parse_floats(args.contamination)
        if len(vals) != 3:
            raise ConfigError("contamination must be fraction,lo,hi")
        contamination = (vals[0], vals[1], vals[2])
    try:
        scenario = ScenarioSpec(
            outcome_model=args.om,
            response_model=args.pm,
            n=int(args.n),
            contamination=contamination,
            seed=int(args.seed),
            target_rate=float(args.target_rate),
        )
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from None
    summary = run_monte_carlo(
        scenario, roster, reps=int(args.reps), threads=int(args.threads)
    )
    os.makedirs(args.out, exist_ok=True)
    rep_rows = []
    for r in range(summary.estimates.shape[0]):
        for j, tag in enumerate(summary.roster):
            est = summary.estimates[r, j]
            ok = bool(summary.converged[r, j])
            rep_rows.append([r, tag, est if ok else "", ok])
    _write_csv(
        os.path.join(args.out, "replications.csv"),
        ["rep", "estimator", "estimate", "converged"],
        rep_rows,
        created,
    )
    sum_rows = [
        [s.estimator, s.bias, s.variance, s.rmse, s.n_converged, summary.truth]
        for s in summary.per_estimator
    ]
    _write_csv(
        os.path.join(args.out, "summary.csv"),
        ["estimator", "bias", "variance", "rmse", "n_converged", "truth"],
        sum_rows,
        created,
    )
    _write_metadata(
        os.path.join(args.out, "metadata.txt"),
        {
            "command": "simulate",
            "outcome_model": scenario.outcome_model,
            "response_model": scenario.response_model,
            "n": scenario.n,
            "reps": int(args.reps),
            "seed": scenario.seed,
            "contamination": args.contamination or "",
            "target_rate": scenario.target_rate,
            "roster": ",".join(roster),
            "threads": int(args.threads),
            "truth": summary.truth,
        },
        created,
    )
    return 0


def cmd_estimate(args: argparse.Namespace, created: list[str]) -> int:
    covariates = [c.strip() for c in args.covariates.split(",")] if args.covariates else None
    x, delta, y, cov_cols = _read_table(args.input, args.outcome, covariates)
    dataset = Dataset(x, delta, y)
    try:
        validate(dataset)
    except DrCalibError as exc:
        raise ConfigError(str(exc)) from None
    try:
        basis_spec = _basis_from_tokens(args.basis, cov_cols)
        basis = build_basis(dataset, basis_spec)
    except KeyError as exc:
        raise ConfigError(str(exc)) from None
    design = _design_from_cols(dataset, args.ps_columns, cov_cols)
    roster = [t.strip() for t in args.roster.split(",") if t.strip()]
    cv_grid = _parse_floats(args.cv_grid) if args.cv_grid else None
    reports = run_roster(
        dataset,
        basis,
        roster,
        design=design,
        cv_grid=cv_grid,
        cv_folds=int(args.folds),
        cv_seed=int(args.seed),
    )
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for rep in reports:
        diag = ""
        if rep.diagnostics is not None and hasattr(rep.diagnostics, "converged"):
            diag = f"converged={getattr(rep.diagnostics, 'converged')}"
        rows.append(
            [
                rep.estimator,
                rep.theta,
                rep.variance,
                rep.ci95[0] if rep.ci95 else None,
                rep.ci95[1] if rep.ci95 else None,
                rep.gamma,
                diag,
            ]
        )
    _write_csv(
        os.path.join(args.out, "estimates.csv"),
        ["estimator", "estimate", "variance", "ci_lo", "ci_hi", "gamma_used", "diagnostics"],
        rows,
        created,
    )
    _write_metadata(
        os.path.join(args.out, "metadata.txt"),
        {
            "command": "estimate",
            "input": args.input,
            "outcome": args.outcome,
            "covariates": ",".join(cov_cols),
            "basis": args.basis or "",
            "ps_columns": args.ps_columns or "",
            "roster": ",".join(roster),
            "cv_grid": args.cv_grid or "",
            "folds": int(args.folds),
            "seed": int(args.seed),
        },
        created,
    )
    return 0


def cmd_cv_gamma(args: argparse.Namespace, created: list[str]) -> int:
    covariates = [c.strip() for c in args.covariates.split(",")] if args.covariates else None
    x, delta, y, cov_cols = _read_table(args.input, args.outcome, covariates)
    dataset = Dataset(x, delta, y)
    try:
        validate(dataset)
    except DrCalibError as exc:
        raise ConfigError(str(exc)) from None
    basis = build_basis(dataset, _basis_from_tokens(args.basis, cov_cols))
    design = _design_from_cols(dataset, args.ps_columns, cov_cols)
    grid = _parse_floats(args.grid)
    if not grid or any(g < 0 for g in grid):
        raise ConfigError("gamma grid must be nonempty and nonnegative")
    if int(args.folds) < 2:
        raise ConfigError("folds must be at least 2")
    fit = fit_logistic_mle(dataset, design)
    profile = gamma_cv_profile(
        basis, dataset.outcome, dataset.delta, fit.dhat(), grid, int(args.folds), int(args.seed)
    )
    finite = [(g, m) for g, m, _ in profile if np.isfinite(m)]
    selected = min(sorted(finite), key=lambda t: t[1])[0]
    os.makedirs(args.out, exist_ok=True)
    _write_csv(
        os.path.join(args.out, "mspe.csv"),
        ["gamma", "mspe", "folds_used"],
        [[g, m, u] for g, m, u in profile],
        created,
    )
    _write_metadata(
        os.path.join(args.out, "metadata.txt"),
        {
            "command": "cv-gamma",
            "input": args.input,
            "outcome": args.outcome,
            "grid": args.grid,
            "folds": int(args.folds),
            "seed": int(args.seed),
            "selected_gamma": selected,
        },
        created,
    )
    print(f"selected_gamma={_fmt(selected)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drcalib",
        description="Calibrated doubly robust and outlier-robust mean estimation under nonresponse",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="Monte Carlo sweep over a synthetic scenario")
    sim.add_argument("--config", help="key=value config file; flags take precedence")
    sim.add_argument("--om", help="outcome model: OM1 or OM2")
    sim.add_argument("--pm", help="response model: PM1, PM2, PM3, or PM4")
    sim.add_argument("--n", help="sample size per replication")
    sim.add_argument("--reps", help="number of replications")
    sim.add_argument("--seed", help="base seed")
    sim.add_argument("--contamination", help="fraction,lo,hi additive noise on observed outcomes")
    sim.add_argument("--target-rate", dest="target_rate", help="expected response rate")
    sim.add_argument("--roster", help="comma list of estimators, e.g. CC,GLM,APS,APSg0.5")
    sim.add_argument("--threads", help="worker processes for replications")
    sim.add_argument("--out", help="output directory")

    est = sub.add_parser("estimate", help="estimate the mean of a CSV outcome column")
    cvg = sub.add_parser("cv-gamma", help="K-fold MSPE profile over a gamma grid")
    for p in (est, cvg):
        p.add_argument("--config", help="key=value config file; flags take precedence")
        p.add_argument("--input", help="input CSV (UTF-8, header row)")
        p.add_argument("--outcome", help="outcome column; empty or NA cells are missing")
        p.add_argument("--covariates", help="comma list of covariate columns (default: all others)")
        p.add_argument("--basis", help="basis tokens: column names and registered transform names")
        p.add_argument("--ps-columns", dest="ps_columns", help="columns for the propensity design")
        p.add_argument("--folds", help="number of CV folds")
        p.add_argument("--seed", help="seed for fold assignment")
        p.add_argument("--out", help="output directory")
    est.add_argument("--roster", help="comma list of estimators; APSg without a number uses CV")
    est.add_argument("--cv-grid", dest="cv_grid", help="gamma grid for APSg CV")
    cvg.add_argument("--grid", help="comma list of gamma values")
    return parser


_DEFAULTS = {
    "simulate": {
        "om": "OM1", "pm": "PM1", "n": "1000", "reps": "500", "seed": "1",
        "contamination": "", "target_rate": "0.6", "roster": DEFAULT_ROSTER,
        "threads": "1", "out": "simout",
    },
    "estimate": {
        "outcome": "y", "covariates": "", "basis": "", "ps_columns": "",
        "roster": "CC,GLM,HM,Tan,APS,APSg", "cv_grid": "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0",
        "folds": "5", "seed": "1", "out": "estout",
    },
    "cv-gamma": {
        "outcome": "y", "covariates": "", "basis": "", "ps_columns": "",
        "grid": "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0",
        "folds": "5", "seed": "1", "out": "cvout",
    },
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    created: list[str] = []
    try:
        args = _merge_config(args, _DEFAULTS[args.command])
        if args.command == "simulate":
            return cmd_simulate(args, created)
        if args.command == "estimate":
            if not args.input:
                raise ConfigError("--input is required")
            return cmd_estimate(args, created)
        if not args.input:
            raise ConfigError("--input is required")
        return cmd_cv_gamma(args, created)
    except (ConfigError, MissingColumn, ValueError) as exc:
        for path in created:
            if os.path.exists(path):
                os.unlink(path)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        for path in created:
            if os.path.exists(path):
                os.unlink(path)
        print(f"io error: {exc}", file=sys.stderr)
        return 3
    except DrCalibError as exc:
        for path in created:
            if os.path.exists(path):
                os.unlink(path)
        print(f"solver error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
