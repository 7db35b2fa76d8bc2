"""Command-line entry point: ``ctmle-lasso {estimate,hdps,simulate,path}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from .config import ConfigError, RunConfig, load_config
from .ctmle import ctmle1
from .data import DataError, Dataset, load_dataset, make_folds, scale_outcome
from .estimators import fit_outcome_mainterm
from .hdps import HdpsConfig, hdps_pipeline, load_claims
from .lasso import ConvergenceError, cv_deviance, lasso_logistic_path
from .roster import estimate_roster
from .simulation import (
    DEFAULT_PAIRS,
    DEFAULT_ROSTER,
    SimulationAborted,
    build_design,
    pairwise_report,
    run_suite,
    synthetic_base,
)
from .tmle import FluctuationError

log = logging.getLogger("ctmle_lasso")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class _StageError(Exception):
    def __init__(self, code: int, stage: str, msg: str):
        super().__init__(msg)
        self.code = code
        self.stage = stage


# ---------------------------------------------------------------- output helpers

def _write_json(path: Path, payload: dict, chash: str) -> None:
    body = {"config_hash": chash, **payload}
    path.write_text(json.dumps(body, indent=2, sort_keys=False, allow_nan=True) + "\n")


def _write_csv(path: Path, header: list, rows, chash: str, note: str | None = None) -> None:
    buf = io.StringIO()
    buf.write(f"# config_hash: {chash}\n")
    if note:
        buf.write(f"# {note}\n")
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for r in rows:
        wr.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue())


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _estimates_table(estimates) -> str:
    lines = [f"{'estimator':<12}{'psi':>12}{'se':>12}{'ci_lo':>12}{'ci_hi':>12}{'lambda':>14}"]
    for e in estimates:
        cells = [e.psi, e.se, e.ci_lo, e.ci_hi]
        txt = "".join(f"{'-':>12}" if c is None else f"{c:>12.5f}" for c in cells)
        lam = "-" if e.lambda_used is None else f"{e.lambda_used:.6g}"
        lines.append(f"{e.estimator:<12}{txt}{lam:>14}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- commands

def _load(cfg: RunConfig) -> tuple[Dataset, list | None]:
    if not cfg.data.path:
        raise _StageError(EXIT_CONFIG, "config", "data.path is required")
    drop = list(cfg.data.drop) + ([cfg.data.id_column] if cfg.data.id_column else [])
    try:
        data = load_dataset(cfg.data.path, cfg.data.outcome, cfg.data.treatment, drop_cols=drop)
    except FileNotFoundError as exc:
        raise _StageError(EXIT_DATA, "load", str(exc)) from None
    ids = None
    if cfg.data.id_column:
        ids = pd.read_csv(cfg.data.path, comment="#", dtype=str)[cfg.data.id_column].tolist()
    return data, ids


def _columns(data: Dataset, names, what):
    if names is None:
        return None
    idx = []
    for nm in names:
        if nm not in data.column_names:
            raise _StageError(EXIT_CONFIG, "config", f"{what}: unknown column {nm!r}")
        idx.append(data.column_names.index(nm))
    return idx


def cmd_estimate(cfg: RunConfig, out: Path, chash: str) -> None:
    data, _ = _load(cfg)
    res = estimate_roster(
        data,
        cfg.estimate.roster,
        outcome_covariates=_columns(data, cfg.estimate.outcome_covariates, "estimate.outcome_covariates"),
        ps_covariates=_columns(data, cfg.estimate.ps_covariates, "estimate.ps_covariates"),
        n_lambda=cfg.lasso.n_lambda,
        lambda_min_ratio=cfg.lasso.lambda_min_ratio,
        v=cfg.lasso.folds,
        seed=cfg.seed,
        bounds=tuple(cfg.ps_bounds),
    )
    _write_json(out / "estimates.json", {"estimates": [e.to_dict() for e in res.estimates]}, chash)
    if res.trace is not None:
        _write_json(out / "trace.json", {"trace": res.trace.to_dict()}, chash)
    (out / "estimates.txt").write_text(f"# config_hash: {chash}\n" + _estimates_table(res.estimates))
    sys.stdout.write(_estimates_table(res.estimates))


def cmd_hdps(cfg: RunConfig, out: Path, chash: str) -> None:
    if not cfg.hdps.claims:
        raise _StageError(EXIT_CONFIG, "config", "hdps.claims is required")
    if not cfg.data.id_column:
        raise _StageError(EXIT_CONFIG, "config", "data.id_column is required for hdps")
    data, ids = _load(cfg)
    try:
        claims = load_claims(cfg.hdps.claims, cfg.hdps.sources)
    except FileNotFoundError as exc:
        raise _StageError(EXIT_DATA, "load", str(exc)) from None
    res = hdps_pipeline(claims, data, ids, HdpsConfig(cfg.hdps.k1, cfg.hdps.k2))
    frame = pd.DataFrame(res.data.w, columns=list(res.data.column_names))
    frame.insert(0, cfg.data.treatment, res.data.a.astype(int))
    frame.insert(0, cfg.data.outcome, res.data.y)
    frame.insert(0, cfg.data.id_column, ids)
    body = frame.to_csv(index=False, float_format="%.17g", lineterminator="\n")
    (out / "augmented.csv").write_text(f"# config_hash: {chash}\n" + body)
    _write_json(out / "hdps_ranking.json", res.ranking_report(), chash)
    sys.stdout.write(f"appended {len(res.selected)} hdPS covariates from {res.n_candidates} candidates\n")


def _sim_base(cfg: RunConfig):
    s = cfg.simulate
    if s.base_path:
        try:
            df = pd.read_csv(s.base_path, comment="#", float_precision="round_trip")
        except FileNotFoundError as exc:
            raise _StageError(EXIT_DATA, "load", str(exc)) from None
        if cfg.data.treatment not in df.columns:
            raise _StageError(EXIT_DATA, "load", f"missing column {cfg.data.treatment!r} in simulation base")
        drop = [c for c in [cfg.data.treatment, cfg.data.id_column, *cfg.data.drop] if c]
        a = df[cfg.data.treatment].to_numpy(dtype=float)
        if not np.all(np.isin(a, (0, 1))):
            raise _StageError(EXIT_DATA, "load", "non-binary treatment in simulation base")
        wdf = df.drop(columns=[c for c in drop if c in df.columns])
        return wdf.to_numpy(dtype=float), a, tuple(wdf.columns)
    return synthetic_base(s.base_n, s.base_p, s.base_seed)


def cmd_simulate(cfg: RunConfig, out: Path, chash: str) -> None:
    s = cfg.simulate
    w, a, names = _sim_base(cfg)
    design = build_design(
        w, a, seed=cfg.seed, n_confounders=s.n_confounders, q_subset_size=s.q_subset_size,
        n_rep=s.n_rep, n_per_rep=s.n_per_rep, column_names=names,
    )
    roster = tuple(s.roster) if s.roster is not None else DEFAULT_ROSTER

    def progress(i, total):
        if i % 10 == 0 or i == total:
            log.info("replication %d/%d", i, total)

    try:
        report = run_suite(
            design, roster, v=cfg.lasso.folds, n_lambda=cfg.lasso.n_lambda,
            lambda_min_ratio=cfg.lasso.lambda_min_ratio, threads=cfg.threads,
            max_failure_rate=s.max_failure_rate, bounds=tuple(cfg.ps_bounds), progress=progress,
        )
    except SimulationAborted as exc:
        raise _StageError(EXIT_NUMERIC, "simulate", str(exc)) from None
    m = report.metrics()
    _write_csv(
        out / "table2.csv",
        ["estimator", "bias", "se", "mse"],
        [[lab, 100 * r["bias"], 100 * r["se"], 100 * r["mse"]] for lab, r in m.items()],
        chash,
        note="all values on a scale of 10^-2",
    )
    _write_csv(
        out / "table3.csv",
        ["estimator", "coverage", "ci_length"],
        [[lab, r["coverage"], r["ci_length"]] for lab, r in m.items() if r["coverage"] is not None],
        chash,
        note=f"nominal 95% intervals; true ATE {report.true_ate}",
    )
    pdir = out / "pairwise"
    pdir.mkdir(exist_ok=True)
    for pair in DEFAULT_PAIRS:
        if pair[0] in report.labels and pair[1] in report.labels:
            rows = pairwise_report(report, pair)
            header = list(rows[0].keys()) if rows else ["rep"]
            _write_csv(pdir / f"{pair[0]}_vs_{pair[1]}.csv".replace("*", "star"), header,
                       [list(r.values()) for r in rows], chash)
    _write_json(out / "report.json", report.to_dict(), chash)
    sys.stdout.write(f"{len(report.rep_ids)} replications, {len(report.failures)} failed\n")


def cmd_path(cfg: RunConfig, out: Path, chash: str) -> None:
    data, _ = _load(cfg)
    ps_cols = _columns(data, cfg.estimate.ps_covariates, "estimate.ps_covariates")
    x = data.w if ps_cols is None else data.w[:, ps_cols]
    path = lasso_logistic_path(x, data.a, k=cfg.lasso.n_lambda, lambda_min_ratio=cfg.lasso.lambda_min_ratio)
    folds = make_folds(data.n, cfg.lasso.folds, cfg.seed, data.a)
    cv = cv_deviance(x, data.a, folds, lambdas=path.lambdas)
    lam_ct = None
    if cfg.path.run_ctmle:
        y_s, scale = scale_outcome(data.y)
        ds = data.with_outcome(y_s)
        q = fit_outcome_mainterm(ds, _columns(data, cfg.estimate.outcome_covariates, "estimate.outcome_covariates"))
        _, trace = ctmle1(ds, path, q, folds, scale, cv=cv, x=x, bounds=tuple(cfg.ps_bounds))
        lam_ct = trace.final_lambda
    elif cfg.path.trace:
        try:
            raw = json.loads(Path(cfg.path.trace).read_text())
        except (OSError, ValueError) as exc:
            raise _StageError(EXIT_DATA, "load", f"cannot read trace {cfg.path.trace}: {exc}") from None
        lam_ct = float(raw.get("trace", raw)["final_lambda"])
    i_ct = None
    if lam_ct is not None:
        i_ct = int(np.argmin(np.abs(np.log(path.lambdas) - np.log(lam_ct))))
        if not np.isclose(path.lambdas[i_ct], lam_ct, rtol=1e-9, atol=0):
            warnings.warn("trace penalty is not on this grid; flagging the nearest grid point", stacklevel=2)
    rows = []
    for i in range(path.k):
        flags = []
        if i == cv.index_cv:
            flags.append("lambda_cv")
        if i == i_ct:
            flags.append("lambda_ctmle")
        rows.append([
            float(path.lambdas[i]), int(path.n_active[i]), float(path.deviance[i]),
            float(cv.deviance[i]), float(cv.se[i]), ";".join(flags),
        ])
    _write_csv(out / "path.csv", ["lambda", "n_active", "deviance", "cv_deviance", "cv_se", "flags"], rows, chash)
    sys.stdout.write(f"lambda_cv = {cv.lambda_cv:.6g}" + ("" if lam_ct is None else f", lambda_ctmle = {lam_ct:.6g}") + "\n")


_COMMANDS = {"estimate": cmd_estimate, "hdps": cmd_hdps, "simulate": cmd_simulate, "path": cmd_path}


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctmle-lasso", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--data", help="input CSV (data.path)")
        p.add_argument("--outcome", help="outcome column")
        p.add_argument("--treatment", help="treatment column")
        p.add_argument("--id-column")
        p.add_argument("--n-lambda", type=int)
        p.add_argument("--lambda-min-ratio", type=float)
        p.add_argument("--folds", type=int)
        p.add_argument("--ps-bounds", type=float, nargs=2, metavar=("LO", "HI"))
        if name == "estimate":
            p.add_argument("--roster", help="comma-separated estimator names")
        if name == "hdps":
            p.add_argument("--claims")
            p.add_argument("--k1", type=int)
            p.add_argument("--k2", type=int)
        if name == "simulate":
            p.add_argument("--n-rep", type=int)
            p.add_argument("--n-per-rep", type=int)
            p.add_argument("--base", help="simulation base CSV (treatment + covariates)")
            p.add_argument("--roster", help="comma-separated estimator names")
        if name == "path":
            p.add_argument("--trace", help="trace.json from an estimate run")
            p.add_argument("--ctmle", action="store_true", help="run ctmle1 to flag its penalty")
    return parser


def _apply_overrides(cfg: RunConfig, ns) -> RunConfig:
    cfg.command = ns.command
    simple = {
        "out": ("out", None), "seed": ("seed", None), "threads": ("threads", None),
        "data": ("path", cfg.data), "outcome": ("outcome", cfg.data), "treatment": ("treatment", cfg.data),
        "id_column": ("id_column", cfg.data), "n_lambda": ("n_lambda", cfg.lasso),
        "lambda_min_ratio": ("lambda_min_ratio", cfg.lasso), "folds": ("folds", cfg.lasso),
        "claims": ("claims", cfg.hdps), "k1": ("k1", cfg.hdps), "k2": ("k2", cfg.hdps),
        "n_rep": ("n_rep", cfg.simulate), "n_per_rep": ("n_per_rep", cfg.simulate),
        "base": ("base_path", cfg.simulate), "trace": ("trace", cfg.path),
    }
    for arg, (attr, target) in simple.items():
        val = getattr(ns, arg, None)
        if val is not None:
            setattr(target if target is not None else cfg, attr, val)
    if ns.ps_bounds is not None:
        cfg.ps_bounds = list(ns.ps_bounds)
    if getattr(ns, "roster", None):
        names = [r.strip() for r in ns.roster.split(",") if r.strip()]
        if ns.command == "simulate":
            cfg.simulate.roster = names
        else:
            cfg.estimate.roster = names
    if getattr(ns, "ctmle", False):
        cfg.path.run_ctmle = True
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    ns = build_parser().parse_args(argv)
    try:
        cfg = load_config(ns.config) if ns.config else RunConfig()
        cfg = _apply_overrides(cfg, ns).validate()
    except ConfigError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.out)
    chash = cfg.config_hash()
    try:
        out.mkdir(parents=True, exist_ok=True)
        _COMMANDS[cfg.command](cfg, out, chash)
    except _StageError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error [data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConvergenceError, FluctuationError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"error [{cfg.command}]: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # fold construction and similar input checks raise plain ValueError
        print(f"error [data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
