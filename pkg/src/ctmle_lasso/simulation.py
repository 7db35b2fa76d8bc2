"""Plasmode quasi-experiment: synthetic outcomes over a fixed covariate/treatment base.

Outcomes follow ``Y = 2 + W @ beta + A + eps`` with ``eps ~ N(0, 1)``, so the
true ATE is exactly 1. ``beta`` is non-zero only on the 40 covariates most
correlated (in absolute Pearson correlation) with treatment. Each replication
resamples ``(W, A)`` rows jointly with replacement from the base, so the
treatment mechanism of the base is preserved.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import Dataset
from .lasso import PS_BOUNDS
from .roster import estimate_roster, validate_roster

__all__ = [
    "TRUE_ATE",
    "DEFAULT_ROSTER",
    "DEFAULT_PAIRS",
    "SimulationAborted",
    "SimDesign",
    "SimReport",
    "synthetic_base",
    "build_design",
    "draw_replication",
    "run_suite",
    "pairwise_report",
]

log = logging.getLogger(__name__)

TRUE_ATE = 1.0
DEFAULT_ROSTER = (
    "unadj", "gcomp", "wr", "wr*", "hbc", "hbc*",
    "ipw", "ipw*", "hajek_ipw", "hajek_ipw*", "dr_ipw", "dr_ipw*",
    "tmle", "tmle*", "ctmle1", "ctmle0", "ctmle0*",
)
DEFAULT_PAIRS = (("tmle", "tmle*"), ("ctmle0", "ctmle0*"), ("tmle", "ctmle0"), ("ctmle1", "ctmle0"))


class SimulationAborted(RuntimeError):
    pass


def synthetic_base(n: int = 5000, p: int = 200, seed: int = 20170101):
    """Desk-scale stand-in for a claims-derived covariate/treatment base.

    Four fifths of the columns are binary indicators with prevalence 0.1 to
    0.5, the rest are sparse visit counts. Both kinds load on a few shared
    latent factors, so they are correlated in blocks. Treatment follows a
    logistic model with 80 weak main effects, two interactions and a squared
    count term: a main-term lasso is only mildly misspecified, and overlap
    stays good.

    Returns
    -------
    w : array of shape (n, p)
    a : array of shape (n,)
    names : tuple of str
    """
    rng = np.random.default_rng(seed)
    n_factor = 8
    z = rng.standard_normal((n, n_factor))
    n_cnt = p // 5
    n_bin = p - n_cnt

    def latent(k):
        load = rng.normal(0, 0.7, (n_factor, k)) * (rng.random((n_factor, k)) < 0.2)
        share = rng.uniform(0.1, 0.5, k)
        lat = z @ load + rng.standard_normal((n, k))
        thr = np.array([np.quantile(lat[:, j], 1 - share[j]) for j in range(k)])
        return lat > thr

    w_bin = latent(n_bin).astype(float)
    occur = latent(n_cnt)
    w_cnt = occur * (1 + rng.poisson(rng.uniform(0.3, 1.5, n_cnt), (n, n_cnt)))
    w = np.column_stack([w_bin, w_cnt]).astype(float)
    names = tuple([f"bin{j + 1:03d}" for j in range(n_bin)] + [f"cnt{j + 1:03d}" for j in range(n_cnt)])

    sd = w.std(axis=0)
    ws = (w - w.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    n_drv = min(80, p)
    drivers = rng.choice(p, size=n_drv, replace=False)
    gamma = np.zeros(p)
    gamma[drivers] = rng.choice([-1, 1], n_drv) * rng.uniform(0.1, 0.25, n_drv)
    eta = -0.4 + ws @ gamma
    if n_drv >= 4:
        eta += 0.3 * (ws[:, drivers[0]] * ws[:, drivers[1]] - ws[:, drivers[2]] * ws[:, drivers[3]])
    if n_cnt:
        c = n_bin + int(np.argmax(np.abs(gamma[n_bin:])))
        eta += 0.1 * np.clip(ws[:, c], -3, 3) ** 2
    a = (rng.random(n) < expit(eta)).astype(float)
    return w, a, names


@dataclass(frozen=True)
class SimDesign:
    base_w: np.ndarray = field(repr=False)
    base_a: np.ndarray = field(repr=False)
    column_names: tuple
    confounders: np.ndarray
    beta: np.ndarray = field(repr=False)
    q_subset_size: int = 10
    n_rep: int = 500
    n_per_rep: int = 1000
    seed: int = 0
    true_ate: float = TRUE_ATE

    @property
    def q_subset(self) -> np.ndarray:
        return self.confounders[: self.q_subset_size]

    def rep_seeds(self) -> list:
        ss = np.random.SeedSequence(self.seed)
        return [int(s.generate_state(1)[0]) for s in ss.spawn(self.n_rep)]


def _abs_corr(w, a):
    wc = w - w.mean(axis=0)
    ac = a - a.mean()
    sd = np.sqrt((wc**2).sum(axis=0) * (ac**2).sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (wc.T @ ac) / sd
    return np.nan_to_num(np.abs(r), nan=0.0)


def build_design(
    base_w,
    base_a,
    seed: int = 0,
    n_confounders: int = 40,
    q_subset_size: int = 10,
    n_rep: int = 500,
    n_per_rep: int = 1000,
    column_names=None,
) -> SimDesign:
    """Pick the confounders and freeze their outcome coefficients.

    The ``n_confounders`` columns with the largest absolute Pearson correlation
    with treatment are kept in descending order of that correlation (ties by
    column index); their coefficients are independent standard normals drawn
    once from ``seed``.
    """
    w = np.asarray(base_w, dtype=float)
    a = np.asarray(base_a, dtype=float)
    p = w.shape[1]
    if p < n_confounders:
        warnings.warn(f"only {p} covariates available; using all as confounders", stacklevel=2)
        n_confounders = p
    r = _abs_corr(w, a)
    order = np.lexsort((np.arange(p), -r))
    conf = order[:n_confounders]
    rng = np.random.default_rng(seed)
    beta = np.zeros(p)
    beta[conf] = rng.standard_normal(n_confounders)
    names = tuple(column_names) if column_names is not None else tuple(f"w{j + 1}" for j in range(p))
    return SimDesign(
        w, a, names, conf, beta, min(q_subset_size, n_confounders), n_rep, n_per_rep, seed
    )


def draw_replication(design: SimDesign, rep_seed: int, noise: bool = True) -> Dataset:
    rng = np.random.default_rng(rep_seed)
    rows = rng.integers(0, design.base_w.shape[0], design.n_per_rep)
    w = design.base_w[rows]
    a = design.base_a[rows]
    eps = rng.standard_normal(design.n_per_rep) if noise else np.zeros(design.n_per_rep)
    y = 2.0 + w @ design.beta + design.true_ate * a + eps
    return Dataset(y, a, w, design.column_names)


@dataclass
class SimReport:
    """Per-replication estimates and Table-2/Table-3 style summaries."""

    labels: list
    psi: np.ndarray
    se: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    lambdas: np.ndarray
    rep_ids: list
    failures: list
    true_ate: float = TRUE_ATE

    def column(self, label: str) -> int:
        if label not in self.labels:
            raise KeyError(f"unknown estimator label {label!r}")
        return self.labels.index(label)

    def metrics(self) -> dict:
        """Bias, SE (sd of estimates), MSE, coverage and mean CI length per estimator.

        Population (ddof=0) formulas over replications, so ``mse == bias**2 + se**2``.
        """
        out = {}
        for j, lab in enumerate(self.labels):
            est = self.psi[:, j]
            err = est - self.true_ate
            row = {
                "bias": float(err.mean()),
                "se": float(est.std()),
                "mse": float(np.mean(err**2)),
                "coverage": None,
                "ci_length": None,
            }
            if np.all(np.isfinite(self.ci_lo[:, j])):
                cov = (self.ci_lo[:, j] <= self.true_ate) & (self.true_ate <= self.ci_hi[:, j])
                row["coverage"] = float(cov.mean())
                row["ci_length"] = float(np.mean(self.ci_hi[:, j] - self.ci_lo[:, j]))
            out[lab] = row
        return out

    def to_dict(self) -> dict:
        return {
            "true_ate": self.true_ate,
            "n_success": len(self.rep_ids),
            "failures": self.failures,
            "metrics": self.metrics(),
            "estimates": {
                lab: {
                    "psi": self.psi[:, j].tolist(),
                    "se": _nan_list(self.se[:, j]),
                    "ci_lo": _nan_list(self.ci_lo[:, j]),
                    "ci_hi": _nan_list(self.ci_hi[:, j]),
                    "lambda_used": _nan_list(self.lambdas[:, j]),
                }
                for j, lab in enumerate(self.labels)
            },
            "rep_ids": self.rep_ids,
        }


def _nan_list(v):
    return [None if not np.isfinite(x) else float(x) for x in v]


@dataclass(frozen=True)
class _RepConfig:
    roster: tuple
    n_lambda: int
    lambda_min_ratio: float | None
    v: int
    noise: bool = True
    bounds: tuple = PS_BOUNDS


def _run_one(design: SimDesign, rep: int, seed: int, cfg: _RepConfig):
    try:
        data = draw_replication(design, seed, noise=cfg.noise)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = estimate_roster(
                data,
                cfg.roster,
                outcome_covariates=design.q_subset,
                n_lambda=cfg.n_lambda,
                lambda_min_ratio=cfg.lambda_min_ratio,
                v=cfg.v,
                seed=seed,
                bounds=cfg.bounds,
            )
    except Exception as exc:  # recorded per replication, aggregated below
        return rep, None, f"{type(exc).__name__}: {exc}"
    rows = [
        (e.psi, _nz(e.se), _nz(e.ci_lo), _nz(e.ci_hi), _nz(e.lambda_used)) for e in res.estimates
    ]
    return rep, rows, None


def _nz(x):
    return np.nan if x is None else float(x)


def _run_chunk(args):
    design, items, cfg = args
    return [_run_one(design, rep, seed, cfg) for rep, seed in items]


def run_suite(
    design: SimDesign,
    estimator_roster=DEFAULT_ROSTER,
    v: int = 10,
    n_lambda: int = 100,
    lambda_min_ratio: float | None = None,
    threads: int = 1,
    max_failure_rate: float = 0.01,
    noise: bool = True,
    bounds=PS_BOUNDS,
    progress=None,
) -> SimReport:
    """Run every estimator on ``design.n_rep`` replications.

    Replications are independent and seeded from ``design.seed``; results are
    assembled in replication order, so the report does not depend on
    ``threads``. Failed replications are logged and excluded; if the failure
    rate reaches ``max_failure_rate`` the run is aborted.
    """
    roster = tuple(validate_roster(estimator_roster))
    cfg = _RepConfig(roster, n_lambda, lambda_min_ratio, v, noise, tuple(bounds))
    items = list(enumerate(design.rep_seeds()))
    if threads <= 1:
        results = []
        for rep, seed in items:
            results.append(_run_one(design, rep, seed, cfg))
            if progress is not None:
                progress(rep + 1, len(items))
    else:
        chunks = [items[i::threads] for i in range(threads)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_run_chunk, [(design, c, cfg) for c in chunks]))
        results = sorted((r for part in parts for r in part), key=lambda r: r[0])

    ok = [r for r in results if r[1] is not None]
    failures = [{"rep": r[0], "error": r[2]} for r in results if r[1] is None]
    for f in failures:
        log.warning("replication %d failed: %s", f["rep"], f["error"])
    if len(failures) >= max(max_failure_rate * design.n_rep, 1e-12) and failures:
        raise SimulationAborted(
            f"{len(failures)} of {design.n_rep} replications failed (limit {max_failure_rate:.0%})"
        )
    arr = np.array([r[1] for r in ok], dtype=float).reshape(len(ok), len(roster), 5)
    return SimReport(
        labels=list(roster),
        psi=arr[:, :, 0],
        se=arr[:, :, 1],
        ci_lo=arr[:, :, 2],
        ci_hi=arr[:, :, 3],
        lambdas=arr[:, :, 4],
        rep_ids=[r[0] for r in ok],
        failures=failures,
        true_ate=design.true_ate,
    )


def pairwise_report(report: SimReport, pair) -> list:
    """Per-replication estimate pairs with CI-coverage flags, for scatter plots."""
    a, b = pair
    ia, ib = report.column(a), report.column(b)
    t = report.true_ate
    rows = []
    for r, rep in enumerate(report.rep_ids):
        rows.append({
            "rep": rep,
            f"psi_{a}": float(report.psi[r, ia]),
            f"psi_{b}": float(report.psi[r, ib]),
            f"covers_{a}": _covers(report.ci_lo[r, ia], report.ci_hi[r, ia], t),
            f"covers_{b}": _covers(report.ci_lo[r, ib], report.ci_hi[r, ib], t),
        })
    return rows


def _covers(lo, hi, t):
    if not (np.isfinite(lo) and np.isfinite(hi)):
        return None
    return bool(lo <= t <= hi)
