"""Run a roster of ATE estimators on one dataset.

Unstarred propensity-based estimators use the penalty chosen by cross-validated
deviance; starred ones (``ipw*``, ``tmle*``, ...) reuse the final penalty
exported by ``ctmle1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ctmle import CtmleTrace, ctmle0, ctmle1, neighbor_ps
from .data import Dataset, make_folds, scale_outcome
from .estimators import (
    AteEstimate,
    dr_ipw,
    fit_outcome_mainterm,
    gcomp,
    hajek_ipw,
    hbc,
    ipw,
    unadjusted,
    weighted_regression,
)
from .lasso import PS_BOUNDS, CvCurve, LassoPath, cv_deviance, lasso_logistic_path, predict_ps
from .tmle import tmle

__all__ = ["ESTIMATORS", "RosterResult", "validate_roster", "estimate_roster"]

_BASE = ("unadj", "gcomp", "ipw", "hajek_ipw", "wr", "hbc", "dr_ipw", "tmle", "ctmle1", "ctmle0")
_STARRABLE = ("ipw", "hajek_ipw", "wr", "hbc", "dr_ipw", "tmle", "ctmle0")
ESTIMATORS = _BASE + tuple(f"{e}*" for e in _STARRABLE)

_NEEDS_Q = {"gcomp", "hbc", "dr_ipw", "tmle", "ctmle1", "ctmle0"}


@dataclass
class RosterResult:
    estimates: list
    trace: CtmleTrace | None
    path: LassoPath | None
    cv: CvCurve | None


def validate_roster(roster) -> list:
    roster = list(roster)
    unknown = [r for r in roster if r not in ESTIMATORS]
    if unknown:
        raise ValueError(f"unknown estimator {unknown[0]!r}; choose from {', '.join(ESTIMATORS)}")
    if len(set(roster)) != len(roster):
        raise ValueError("duplicate estimator in roster")
    return roster


def estimate_roster(
    data: Dataset,
    roster,
    outcome_covariates=None,
    ps_covariates=None,
    n_lambda: int = 100,
    lambda_min_ratio: float | None = None,
    v: int = 10,
    seed: int = 0,
    bounds=PS_BOUNDS,
) -> RosterResult:
    """Estimate the ATE with every estimator in ``roster``.

    Parameters
    ----------
    data : Dataset
        Outcome on its original scale; it is unit-scaled internally.
    roster : sequence of str
        Names from :data:`ESTIMATORS`.
    outcome_covariates, ps_covariates : sequence of int, optional
        Column indices used by the outcome regression and the lasso path;
        ``None`` means all columns.
    """
    roster = validate_roster(roster)
    y_s, scale = scale_outcome(data.y)
    ds = data.with_outcome(y_s)
    base = {r.rstrip("*") for r in roster}
    starred = any(r.endswith("*") for r in roster)

    q = fit_outcome_mainterm(ds, outcome_covariates) if base & _NEEDS_Q else None
    path = cv = g_cv = None
    x = ds.w if ps_covariates is None else ds.w[:, np.asarray(ps_covariates, dtype=int)]
    if base - {"unadj", "gcomp"}:
        path = lasso_logistic_path(x, ds.a, k=n_lambda, lambda_min_ratio=lambda_min_ratio)
        folds = make_folds(ds.n, v, seed, ds.a)
        cv = cv_deviance(x, ds.a, folds, lambdas=path.lambdas)
        g_cv = predict_ps(path, cv.lambda_cv, x, bounds)

    trace = None
    ct_est = None
    g_star = None
    if "ctmle1" in roster or starred:
        ct_est, trace = ctmle1(ds, path, q, folds, scale, cv=cv, x=x, bounds=bounds)
        g_star = predict_ps(path, trace.final_lambda, x, bounds)

    out = []
    for name in roster:
        star = name.endswith("*")
        key = name.rstrip("*")
        g = g_star if star else g_cv
        if key == "unadj":
            est = unadjusted(ds, scale)
        elif key == "gcomp":
            est = gcomp(q, scale)
        elif key == "ipw":
            est = ipw(ds, g, scale)
        elif key == "hajek_ipw":
            est = hajek_ipw(ds, g, scale)
        elif key == "wr":
            est, _ = weighted_regression(ds, g, outcome_covariates, scale)
        elif key == "hbc":
            est = hbc(ds, g, q, scale)
        elif key == "dr_ipw":
            est = dr_ipw(ds, g, q, scale)
        elif key == "tmle":
            est = tmle(ds, g, q, scale)
        elif key == "ctmle1":
            est = ct_est
        elif key == "ctmle0":
            est = ctmle0(ds, g, neighbor_ps(path, g.lam, x, bounds), q, scale)
        out.append(_relabel(est, name))
    return RosterResult(out, trace, path, cv)


def _relabel(est: AteEstimate, name: str) -> AteEstimate:
    return AteEstimate(est.psi, est.se, est.ci_lo, est.ci_hi, name, est.lambda_used)
