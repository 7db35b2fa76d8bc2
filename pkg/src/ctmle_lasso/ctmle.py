"""Collaborative selection of the lasso penalty for the propensity score.

``ctmle1`` builds a stagewise sequence of targeted fits along the penalty grid
below ``lambda_cv``, picks a candidate by cross-validated loss and finishes with
one more targeting pass. ``ctmle0`` keeps the cross-validated propensity score
and adds a second clever covariate, the penalty-derivative of ``H_g``, to the
fluctuation.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .data import Dataset, FoldAssignment, OutcomeScale
from .estimators import AteEstimate, OutcomeFit, clever_covariate
from .lasso import PS_BOUNDS, CvCurve, LassoPath, PropensityFit, cv_deviance, predict_ps
from .tmle import CleverCovariate, _as_offset, eic_se, fluctuate, fluctuate_many, tmle_fit

__all__ = [
    "CtmleTrace",
    "ctmle1",
    "ctmle0",
    "derivative_covariate",
    "neighbor_ps",
    "critical_residual",
]


@dataclass(frozen=True)
class CtmleTrace:
    candidate_lambdas: list
    candidate_losses: list
    candidate_stages: list
    cv_losses: list
    lambda_cv: float
    lambda_selected: float
    n_stages: int
    stage_lambdas: list
    stage_losses: list
    final_lambda: float
    final_losses: list = field(default_factory=list)
    critical_residual: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _Stagewise:
    winners: list          # candidate index chosen at each stage
    winner_eps: list
    stage_losses: list
    cand_stage: np.ndarray  # stage whose initial fit each candidate targets
    cand_eps: np.ndarray
    cand_loss: np.ndarray


def _stagewise(offset0, hmat, y) -> _Stagewise:
    """Stage loop over candidates ordered by decreasing penalty.

    At each stage every remaining candidate is targeted from the current
    initial fit and the empirical-loss minimiser becomes the next initial fit.
    Candidates between the previous and current stage winners (inclusive) are
    recorded with the current stage's initial fit; earlier records win.
    """
    m = hmat.shape[0]
    cand_stage = np.full(m, -1, dtype=np.int64)
    cand_eps = np.zeros(m)
    cand_loss = np.zeros(m)
    winners, winner_eps, stage_losses = [], [], []
    offset = np.asarray(offset0, dtype=float)
    start = 0
    prev = 0
    stage = 0
    while start < m:
        remaining = np.arange(start, m)
        eps, loss = fluctuate_many(offset, hmat[remaining], y)
        w = int(np.argmin(loss))
        jw = int(remaining[w])
        for j in range(prev, jw + 1):
            if cand_stage[j] < 0:
                cand_stage[j] = stage
                cand_eps[j] = eps[j - start]
                cand_loss[j] = loss[j - start]
        winners.append(jw)
        winner_eps.append(float(eps[w]))
        stage_losses.append(float(loss[w]))
        offset = offset + eps[w] * hmat[jw]
        prev = jw
        start = jw + 1
        stage += 1
    return _Stagewise(winners, winner_eps, stage_losses, cand_stage, cand_eps, cand_loss)


def _stage_offsets(offset0, hmat, sw: _Stagewise):
    """Offsets of the initial fit entering each stage (index = stage)."""
    out = [np.asarray(offset0, dtype=float)]
    for jw, e in zip(sw.winners, sw.winner_eps):
        out.append(out[-1] + e * hmat[jw])
    return out


def _nll(y, eta):
    return np.logaddexp(0.0, eta) - y * eta


def _ps_matrix(path: LassoPath, idx, x, bounds):
    eta = path.intercepts[idx, None] + path.coefs[idx] @ np.asarray(x, dtype=float).T
    return np.clip(expit(eta), bounds[0], bounds[1])


def _clever_h(a, g):
    return a / g - (1 - a) / (1 - g)


def _advance(q: OutcomeFit, a, gs, eps_list) -> OutcomeFit:
    """Apply a chain of already-fitted fluctuations to ``q``."""
    if not len(gs):
        return q
    l0, l1, la = (_as_offset(v) for v in (q.q0, q.q1, q.qa))
    for g, e in zip(gs, eps_list):
        h, h1, h0 = clever_covariate(a, g)
        l0, l1, la = l0 + e * h0, l1 + e * h1, la + e * h
    return OutcomeFit(expit(l0), expit(l1), expit(la), q.learner_label)


def ctmle1(
    data: Dataset,
    path: LassoPath,
    q_init: OutcomeFit,
    folds: FoldAssignment,
    scale: OutcomeScale,
    cv: CvCurve | None = None,
    x=None,
    bounds=PS_BOUNDS,
    name: str = "ctmle1",
) -> tuple[AteEstimate, CtmleTrace]:
    """Collaborative TMLE with penalty chosen by cross-validated targeted loss.

    Parameters
    ----------
    data : Dataset
        Outcome already unit-scaled.
    path : LassoPath
        Full-data propensity path; candidates are the grid points at or below
        ``lambda_cv``.
    q_init : OutcomeFit
        Initial outcome fit, held fixed across folds.
    folds : FoldAssignment
    scale : OutcomeScale
    cv : CvCurve, optional
        Cross-validated deviance curve on ``path.lambdas``; computed if absent.
        Its fold paths are reused for the collaborative cross-validation.
    x : array, optional
        Propensity covariates, default ``data.w``.
    """
    x = data.w if x is None else np.asarray(x, dtype=float)
    a, y = data.a, data.y
    if cv is None or len(cv.fold_paths) != folds.v:
        cv = cv_deviance(x, a, folds, lambdas=path.lambdas)
    i_cv = path.index_at_or_above(cv.lambda_cv)
    idx = np.arange(i_cv, path.k)
    lams = path.lambdas[idx]
    m = idx.size
    if m == 1:
        warnings.warn("lambda_cv is the smallest grid penalty; single-candidate collaborative run", stacklevel=2)

    gmat = _ps_matrix(path, idx, x, bounds)
    hmat = _clever_h(a, gmat)
    off0 = _as_offset(q_init.qa)
    sw = _stagewise(off0, hmat, y)

    # cross-validated loss of each candidate, fold stage schedules refit on training rows
    cv_loss = np.zeros(m)
    for v, (train, test) in enumerate(folds):
        g_v = _ps_matrix(cv.fold_paths[v], idx, x, bounds)
        h_v = _clever_h(a, g_v)
        sw_v = _stagewise(off0[train], h_v[:, train], y[train])
        offs = _stage_offsets(off0[test], h_v[:, test], sw_v)
        for j in range(m):
            eta = offs[sw_v.cand_stage[j]] + sw_v.cand_eps[j] * h_v[j, test]
            cv_loss[j] += _nll(y[test], eta).sum()
    cv_loss /= data.n
    j_sel = int(np.argmin(cv_loss))

    # initial fit paired with the selected candidate, then the final pass below it
    s = int(sw.cand_stage[j_sel])
    q_sel = _advance(q_init, a, [gmat[j] for j in sw.winners[:s]], sw.winner_eps[:s])
    final_losses = []
    j_final = j_sel
    if j_sel + 1 < m:
        _, fl = fluctuate_many(_as_offset(q_sel.qa), hmat[j_sel + 1:], y)
        final_losses = fl.tolist()
        j_final = j_sel + 1 + int(np.argmin(fl))
    g_final = predict_ps(path, float(lams[j_final]), x, bounds)
    est, q_star, _ = tmle_fit(data, g_final, q_sel, scale, name)

    g_up = neighbor_ps(path, g_final.lam, x, bounds)
    crit = critical_residual(data, q_star, (g_final, g_up))
    trace = CtmleTrace(
        candidate_lambdas=lams.tolist(),
        candidate_losses=sw.cand_loss.tolist(),
        candidate_stages=sw.cand_stage.tolist(),
        cv_losses=cv_loss.tolist(),
        lambda_cv=float(cv.lambda_cv),
        lambda_selected=float(lams[j_sel]),
        n_stages=len(sw.winners),
        stage_lambdas=[float(lams[j]) for j in sw.winners],
        stage_losses=sw.stage_losses,
        final_lambda=float(lams[j_final]),
        final_losses=final_losses,
        critical_residual=crit,
    )
    return est, trace


def neighbor_ps(path: LassoPath, lam: float, x, bounds=PS_BOUNDS) -> PropensityFit:
    """Propensity score one grid step above ``lam``.

    At the top of the grid the step is taken downward and mirrored, so that
    ``neighbor - g`` still approximates the upward change.
    """
    i = path.index_at_or_above(lam)
    if i > 0:
        return predict_ps(path, float(path.lambdas[i - 1]), x, bounds)
    g = predict_ps(path, float(path.lambdas[0]), x, bounds).g
    if path.k == 1:
        return PropensityFit(float(path.lambdas[0]), g, tuple(bounds))
    below = predict_ps(path, float(path.lambdas[1]), x, bounds).g
    return PropensityFit(float(2 * path.lambdas[0] - path.lambdas[1]), 2 * g - below, tuple(bounds))


def derivative_covariate(a, g, dg) -> CleverCovariate:
    """Penalty-derivative of ``H_g`` with the finite difference ``dg`` standing in for dg/dlambda."""
    h1 = -dg / g**2
    h0 = -dg / (1 - g) ** 2
    return CleverCovariate(a * h1 + (1 - a) * h0, h1, h0)


def ctmle0(
    data: Dataset,
    g_cv: PropensityFit,
    neighbor_g: PropensityFit,
    q_init: OutcomeFit,
    scale: OutcomeScale,
    name: str = "ctmle0",
) -> AteEstimate:
    """TMLE with the extra derivative clever covariate (two-parameter fluctuation)."""
    dg = neighbor_g.g - g_cv.g
    if not np.any(dg):
        warnings.warn("propensity path is flat at this penalty; ctmle0 reduces to tmle", stacklevel=2)
        return tmle_fit(data, g_cv, q_init, scale, name)[0]
    covs = [CleverCovariate.from_ps(data.a, g_cv.g), derivative_covariate(data.a, g_cv.g, dg)]
    q_star, _ = fluctuate(q_init, covs, data.y)
    psi = float(np.mean(q_star.q1 - q_star.q0))
    se = eic_se(data, g_cv, q_star, psi, scale)
    return AteEstimate.build(name, psi * scale.width, se, g_cv.lam)


def ctmle0_fit(data, g_cv, neighbor_g, q_init):
    """Doubly fluctuated fit used by diagnostics; ``None`` when the path is flat."""
    dg = neighbor_g.g - g_cv.g
    if not np.any(dg):
        return None
    covs = [CleverCovariate.from_ps(data.a, g_cv.g), derivative_covariate(data.a, g_cv.g, dg)]
    return fluctuate(q_init, covs, data.y)[0]


def critical_residual(data: Dataset, q_star: OutcomeFit, g_path_pair) -> float:
    """Per-grid-step change of ``mean H_g (Y - Q*)`` in the penalty direction."""
    g, g_up = g_path_pair
    dg = g_up.g - g.g
    ht = derivative_covariate(data.a, g.g, dg).h
    return float(np.mean(ht * (data.y - q_star.qa)))
