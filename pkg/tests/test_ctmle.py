import warnings

import numpy as np
import pytest
from scipy.special import expit

from conftest import make_obs
from ctmle_lasso.ctmle import (
    critical_residual,
    ctmle0,
    ctmle0_fit,
    ctmle1,
    derivative_covariate,
    neighbor_ps,
)
from ctmle_lasso.data import Dataset, OutcomeScale, make_folds, scale_outcome
from ctmle_lasso.estimators import OutcomeFit, clever_covariate, fit_outcome_mainterm, gcomp
from ctmle_lasso.lasso import cv_deviance, lasso_logistic_path, predict_ps
from ctmle_lasso.tmle import tmle

UNIT = OutcomeScale(0.0, 1.0)


def _setup(n=300, seed=0, k=25, q_cols=(2,)):
    obs = make_obs(n=n, seed=seed)
    ys, sc = scale_outcome(obs.y)
    ds = obs.with_outcome(ys)
    path = lasso_logistic_path(ds.w, ds.a, k=k)
    folds = make_folds(ds.n, 5, seed, ds.a)
    cv = cv_deviance(ds.w, ds.a, folds, lambdas=path.lambdas)
    q = fit_outcome_mainterm(ds, list(q_cols))
    return ds, sc, path, folds, cv, q


@pytest.fixture(scope="module")
def fitted():
    ds, sc, path, folds, cv, q = _setup()
    est, trace = ctmle1(ds, path, q, folds, sc, cv=cv)
    return ds, sc, path, folds, cv, q, est, trace


def test_single_grid_point_equals_tmle():
    ds, sc, path, folds, _, q = _setup(k=25)
    lam = float(path.lambdas[8])
    one = lasso_logistic_path(ds.w, ds.a, lambdas=[lam])
    cv1 = cv_deviance(ds.w, ds.a, folds, lambdas=one.lambdas)
    with pytest.warns(UserWarning, match="single-candidate"):
        est, trace = ctmle1(ds, one, q, folds, sc, cv=cv1)
    ref = tmle(ds, predict_ps(one, lam, ds.w), q, sc)
    assert est.psi == ref.psi
    assert est.se == ref.se
    assert trace.final_lambda == trace.lambda_selected == lam


def test_perfect_initial_fit_gives_gcomp():
    rng = np.random.default_rng(3)
    n = 200
    w = rng.standard_normal((n, 3))
    a = (rng.random(n) < expit(w[:, 0])).astype(float)
    q = OutcomeFit.from_arms(expit(0.2 * w[:, 1]), expit(0.5 + 0.2 * w[:, 1]), a)
    ds = Dataset(q.qa, a, w)
    path = lasso_logistic_path(w, a, k=15)
    folds = make_folds(n, 5, 0, a)
    est, trace = ctmle1(ds, path, q, folds, UNIT)
    assert est.psi == pytest.approx(gcomp(q, UNIT).psi, abs=1e-12)
    # every candidate loss ties, so the largest penalty wins
    assert trace.lambda_selected == trace.candidate_lambdas[0]


def test_trace_invariants(fitted):
    _, _, path, _, cv, _, _, tr = fitted
    assert tr.lambda_selected in tr.candidate_lambdas
    assert tr.final_lambda <= tr.lambda_selected <= tr.lambda_cv
    assert tr.lambda_cv == cv.lambda_cv
    assert 1 <= tr.n_stages <= len(tr.candidate_lambdas) <= path.k
    assert all(b <= a + 1e-15 for a, b in zip(tr.stage_losses, tr.stage_losses[1:]))
    assert np.all(np.diff(tr.stage_lambdas) < 0)
    # the collaborative pick never has a worse cross-validated loss than lambda_cv itself
    j = tr.candidate_lambdas.index(tr.lambda_selected)
    assert tr.cv_losses[j] <= tr.cv_losses[0]
    assert len(tr.final_losses) == len(tr.candidate_lambdas) - j - 1
    assert np.isfinite(tr.critical_residual)
    assert set(tr.to_dict()) >= {"candidate_lambdas", "cv_losses", "final_lambda"}


def test_estimate_reports_final_lambda(fitted):
    _, _, _, _, _, _, est, tr = fitted
    assert est.lambda_used == tr.final_lambda
    assert est.ci_lo < est.psi < est.ci_hi


def test_deterministic(fitted):
    ds, sc, path, folds, cv, q, est, trace = fitted
    est2, trace2 = ctmle1(ds, path, q, folds, sc, cv=cv)
    assert est2 == est
    assert trace2 == trace


def test_ctmle0_flat_path_is_tmle():
    ds, sc, path, _, cv, q = _setup()
    g = predict_ps(path, cv.lambda_cv, ds.w)
    with pytest.warns(UserWarning, match="flat"):
        est = ctmle0(ds, g, g, q, sc)
    assert est.psi == tmle(ds, g, q, sc).psi


@pytest.mark.parametrize("seed", range(5))
def test_ctmle0_solves_both_scores(seed):
    ds, sc, path, _, cv, q = _setup(seed=seed)
    g = predict_ps(path, cv.lambda_cv, ds.w)
    g_up = neighbor_ps(path, g.lam, ds.w)
    q_star = ctmle0_fit(ds, g, g_up, q)
    h, _, _ = clever_covariate(ds.a, g.g)
    ht = derivative_covariate(ds.a, g.g, g_up.g - g.g).h
    r = ds.y - q_star.qa
    assert abs(np.mean(h * r)) <= 1e-8
    assert abs(np.mean(ht * r)) <= 1e-8
    assert abs(critical_residual(ds, q_star, (g, g_up))) <= 1e-8


def test_critical_residual_nonzero_for_plain_tmle():
    ds, sc, path, _, cv, q = _setup(seed=1)
    from ctmle_lasso.tmle import tmle_fit

    g = predict_ps(path, cv.lambda_cv, ds.w)
    _, q_star, _ = tmle_fit(ds, g, q, sc)
    assert critical_residual(ds, q_star, (g, neighbor_ps(path, g.lam, ds.w))) != 0.0


def test_derivative_covariate_is_derivative_of_h():
    rng = np.random.default_rng(0)
    g = rng.uniform(0.1, 0.9, 30)
    a = rng.binomial(1, 0.5, 30).astype(float)
    dg = 1e-7 * rng.standard_normal(30)
    num = clever_covariate(a, g + dg)[0] - clever_covariate(a, g)[0]
    np.testing.assert_allclose(derivative_covariate(a, g, dg).h, num, rtol=1e-5, atol=1e-15)


def test_neighbor_at_top_of_grid_is_mirrored():
    ds, _, path, _, _, _ = _setup()
    top = neighbor_ps(path, float(path.lambdas[0]), ds.w)
    assert top.lam > path.lambdas[0]
    assert np.all(np.isfinite(top.g))
    inner = neighbor_ps(path, float(path.lambdas[5]), ds.w)
    assert inner.lam == path.lambdas[4]


def test_collaborative_choice_reduces_bias_monte_carlo():
    """q omits a confounder; g at the CV penalty is over-smoothed."""
    est = {"tmle": [], "ctmle1": [], "ctmle0": []}
    for s in range(40):
        rng = np.random.default_rng(2000 + s)
        n = 500
        w = rng.standard_normal((n, 8))
        a = (rng.random(n) < expit(0.5 * w[:, 0] - 0.5 * w[:, 1] + 0.4 * w[:, 2])).astype(float)
        y = 2 + w[:, 0] + w[:, 1] + w[:, 2] + a + rng.standard_normal(n)
        ys, sc = scale_outcome(y)
        ds = Dataset(ys, a, w)
        q = fit_outcome_mainterm(ds, [3, 4])
        path = lasso_logistic_path(w, a, k=40)
        folds = make_folds(n, 5, s, a)
        cv = cv_deviance(w, a, folds, lambdas=path.lambdas)
        g = predict_ps(path, cv.lambda_cv, w)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            est["tmle"].append(tmle(ds, g, q, sc).psi)
            est["ctmle1"].append(ctmle1(ds, path, q, folds, sc, cv=cv)[0].psi)
            est["ctmle0"].append(ctmle0(ds, g, neighbor_ps(path, g.lam, w), q, sc).psi)
    bias = {k: abs(np.mean(v) - 1) for k, v in est.items()}
    assert bias["ctmle1"] < bias["tmle"]
    assert bias["ctmle0"] < bias["tmle"]
