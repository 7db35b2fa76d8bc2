"""Outcome regression and the propensity-score based ATE estimators.

Every estimator works on the unit-scaled outcome and reports the effect on the
original outcome scale via :class:`~ctmle_lasso.data.OutcomeScale`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from .data import Dataset, OutcomeScale, bound_unit
from .lasso import PropensityFit

__all__ = [
    "Z95",
    "OutcomeFit",
    "AteEstimate",
    "fit_outcome_mainterm",
    "clever_covariate",
    "unadjusted",
    "gcomp",
    "ipw",
    "hajek_ipw",
    "weighted_regression",
    "dr_ipw",
    "hbc",
]

Z95 = 1.959963984540054


@dataclass(frozen=True)
class OutcomeFit:
    """Predictions of E[Y | A, W] on the unit scale."""

    q0: np.ndarray
    q1: np.ndarray
    qa: np.ndarray
    learner_label: str = "mainterm"

    @classmethod
    def from_arms(cls, q0, q1, a, learner_label="mainterm") -> "OutcomeFit":
        q0 = np.asarray(q0, dtype=float)
        q1 = np.asarray(q1, dtype=float)
        a = np.asarray(a, dtype=float)
        return cls(q0, q1, a * q1 + (1 - a) * q0, learner_label)

    def logits(self):
        return logit(self.q0), logit(self.q1), logit(self.qa)


@dataclass(frozen=True)
class AteEstimate:
    psi: float
    se: float | None
    ci_lo: float | None
    ci_hi: float | None
    estimator: str
    lambda_used: float | None = None

    @classmethod
    def build(cls, estimator, psi, se=None, lambda_used=None) -> "AteEstimate":
        psi = float(psi)
        if se is None:
            return cls(psi, None, None, None, estimator, lambda_used)
        se = float(se)
        return cls(psi, se, psi - Z95 * se, psi + Z95 * se, estimator, lambda_used)

    def covers(self, value: float) -> bool | None:
        if self.ci_lo is None:
            return None
        return self.ci_lo <= value <= self.ci_hi

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "psi": self.psi,
            "se": self.se,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "lambda_used": self.lambda_used,
        }


def _design(a, w_sub):
    n = a.shape[0]
    return np.column_stack([np.ones(n), a, w_sub])


def _irls(x, y, weights, max_iter=100, tol=1e-10, ridge=0.0):
    """Quasi-binomial logistic regression by Newton-Raphson with step halving."""
    n, m = x.shape
    beta = np.zeros(m)
    ybar = np.clip(np.average(y, weights=weights), 1e-6, 1 - 1e-6)
    beta[0] = np.log(ybar / (1 - ybar))

    def nll(b):
        eta = x @ b
        return np.sum(weights * (np.logaddexp(0.0, eta) - y * eta)) + 0.5 * ridge * np.sum(b[1:] ** 2)

    f = nll(beta)
    for _ in range(max_iter):
        mu = expit(x @ beta)
        grad = x.T @ (weights * (y - mu))
        grad[1:] -= ridge * beta[1:]
        hess = (x * (weights * mu * (1 - mu))[:, None]).T @ x
        hess[np.arange(1, m), np.arange(1, m)] += ridge
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(step)):
            return None
        t = 1.0
        for _ in range(50):
            cand = beta + t * step
            fc = nll(cand)
            if fc <= f + 1e-12 * abs(f):
                break
            t *= 0.5
        else:
            return None
        beta, f = cand, fc
        if np.max(np.abs(t * step)) < tol * (1 + np.max(np.abs(beta))):
            return beta
        if np.max(np.abs(beta)) > 1e6:
            return None
    # separation pushes coefficients off without converging
    return beta if ridge > 0 else None


def _wls(x, y, weights):
    sw = np.sqrt(weights)
    beta, *_ = np.linalg.lstsq(x * sw[:, None], y * sw, rcond=None)
    return beta


def fit_outcome_mainterm(
    data: Dataset,
    covariate_subset=None,
    weights=None,
    link: str = "logit",
    learner_label: str | None = None,
) -> OutcomeFit:
    """Main-term regression of the (already unit-scaled) outcome on ``(A, W_subset)``.

    Parameters
    ----------
    data : Dataset
        ``data.y`` must lie in [0, 1].
    covariate_subset : sequence of int, optional
        Column indices of ``data.w``; ``None`` uses every column.
    weights : array, optional
        Per-unit weights of the empirical loss.
    link : {"logit", "identity"}
        ``logit`` fits a quasi-binomial GLM by IRLS; ``identity`` is weighted
        least squares.
    """
    y, a = data.y, data.a
    if np.any((y < 0) | (y > 1)):
        raise ValueError("outcome must be scaled to [0, 1] before fitting")
    cols = np.arange(data.p) if covariate_subset is None else np.asarray(covariate_subset, dtype=int)
    if cols.size and (cols.min() < 0 or cols.max() >= data.p):
        raise IndexError("covariate subset index out of range")
    x = _design(a, data.w[:, cols])
    x1 = _design(np.ones_like(a), data.w[:, cols])
    x0 = _design(np.zeros_like(a), data.w[:, cols])
    wts = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    label = learner_label or ("mainterm" if weights is None else "weighted-mainterm")
    if link == "identity":
        beta = _wls(x, y, wts)
        return OutcomeFit.from_arms(bound_unit(x0 @ beta), bound_unit(x1 @ beta), a, label)
    if link != "logit":
        raise ValueError(f"unknown link {link!r}")
    beta = _irls(x, y, wts)
    if beta is None:
        warnings.warn("IRLS diverged; refitting with ridge-stabilised steps", RuntimeWarning, stacklevel=2)
        beta = _irls(x, y, wts, ridge=1e-6)
        if beta is None:
            raise RuntimeError("outcome regression failed even with ridge stabilisation")
    return OutcomeFit.from_arms(bound_unit(expit(x0 @ beta)), bound_unit(expit(x1 @ beta)), a, label)


def clever_covariate(a, g):
    """Return ``(h, h1, h0)``: H_g at the observed, treated and control arm."""
    a = np.asarray(a, dtype=float)
    h1 = 1.0 / g
    h0 = -1.0 / (1.0 - g)
    return a * h1 + (1 - a) * h0, h1, h0


def _se(ic) -> float:
    return float(np.std(ic, ddof=1) / np.sqrt(ic.shape[0]))


def _finish(name, psi, ic, scale, lam=None):
    se = None if ic is None else _se(ic) * scale.width
    return AteEstimate.build(name, psi * scale.width, se, lam)


def unadjusted(data: Dataset, scale: OutcomeScale, name="unadj") -> AteEstimate:
    """Difference of arm means."""
    y, a = data.y, data.a
    m1, m0 = y[a == 1].mean(), y[a == 0].mean()
    ic = a * (y - m1) / a.mean() - (1 - a) * (y - m0) / (1 - a).mean()
    return _finish(name, m1 - m0, ic, scale)


def gcomp(q: OutcomeFit, scale: OutcomeScale, name="gcomp") -> AteEstimate:
    return AteEstimate.build(name, np.mean(q.q1 - q.q0) * scale.width)


def ipw(data: Dataset, g: PropensityFit, scale: OutcomeScale, name="ipw") -> AteEstimate:
    y, a = data.y, data.a
    terms = a * y / g.g - (1 - a) * y / (1 - g.g)
    return _finish(name, terms.mean(), terms, scale, g.lam)


def hajek_ipw(data: Dataset, g: PropensityFit, scale: OutcomeScale, name="hajek_ipw") -> AteEstimate:
    """Arm-wise weight-normalised IPW; the influence curve linearises the two ratios."""
    y, a = data.y, data.a
    w1 = a / g.g
    w0 = (1 - a) / (1 - g.g)
    mu1 = np.sum(w1 * y) / np.sum(w1)
    mu0 = np.sum(w0 * y) / np.sum(w0)
    ic = w1 * (y - mu1) / w1.mean() - w0 * (y - mu0) / w0.mean()
    return _finish(name, mu1 - mu0, ic, scale, g.lam)


def dr_ipw(data: Dataset, g: PropensityFit, q: OutcomeFit, scale: OutcomeScale, name="dr_ipw") -> AteEstimate:
    h, _, _ = clever_covariate(data.a, g.g)
    terms = h * (data.y - q.qa) + q.q1 - q.q0
    return _finish(name, terms.mean(), terms, scale, g.lam)


def hbc(data: Dataset, g: PropensityFit, q: OutcomeFit, scale: OutcomeScale, name="hbc") -> AteEstimate:
    """Hajek-normalised residual correction added to the G-computation term."""
    a = data.a
    resid = data.y - q.qa
    w1 = a / g.g
    w0 = (1 - a) / (1 - g.g)
    r1 = np.sum(w1 * resid) / np.sum(w1)
    r0 = np.sum(w0 * resid) / np.sum(w0)
    diff = q.q1 - q.q0
    psi = r1 - r0 + diff.mean()
    ic = w1 * (resid - r1) / w1.mean() - w0 * (resid - r0) / w0.mean() + diff - diff.mean()
    return _finish(name, psi, ic, scale, g.lam)


def weighted_regression(
    data: Dataset,
    g: PropensityFit,
    covariate_subset,
    scale: OutcomeScale,
    name="wr",
    link: str = "logit",
) -> tuple[AteEstimate, OutcomeFit]:
    """Refit the outcome model with weights ``A/g + (1-A)/(1-g)``, then G-compute.

    Returns the estimate and the weighted outcome fit. The standard error is
    the DR-IPW influence curve evaluated at the weighted fit.
    """
    a = data.a
    wts = a / g.g + (1 - a) / (1 - g.g)
    q = fit_outcome_mainterm(data, covariate_subset, weights=wts, link=link)
    h, _, _ = clever_covariate(a, g.g)
    ic = h * (data.y - q.qa) + q.q1 - q.q0
    psi = np.mean(q.q1 - q.q0)
    return _finish(name, psi, ic, scale, g.lam), q
