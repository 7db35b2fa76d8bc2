"""Logistic fluctuation (targeting) and the plug-in TMLE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.special import expit

from .data import Dataset, OutcomeScale
from .estimators import AteEstimate, OutcomeFit, clever_covariate
from .lasso import PropensityFit

__all__ = [
    "FluctuationError",
    "Fluctuation",
    "CleverCovariate",
    "fluctuate",
    "fluctuate_many",
    "empirical_loss",
    "tmle",
    "tmle_fit",
    "eic",
    "eic_se",
]

SCORE_TOL = 1e-10
MAX_HALVINGS = 50
MAX_NEWTON = 200


class FluctuationError(RuntimeError):
    pass


@dataclass(frozen=True)
class CleverCovariate:
    """A fluctuation direction evaluated at the observed arm and at A=1 / A=0."""

    h: np.ndarray
    h1: np.ndarray
    h0: np.ndarray

    @classmethod
    def from_ps(cls, a, g) -> "CleverCovariate":
        return cls(*clever_covariate(a, g))


@dataclass(frozen=True)
class Fluctuation:
    eps: np.ndarray
    converged: bool
    loss: float
    loss_init: float


@njit(cache=True)
def _nll(eta, y):
    # log(1 + e^eta) - y * eta, overflow safe
    if eta > 0:
        return eta + np.log1p(np.exp(-eta)) - y * eta
    return np.log1p(np.exp(eta)) - y * eta


@njit(cache=True)
def _mean_loss(offset, h, eps, y):
    s = 0.0
    for i in range(y.shape[0]):
        s += _nll(offset[i] + eps * h[i], y[i])
    return s / y.shape[0]


@njit(cache=True)
def _newton_1d(offset, h, y, tol, max_iter, max_halvings):
    """Returns (eps, loss, loss_at_zero, status); status 0 ok, 1 halving failed, 2 no convergence."""
    n = y.shape[0]
    eps = 0.0
    loss0 = _mean_loss(offset, h, 0.0, y)
    loss = loss0
    for _ in range(max_iter):
        s = 0.0
        info = 0.0
        for i in range(n):
            p = 1.0 / (1.0 + np.exp(-(offset[i] + eps * h[i])))
            s += h[i] * (y[i] - p)
            info += h[i] * h[i] * p * (1.0 - p)
        s /= n
        info /= n
        if abs(s) < tol:
            return eps, loss, loss0, 0
        if info <= 0.0:
            return eps, loss, loss0, 2
        step = s / info
        t = 1.0
        ok = False
        for _k in range(max_halvings + 1):
            cand = eps + t * step
            lc = _mean_loss(offset, h, cand, y)
            if lc <= loss + 1e-14 * abs(loss):
                ok = True
                break
            t *= 0.5
        if not ok:
            return eps, loss, loss0, 1
        eps = cand
        loss = lc
    return eps, loss, loss0, 2


@njit(cache=True)
def _newton_many(offset, hmat, y, tol, max_iter, max_halvings):
    m = hmat.shape[0]
    eps = np.zeros(m)
    loss = np.zeros(m)
    status = np.zeros(m, dtype=np.int64)
    for j in range(m):
        e, l, _, st = _newton_1d(offset, hmat[j], y, tol, max_iter, max_halvings)
        eps[j] = e
        loss[j] = l
        status[j] = st
    return eps, loss, status


def _as_offset(q):
    return np.log(q) - np.log1p(-q)


def empirical_loss(y, qa) -> float:
    """Mean quasi-binomial negative log-likelihood of predictions ``qa``."""
    qa = np.asarray(qa, dtype=float)
    return float(-np.mean(y * np.log(qa) + (1 - y) * np.log1p(-qa)))


def fluctuate_many(offset, hmat, y, tol: float = SCORE_TOL):
    """Fit one-dimensional fluctuations for each row of ``hmat`` against a shared offset.

    Returns ``(eps, loss)`` arrays; raises :class:`FluctuationError` if any fit fails.
    """
    hmat = np.ascontiguousarray(np.atleast_2d(hmat), dtype=float)
    eps, loss, status = _newton_many(
        np.ascontiguousarray(offset, dtype=float), hmat, np.ascontiguousarray(y, dtype=float),
        tol, MAX_NEWTON, MAX_HALVINGS,
    )
    if np.any(status != 0):
        raise FluctuationError("fluctuation failed")
    return eps, loss


def _newton_nd(offset, hm, y, tol):
    n, k = hm.shape
    eps = np.zeros(k)

    def loss_at(e):
        eta = offset + hm @ e
        return float(np.mean(np.logaddexp(0.0, eta) - y * eta))

    loss0 = loss = loss_at(eps)
    for _ in range(MAX_NEWTON):
        p = expit(offset + hm @ eps)
        score = hm.T @ (y - p) / n
        if np.max(np.abs(score)) < tol:
            return eps, loss, loss0
        info = (hm * (p * (1 - p))[:, None]).T @ hm / n
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, score, rcond=None)[0]
        t = 1.0
        for _k in range(MAX_HALVINGS + 1):
            cand = eps + t * step
            lc = loss_at(cand)
            if lc <= loss + 1e-14 * abs(loss):
                break
            t *= 0.5
        else:
            raise FluctuationError("fluctuation failed")
        eps, loss = cand, lc
    raise FluctuationError("fluctuation failed")


def fluctuate(q: OutcomeFit, covariates, y, tol: float = SCORE_TOL) -> tuple[OutcomeFit, Fluctuation]:
    """Logistic fluctuation of ``q`` along one or two clever covariates.

    ``logit q*(A, W) = logit q(A, W) + sum_k eps_k * H_k(A, W)``, with ``eps``
    the maximum quasi-likelihood solution for the scaled outcome ``y``.
    Updated counterfactual predictions use the A=1 / A=0 versions of each
    covariate.
    """
    covariates = list(covariates)
    if not 1 <= len(covariates) <= 2:
        raise ValueError("fluctuate takes one or two clever covariates")
    y = np.asarray(y, dtype=float)
    l0, l1, la = (_as_offset(v) for v in (q.q0, q.q1, q.qa))
    if len(covariates) == 1:
        e, loss, loss0, status = _newton_1d(
            np.ascontiguousarray(la), np.ascontiguousarray(covariates[0].h, dtype=float), y,
            tol, MAX_NEWTON, MAX_HALVINGS,
        )
        if status != 0:
            raise FluctuationError("fluctuation failed")
        eps = np.array([e])
    else:
        hm = np.column_stack([c.h for c in covariates])
        eps, loss, loss0 = _newton_nd(la, hm, y, tol)
    sh = sum(e * c.h for e, c in zip(eps, covariates))
    sh1 = sum(e * c.h1 for e, c in zip(eps, covariates))
    sh0 = sum(e * c.h0 for e, c in zip(eps, covariates))
    q_star = OutcomeFit(expit(l0 + sh0), expit(l1 + sh1), expit(la + sh), q.learner_label + "+targeted")
    return q_star, Fluctuation(np.asarray(eps, dtype=float), True, float(loss), float(loss0))


def eic(data_y, a, g, q_star: OutcomeFit, psi_scaled: float) -> np.ndarray:
    """Efficient influence curve of the ATE on the unit scale."""
    h, _, _ = clever_covariate(a, g)
    return h * (data_y - q_star.qa) + q_star.q1 - q_star.q0 - psi_scaled


def eic_se(data: Dataset, g: PropensityFit, q_star: OutcomeFit, psi_scaled: float, scale: OutcomeScale) -> float:
    """Standard error ``sd(D) / sqrt(n)`` on the original outcome scale."""
    d = eic(data.y, data.a, g.g, q_star, psi_scaled)
    return float(np.std(d, ddof=1) / np.sqrt(data.n) * scale.width)


def tmle_fit(data: Dataset, g: PropensityFit, q: OutcomeFit, scale: OutcomeScale, name="tmle"):
    """TMLE with its targeted fit and fluctuation; ``data.y`` is unit-scaled."""
    q_star, fl = fluctuate(q, [CleverCovariate.from_ps(data.a, g.g)], data.y)
    psi = float(np.mean(q_star.q1 - q_star.q0))
    se = eic_se(data, g, q_star, psi, scale)
    return AteEstimate.build(name, psi * scale.width, se, g.lam), q_star, fl


def tmle(data: Dataset, g: PropensityFit, q: OutcomeFit, scale: OutcomeScale, name="tmle") -> AteEstimate:
    """Plug-in TMLE of the ATE; ``data.y`` must already be unit-scaled."""
    return tmle_fit(data, g, q, scale, name)[0]
