"""L1-penalized logistic regression path for the treatment mechanism.

The path minimises, for each penalty ``lam`` on a decreasing grid,

    (1/n) * sum_i [log(1 + exp(eta_i)) - a_i * eta_i] + lam * ||beta||_1

with ``eta = b0 + x_std @ beta`` on internally standardised columns. Each grid
point is solved by proximal Newton steps: the logistic loss is replaced by its
quadratic expansion and the resulting penalised least-squares problem is solved
by cyclic coordinate descent on the weighted Gram matrix. A backtracking line
search on the penalised objective keeps every outer step a descent step.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import expit

from .data import FoldAssignment

__all__ = [
    "ConvergenceError",
    "LassoPath",
    "PropensityFit",
    "CvCurve",
    "PS_BOUNDS",
    "default_lambda_min_ratio",
    "lambda_grid",
    "lasso_logistic_path",
    "cv_deviance",
    "predict_ps",
    "binomial_deviance",
]

PS_BOUNDS = (0.025, 0.975)
TOL = 1e-7
MAX_SWEEPS = 100_000
_W_FLOOR = 1e-5


class ConvergenceError(RuntimeError):
    def __init__(self, lam: float, msg: str = "coordinate descent did not converge"):
        super().__init__(f"{msg} at lambda={lam:.6g}")
        self.lam = lam


@dataclass(frozen=True)
class LassoPath:
    """Coefficients along a decreasing penalty grid, on the original covariate scale."""

    lambdas: np.ndarray
    intercepts: np.ndarray
    coefs: np.ndarray
    n_active: np.ndarray
    deviance: np.ndarray
    n_sweeps: np.ndarray = field(repr=False, default=None)

    @property
    def k(self) -> int:
        return self.lambdas.shape[0]

    def index_at_or_above(self, lam: float) -> int:
        """Grid index of the smallest grid penalty that is >= ``lam``."""
        lams = self.lambdas
        rtol = 1e-12
        if lam > lams[0] * (1 + rtol) or lam < lams[-1] * (1 - rtol):
            raise ValueError(f"lambda={lam:.6g} outside grid range [{lams[-1]:.6g}, {lams[0]:.6g}]")
        idx = np.flatnonzero(lams >= lam * (1 - rtol))
        return int(idx[-1])

    def linear_predictor(self, idx: int, x) -> np.ndarray:
        return self.intercepts[idx] + np.asarray(x, dtype=float) @ self.coefs[idx]


@dataclass(frozen=True)
class PropensityFit:
    lam: float
    g: np.ndarray
    bounds: tuple[float, float] = PS_BOUNDS


@dataclass(frozen=True)
class CvCurve:
    lambdas: np.ndarray
    deviance: np.ndarray
    se: np.ndarray
    lambda_cv: float
    index_cv: int
    fold_paths: tuple = field(default=(), repr=False, compare=False)


def binomial_deviance(a, eta) -> np.ndarray:
    """Per-unit deviance ``2 * [log(1 + e^eta) - a * eta]``."""
    return 2.0 * (np.logaddexp(0.0, eta) - a * eta)


def default_lambda_min_ratio(n: int, p: int) -> float:
    return 1e-3 if n > p else 5e-2


@njit(cache=True)
def _objective(eta, a, theta, lam):
    f = 0.0
    for i in range(a.shape[0]):
        e = eta[i]
        if e > 0:
            f += e + np.log1p(np.exp(-e)) - a[i] * e
        else:
            f += np.log1p(np.exp(e)) - a[i] * e
    pen = 0.0
    for k in range(1, theta.shape[0]):
        pen += abs(theta[k])
    return f / a.shape[0] + lam * pen


@njit(cache=True, fastmath={"reassoc", "contract"})
def _prox_newton(xt, a, ws, theta, lam, tol, max_sweeps):
    """Proximal Newton for the penalised logistic loss on columns ``ws``.

    ``xt`` holds the standardised covariates transposed (p x n). ``theta`` is
    (intercept, coefficients of ``ws``) and is updated in place. Each Newton
    step minimises the weighted least-squares approximation by coordinate
    descent with residual updates, cycling over the active set between full
    sweeps; an Armijo search on the penalised objective guards the step.

    Returns the number of sweeps used, or -1 when the budget runs out.
    """
    n = a.shape[0]
    m = ws.shape[0]
    eta = np.full(n, theta[0])
    for k in range(m):
        b = theta[k + 1]
        if b != 0.0:
            row = xt[ws[k]]
            for i in range(n):
                eta[i] += b * row[i]
    w = np.empty(n)
    r = np.empty(n)
    rr = np.empty(n)
    xw = np.empty(m)
    new = theta.copy()
    used = 0
    strict = 0.1 * tol
    inner_tol = 1e-3
    for _outer in range(500):
        sw = 0.0
        for i in range(n):
            pi = 1.0 / (1.0 + np.exp(-eta[i]))
            wi = pi * (1.0 - pi)
            if wi < _W_FLOOR:
                wi = _W_FLOOR
            w[i] = wi
            r[i] = (a[i] - pi) / wi
            rr[i] = r[i]
            sw += wi
        sw /= n
        for k in range(m):
            row = xt[ws[k]]
            s = 0.0
            for i in range(n):
                s += w[i] * row[i] * row[i]
            xw[k] = s / n
        for k in range(m + 1):
            new[k] = theta[k]
        full = True
        while True:
            dmax = 0.0
            g0 = 0.0
            for i in range(n):
                g0 += w[i] * rr[i]
            d0 = g0 / n / sw
            if d0 != 0.0:
                new[0] += d0
                for i in range(n):
                    rr[i] -= d0
                dmax = abs(d0)
            for k in range(m):
                old = new[k + 1]
                if not full and old == 0.0:
                    continue
                row = xt[ws[k]]
                g = 0.0
                for i in range(n):
                    g += w[i] * row[i] * rr[i]
                u = g / n + xw[k] * old
                if u > lam:
                    nv = (u - lam) / xw[k]
                elif u < -lam:
                    nv = (u + lam) / xw[k]
                else:
                    nv = 0.0
                d = nv - old
                if d != 0.0:
                    new[k + 1] = nv
                    for i in range(n):
                        rr[i] -= d * row[i]
                    if abs(d) > dmax:
                        dmax = abs(d)
            used += 1
            if used > max_sweeps:
                return -1
            if dmax < inner_tol:
                if full:
                    break
                full = True
            else:
                full = False
        step = 0.0
        for k in range(m + 1):
            if abs(new[k] - theta[k]) > step:
                step = abs(new[k] - theta[k])
        if step < tol:
            if inner_tol > strict:
                # looks converged under a loose inner solve; confirm with a strict one
                inner_tol = strict
                continue
            for k in range(m + 1):
                theta[k] = new[k]
            return used
        # Armijo search along d = new - theta; x.d = r - rr
        f0 = _objective(eta, a, theta, lam)
        gd = 0.0
        for i in range(n):
            gd -= w[i] * r[i] * (r[i] - rr[i])
        gd /= n
        l1_new = 0.0
        l1_old = 0.0
        for k in range(1, m + 1):
            l1_new += abs(new[k])
            l1_old += abs(theta[k])
        delta = gd + lam * (l1_new - l1_old)
        t = 1.0
        trial_eta = np.empty(n)
        trial = np.empty(m + 1)
        for _ls in range(60):
            for i in range(n):
                trial_eta[i] = eta[i] + t * (r[i] - rr[i])
            for k in range(m + 1):
                trial[k] = theta[k] + t * (new[k] - theta[k])
            if _objective(trial_eta, a, trial, lam) <= f0 + 1e-4 * t * delta + 1e-15:
                break
            t *= 0.5
        for i in range(n):
            eta[i] = trial_eta[i]
        for k in range(m + 1):
            theta[k] = trial[k]
        if t * step < tol and inner_tol <= strict:
            return used
        inner_tol = max(strict, min(inner_tol, 1e-2 * t * step))
    return -1


def _solve_working_set(xt, a, b0, beta, ws, lam, tol, budget):
    """Fit the coefficients in ``ws`` (others held at zero); returns (b0, beta, sweeps)."""
    theta = np.concatenate(([b0], beta[ws]))
    used = _prox_newton(xt, a, ws.astype(np.int64), theta, lam, tol, max(budget, 1))
    if used < 0:
        raise ConvergenceError(lam)
    beta = beta.copy()
    beta[ws] = theta[1:]
    return theta[0], beta, used


def lambda_grid(x, a, k: int = 100, lambda_min_ratio: float | None = None) -> np.ndarray:
    """Log-spaced grid from ``lambda_max`` down to ``lambda_max * lambda_min_ratio``."""
    xs, _, _, keep = _standardize(x)
    a = np.asarray(a, dtype=float)
    n, p = xs.shape
    if lambda_min_ratio is None:
        lambda_min_ratio = default_lambda_min_ratio(n, p)
    lam_max = float(np.max(np.abs(xs.T @ (a - a.mean())) / n)) if keep.any() else 0.0
    if lam_max <= 0:
        lam_max = 1.0
    return np.exp(np.linspace(np.log(lam_max), np.log(lam_max * lambda_min_ratio), k))


def _standardize(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    mean = x.mean(axis=0)
    sd = x.std(axis=0)
    keep = sd > 1e-12 * np.maximum(1.0, np.abs(mean))
    sd_safe = np.where(keep, sd, 1.0)
    xs = (x - mean) / sd_safe
    xs[:, ~keep] = 0.0
    return xs, mean, sd_safe, keep


def lasso_logistic_path(
    x,
    a,
    k: int = 100,
    lambda_min_ratio: float | None = None,
    lambdas=None,
    tol: float = TOL,
    max_sweeps: int = MAX_SWEEPS,
) -> LassoPath:
    """Fit the L1-penalised logistic regression path of ``a`` on ``x``.

    Parameters
    ----------
    x : array of shape (n, p)
    a : array of shape (n,)
        Binary response.
    k : int
        Grid size, ignored when ``lambdas`` is given.
    lambda_min_ratio : float, optional
        Smallest grid penalty as a fraction of ``lambda_max``. Defaults to 1e-3
        when ``n > p`` and 5e-2 otherwise.
    lambdas : array, optional
        Explicit decreasing grid (used for fold refits on a shared grid).
    tol : float
        Convergence threshold on the largest coefficient change.
    max_sweeps : int
        Coordinate-descent sweep budget per grid point.

    Returns
    -------
    LassoPath
    """
    a = np.asarray(a, dtype=float)
    xs, mean, sd, keep = _standardize(x)
    n, p = xs.shape
    if n < 2 or p < 1:
        raise ValueError("need n >= 2 and p >= 1")
    if not keep.all():
        warnings.warn(f"dropping {int((~keep).sum())} constant column(s) from the lasso path", stacklevel=2)
    if lambdas is None:
        lambdas = lambda_grid(x, a, k, lambda_min_ratio)
    lambdas = np.asarray(lambdas, dtype=float)
    if np.any(np.diff(lambdas) >= 0):
        raise ValueError("lambdas must be strictly decreasing")
    k = lambdas.size
    xt = np.ascontiguousarray(xs.T)

    abar = np.clip(a.mean(), 1e-10, 1 - 1e-10)
    b0 = float(np.log(abar / (1 - abar)))
    beta = np.zeros(p)
    intercepts = np.empty(k)
    coefs = np.empty((k, p))
    n_active = np.empty(k, dtype=np.int64)
    deviance = np.empty(k)
    n_sweeps = np.empty(k, dtype=np.int64)
    ever = np.zeros(p, dtype=bool)
    grad = xs.T @ (a - expit(b0)) / n
    prev_lam = lambdas[0]
    for i, lam in enumerate(lambdas):
        strong = keep & (np.abs(grad) >= 2 * lam - prev_lam)
        ws_mask = ever | strong
        used = 0
        while True:
            ws = np.flatnonzero(ws_mask)
            if ws.size:
                b0, beta, s = _solve_working_set(xt, a, b0, beta, ws, lam, tol, max_sweeps - used)
                used += s
            else:
                b0 = float(np.log(abar / (1 - abar)))
            eta = b0 + xs @ beta
            grad = xs.T @ (a - expit(eta)) / n
            viol = keep & ~ws_mask & (np.abs(grad) > lam * (1 + 1e-9) + 1e-10)
            if not viol.any():
                break
            ws_mask |= viol
            if used > max_sweeps:
                raise ConvergenceError(lam)
        active = beta != 0
        ever |= active
        prev_lam = lam
        intercepts[i] = b0 - np.sum(beta * mean / sd)
        coefs[i] = beta / sd
        n_active[i] = int(active.sum())
        deviance[i] = float(np.mean(binomial_deviance(a, eta)))
        n_sweeps[i] = used
    return LassoPath(lambdas, intercepts, coefs, n_active, deviance, n_sweeps)


def predict_ps(path: LassoPath, lam: float, x, bounds=PS_BOUNDS) -> PropensityFit:
    """Bounded propensity scores at the grid point at or above ``lam``."""
    idx = path.index_at_or_above(lam)
    g = np.clip(expit(path.linear_predictor(idx, x)), bounds[0], bounds[1])
    return PropensityFit(float(path.lambdas[idx]), g, tuple(bounds))


def cv_deviance(
    x,
    a,
    folds: FoldAssignment,
    lambdas=None,
    k: int = 100,
    lambda_min_ratio: float | None = None,
    tol: float = TOL,
) -> CvCurve:
    """Cross-validated binomial deviance along a shared penalty grid.

    Each fold refits the path on its training rows and scores the held-out rows
    by mean per-unit deviance. The selected penalty minimises the fold-averaged
    curve; exact ties go to the larger penalty.
    """
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    if lambdas is None:
        lambdas = lambda_grid(x, a, k, lambda_min_ratio)
    lambdas = np.asarray(lambdas, dtype=float)
    per_fold = np.empty((folds.v, lambdas.size))
    paths = []
    for v, (train, test) in enumerate(folds):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fp = lasso_logistic_path(x[train], a[train], lambdas=lambdas, tol=tol)
        paths.append(fp)
        eta = fp.intercepts[:, None] + fp.coefs @ x[test].T
        per_fold[v] = binomial_deviance(a[test][None, :], eta).mean(axis=1)
    dev = per_fold.mean(axis=0)
    se = per_fold.std(axis=0, ddof=1) / np.sqrt(folds.v)
    idx = int(np.argmin(dev))
    return CvCurve(lambdas, dev, se, float(lambdas[idx]), idx, tuple(paths))
