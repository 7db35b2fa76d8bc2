"""Observed-data containers, outcome scaling and fold assignment."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

__all__ = [
    "DataError",
    "Dataset",
    "OutcomeScale",
    "FoldAssignment",
    "load_dataset",
    "save_dataset",
    "scale_outcome",
    "make_folds",
    "bound_unit",
]

UNIT_EPS = 1e-6


class DataError(ValueError):
    """Raised when input data violate the observed-data contract."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Dataset:
    """Observed data ``O = (Y, A, W)``.

    Parameters
    ----------
    y : array of shape (n,)
        Real-valued outcomes.
    a : array of shape (n,)
        Binary treatment indicators.
    w : array of shape (n, p)
        Covariate matrix.
    column_names : tuple of str
        One label per covariate column.
    """

    y: np.ndarray
    a: np.ndarray
    w: np.ndarray
    column_names: tuple[str, ...] = ()

    def __post_init__(self):
        y = np.array(self.y, dtype=float).ravel()
        a = np.asarray(self.a)
        w = np.array(self.w, dtype=float)
        if w.ndim == 1:
            w = w.reshape(-1, 1)
        n = y.shape[0]
        if n < 2:
            raise DataError("need at least two observations")
        if a.shape != (n,):
            raise DataError(f"treatment has length {a.size}, outcome has length {n}")
        if w.shape[0] != n:
            raise DataError(f"covariate matrix has {w.shape[0]} rows, expected {n}")
        if not np.all(np.isin(a, (0, 1))):
            raise DataError("non-binary treatment")
        a = a.astype(float)
        if a.min() == a.max():
            raise DataError("treatment must contain both arms (all-treated or all-control sample)")
        for name, arr in (("outcome", y), ("covariates", w)):
            bad = np.argwhere(~np.isfinite(arr))
            if bad.size:
                loc = tuple(int(i) for i in bad[0])
                raise DataError(f"non-finite value at row/col {loc} in {name}")
        names = tuple(self.column_names) or tuple(f"w{j + 1}" for j in range(w.shape[1]))
        if len(names) != w.shape[1]:
            raise DataError(f"{len(names)} column names for {w.shape[1]} covariates")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "a", _frozen(a))
        object.__setattr__(self, "w", _frozen(w))
        object.__setattr__(self, "column_names", names)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.w.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.y[idx], self.a[idx], self.w[idx], self.column_names)

    def with_outcome(self, y) -> "Dataset":
        return Dataset(y, self.a, self.w, self.column_names)


@dataclass(frozen=True)
class OutcomeScale:
    """Affine bounds mapping the outcome into the unit interval."""

    y_min: float = 0.0
    y_max: float = 1.0

    def __post_init__(self):
        if not self.y_max > self.y_min:
            raise DataError("y_max must exceed y_min")

    @property
    def width(self) -> float:
        return self.y_max - self.y_min

    def scale(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.y_min) / self.width

    def unscale(self, s) -> np.ndarray:
        return np.asarray(s, dtype=float) * self.width + self.y_min


@dataclass(frozen=True)
class FoldAssignment:
    fold_id: np.ndarray
    v: int

    def train_test(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        test = self.fold_id == k
        return np.flatnonzero(~test), np.flatnonzero(test)

    def __iter__(self):
        for k in range(self.v):
            yield self.train_test(k)


def scale_outcome(y) -> tuple[np.ndarray, OutcomeScale]:
    """Map ``y`` onto [0, 1] using the empirical minimum and maximum.

    Binary outcomes come back unchanged with scale ``(0, 1)``.
    """
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise DataError("non-finite outcome")
    lo, hi = float(y.min()), float(y.max())
    if not hi > lo:
        raise DataError("constant outcome: fluctuation undefined")
    scale = OutcomeScale(lo, hi)
    return scale.scale(y), scale


def bound_unit(x, eps: float = UNIT_EPS) -> np.ndarray:
    """Clip predictions into ``[eps, 1 - eps]`` so the logit stays finite."""
    return np.clip(x, eps, 1.0 - eps)


def make_folds(n: int, v: int, seed: int, a) -> FoldAssignment:
    """Arm-stratified V-fold assignment.

    Treated and control units are shuffled separately and dealt round-robin,
    the control deal continuing where the treated deal stopped. Fold sizes
    differ by at most one and every fold holds both arms.
    """
    a = np.asarray(a)
    if a.shape != (n,):
        raise DataError("treatment vector length does not match n")
    if not 2 <= v <= n:
        raise DataError(f"fold count v={v} must satisfy 2 <= v <= n={n}")
    treated = np.flatnonzero(a == 1)
    control = np.flatnonzero(a == 0)
    if treated.size < v or control.size < v:
        raise DataError(
            f"cannot place both arms in {v} folds with {treated.size} treated and {control.size} control units"
        )
    rng = np.random.default_rng(seed)
    fold_id = np.empty(n, dtype=np.int64)
    fold_id[rng.permutation(treated)] = np.arange(treated.size) % v
    fold_id[rng.permutation(control)] = (np.arange(control.size) + treated.size) % v
    return FoldAssignment(_frozen(fold_id), v)


def load_dataset(path, outcome_col: str, treatment_col: str, drop_cols=()) -> Dataset:
    """Read a CSV with a header row into a validated :class:`Dataset`.

    All columns other than the outcome, the treatment and ``drop_cols`` become
    covariates in file order.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    df = pd.read_csv(path, comment="#", float_precision="round_trip")
    missing = [c for c in (outcome_col, treatment_col, *drop_cols) if c not in df.columns]
    if missing:
        raise DataError(f"missing column(s): {', '.join(missing)}")
    covs = [c for c in df.columns if c not in (outcome_col, treatment_col, *drop_cols)]
    for col in (outcome_col, treatment_col, *covs):
        values = pd.to_numeric(df[col], errors="coerce")
        bad = values.isna() & df[col].notna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataError(f"non-numeric cell at row {row}, column {col!r}")
        df[col] = values
    a = df[treatment_col].to_numpy()
    if np.isnan(a).any() or not np.all(np.isin(a, (0, 1))):
        raise DataError("non-binary treatment")
    w = df[covs].to_numpy(dtype=float) if covs else np.zeros((len(df), 0))
    bad = np.argwhere(~np.isfinite(w))
    if bad.size:
        r, c = bad[0]
        raise DataError(f"non-finite value at row/col ({r}, {covs[c]!r})")
    return Dataset(df[outcome_col].to_numpy(dtype=float), a, w, tuple(covs))


def save_dataset(data: Dataset, path, outcome_col: str = "y", treatment_col: str = "a") -> None:
    df = pd.DataFrame(data.w, columns=list(data.column_names))
    df.insert(0, treatment_col, data.a.astype(int))
    df.insert(0, outcome_col, data.y)
    df.to_csv(path, index=False, float_format="%.17g")
