"""High-dimensional propensity score (hdPS) covariates from long-format claims.

Pipeline: aggregate claims per (patient, source, code); keep the ``k1`` most
prevalent codes per source; expand each kept code into three indicators
(any use, above the cohort median, above the cohort 75th percentile); rank the
indicators by the Bross apparent-bias multiplier and keep the top ``k2``.
Nothing here is random.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .data import DataError, Dataset

__all__ = [
    "KINDS",
    "ClaimsTable",
    "HdpsConfig",
    "HdpsCovariate",
    "HdpsResult",
    "load_claims",
    "prevalence_screen",
    "expand_indicators",
    "bross_bias",
    "bross_rank",
    "hdps_pipeline",
]

KINDS = ("nonzero", "above_median", "above_q75")
_COLUMNS = ("patient_id", "source", "code", "count")


@dataclass(frozen=True)
class ClaimsTable:
    """Claims aggregated to one row per (patient_id, source, code).

    ``patient_id``, ``source`` and ``code`` are kept as strings so that ordering
    and tie-breaking are lexicographic regardless of how ids were written.
    """

    frame: pd.DataFrame

    @classmethod
    def from_frame(cls, df: pd.DataFrame, sources=None) -> "ClaimsTable":
        missing = [c for c in _COLUMNS if c not in df.columns]
        if missing:
            raise DataError(f"claims table missing column(s): {', '.join(missing)}")
        df = df.loc[:, list(_COLUMNS)].copy()
        for c in ("patient_id", "source", "code"):
            df[c] = df[c].astype(str)
        cnt = pd.to_numeric(df["count"], errors="coerce")
        if cnt.isna().any():
            row = int(np.flatnonzero(cnt.isna().to_numpy())[0])
            raise DataError(f"non-numeric claim count at row {row}")
        if (cnt < 0).any():
            raise DataError("claim counts must be non-negative")
        if not np.all(np.floor(cnt) == cnt):
            raise DataError("claim counts must be integers")
        df["count"] = cnt.astype(np.int64)
        if sources is not None:
            bad = sorted(set(df["source"]) - {str(s) for s in sources})
            if bad:
                raise DataError(f"unknown claim source(s): {', '.join(bad)}")
        agg = (
            df.groupby(["patient_id", "source", "code"], sort=True, as_index=False)["count"].sum()
        )
        return cls(agg)

    @property
    def sources(self) -> list:
        return sorted(self.frame["source"].unique().tolist())

    def patients(self) -> set:
        return set(self.frame["patient_id"])

    def counts(self, source: str, codes, cohort) -> np.ndarray:
        """Dense ``(len(cohort), len(codes))`` count matrix, zeros where no claim exists."""
        sub = self.frame[(self.frame["source"] == source) & self.frame["code"].isin(list(codes))]
        wide = sub.pivot(index="patient_id", columns="code", values="count")
        wide = wide.reindex(index=[str(c) for c in cohort], columns=list(codes))
        return wide.fillna(0).to_numpy(dtype=float)


def load_claims(path, sources=None) -> ClaimsTable:
    """Read a long-format claims CSV with columns patient_id, source, code, count."""
    try:
        df = pd.read_csv(path, dtype={"patient_id": str, "source": str, "code": str}, comment="#")
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DataError(f"cannot parse claims file {path}: {exc}") from exc
    return ClaimsTable.from_frame(df, sources)


@dataclass(frozen=True)
class HdpsConfig:
    k1: int = 100
    k2: int = 200

    def __post_init__(self):
        if self.k1 < 1:
            raise ValueError("k1 must be at least 1")
        if self.k2 < 0:
            raise ValueError("k2 must be non-negative")


@dataclass
class HdpsCovariate:
    code: str
    source: str
    kind: str
    values: np.ndarray = field(repr=False)
    bross_bias: float = float("nan")
    rank: int = -1
    flags: list = field(default_factory=list)

    @property
    def name(self) -> str:
        return f"{self.source}:{self.code}:{self.kind}"

    def report(self) -> dict:
        return {
            "code": self.code,
            "source": self.source,
            "kind": self.kind,
            "bross_bias": self.bross_bias,
            "abs_log_bias": abs(math.log(self.bross_bias)),
            "rank": self.rank,
            "flags": list(self.flags),
        }


@dataclass
class HdpsResult:
    data: Dataset
    selected: list
    screened: dict
    n_candidates: int
    outcome_dichotomized: bool

    def ranking_report(self) -> dict:
        return {
            "outcome_dichotomized": self.outcome_dichotomized,
            "screened_codes": self.screened,
            "n_candidates": self.n_candidates,
            "covariates": [c.report() for c in self.selected],
        }


def prevalence_screen(claims: ClaimsTable, cohort, k1: int) -> dict:
    """Top ``k1`` codes per source by ``max(p, 1 - p)``.

    ``p`` is the share of ``cohort`` with a positive count. Codes seen in
    nobody or in everybody carry no information and are dropped. Ties go to
    the lexicographically smaller code.

    Returns
    -------
    dict
        ``{source: [code, ...]}`` in rank order.
    """
    cohort = [str(c) for c in cohort]
    if not cohort:
        raise ValueError("cohort must be non-empty")
    n = len(cohort)
    df = claims.frame
    df = df[df["patient_id"].isin(set(cohort)) & (df["count"] > 0)]
    out = {}
    for source in claims.sources:
        users = df[df["source"] == source].groupby("code")["patient_id"].nunique()
        ranked = []
        for code, k in users.items():
            if 0 < k < n:
                # max(p, 1-p) compared on integer counts so ties are exact
                ranked.append((-max(k, n - k), code))
        ranked.sort()
        out[source] = [code for _, code in ranked[:k1]]
    return out


def _quantile7(x, q):
    return float(np.quantile(x, q, method="linear"))


def expand_indicators(claims: ClaimsTable, selected: dict, cohort) -> list:
    """Three binary indicators per selected code, cohort rows in ``cohort`` order.

    Thresholds use linear-interpolation quantiles over the whole cohort, with
    patients lacking a claim counted as zero. Indicators identical to an
    earlier one of the same code are kept and flagged ``duplicate_of:<kind>``;
    all-zero or all-one indicators are flagged ``constant``.
    """
    cohort = [str(c) for c in cohort]
    out = []
    for source in sorted(selected):
        codes = list(selected[source])
        if not codes:
            continue
        mat = claims.counts(source, codes, cohort)
        for j, code in enumerate(codes):
            x = mat[:, j]
            cols = {
                "nonzero": x > 0,
                "above_median": x > _quantile7(x, 0.5),
                "above_q75": x > _quantile7(x, 0.75),
            }
            seen = []
            for kind in KINDS:
                v = cols[kind].astype(float)
                flags = []
                if v.min() == v.max():
                    flags.append("constant")
                for k_prev, v_prev in seen:
                    if np.array_equal(v, v_prev):
                        flags.append(f"duplicate_of:{k_prev}")
                        break
                seen.append((kind, v))
                out.append(HdpsCovariate(code, source, kind, v, flags=flags))
    return out


def bross_bias(c, a, y) -> tuple[float, bool]:
    """Bross multiplier ``(P1 (rr - 1) + 1) / (P0 (rr - 1) + 1)`` and a defined flag.

    ``P1``/``P0`` are the covariate prevalences among treated/controls and
    ``rr`` the outcome risk ratio between ``c = 1`` and ``c = 0``. When any
    ratio is undefined, or the result is not a positive finite number, the
    multiplier is 1 and the flag is ``False``.
    """
    c = np.asarray(c, dtype=float)
    a = np.asarray(a, dtype=float)
    y = np.asarray(y, dtype=float)
    n1, n0 = a.sum(), (1 - a).sum()
    m1, m0 = c.sum(), (1 - c).sum()
    ev0 = (y * (1 - c)).sum()
    if n1 == 0 or n0 == 0 or m1 == 0 or m0 == 0 or ev0 == 0:
        return 1.0, False
    p1 = (c * a).sum() / n1
    p0 = (c * (1 - a)).sum() / n0
    rr = ((y * c).sum() / m1) / (ev0 / m0)
    num = p1 * (rr - 1.0) + 1.0
    den = p0 * (rr - 1.0) + 1.0
    if den <= 0 or num <= 0:
        return 1.0, False
    b = num / den
    if not math.isfinite(b) or b <= 0:
        return 1.0, False
    return float(b), True


def _binary_outcome(y):
    y = np.asarray(y, dtype=float)
    if np.all((y == 0) | (y == 1)):
        return y, False
    return (y > np.median(y)).astype(float), True


def bross_rank(covariates, a, y, k2: int) -> list:
    """Score every indicator with :func:`bross_bias` and keep the top ``k2``.

    Order is descending ``|log Bias|``; ties by code, then source, then kind.
    A non-binary ``y`` is dichotomized at its median for the risk ratio.
    """
    y_bin, dichotomized = _binary_outcome(y)
    scored = []
    for cov in covariates:
        b, ok = bross_bias(cov.values, a, y_bin)
        cov.bross_bias = b
        if not ok:
            cov.flags.append("bias_undefined")
        if dichotomized and "outcome_dichotomized" not in cov.flags:
            cov.flags.append("outcome_dichotomized")
        scored.append((-abs(math.log(b)), cov.code, cov.source, KINDS.index(cov.kind), cov))
    scored.sort(key=lambda t: t[:4])
    top = [t[4] for t in scored[:k2]]
    for r, cov in enumerate(top, start=1):
        cov.rank = r
    return top


def hdps_pipeline(
    claims: ClaimsTable,
    baseline: Dataset,
    patient_ids,
    config: HdpsConfig = HdpsConfig(),
) -> HdpsResult:
    """Append the selected hdPS indicators to ``baseline``.

    Parameters
    ----------
    claims : ClaimsTable
    baseline : Dataset
        Row ``i`` belongs to ``patient_ids[i]``.
    patient_ids : sequence
        Cohort identifiers; claims for anyone outside it are an error.
    config : HdpsConfig
    """
    cohort = [str(p) for p in patient_ids]
    if len(cohort) != baseline.n:
        raise DataError(f"{len(cohort)} patient ids for {baseline.n} baseline rows")
    if len(set(cohort)) != len(cohort):
        raise DataError("duplicate patient id in baseline")
    orphans = sorted(claims.patients() - set(cohort))
    if orphans:
        shown = ", ".join(orphans[:10]) + (" ..." if len(orphans) > 10 else "")
        raise DataError(f"{len(orphans)} claims patient id(s) not in baseline: {shown}")

    screened = prevalence_screen(claims, cohort, config.k1)
    candidates = expand_indicators(claims, screened, cohort)
    _, dichotomized = _binary_outcome(baseline.y)
    if config.k2 == 0:
        return HdpsResult(baseline, [], screened, len(candidates), dichotomized)
    if config.k2 > len(candidates):
        warnings.warn(
            f"k2={config.k2} exceeds the {len(candidates)} available indicators; appending all",
            stacklevel=2,
        )
    top = bross_rank(candidates, baseline.a, baseline.y, config.k2)
    if not top:
        return HdpsResult(baseline, [], screened, len(candidates), dichotomized)
    w = np.column_stack([baseline.w] + [c.values for c in top])
    names = tuple(baseline.column_names) + tuple(c.name for c in top)
    data = Dataset(baseline.y, baseline.a, w, names)
    return HdpsResult(data, top, screened, len(candidates), dichotomized)
