"""Run configuration: YAML file form, validation and a provenance hash."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass

import yaml

from .roster import validate_roster

__all__ = [
    "ConfigError",
    "COMMANDS",
    "DataSection",
    "EstimateSection",
    "LassoSection",
    "HdpsSection",
    "SimulateSection",
    "PathSection",
    "RunConfig",
    "load_config",
]

COMMANDS = ("estimate", "hdps", "simulate", "path")


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    path: str | None = None
    outcome: str = "y"
    treatment: str = "a"
    id_column: str | None = None
    drop: list = field(default_factory=list)


@dataclass
class EstimateSection:
    roster: list = field(default_factory=lambda: ["unadj", "gcomp", "ipw", "dr_ipw", "tmle", "tmle*", "ctmle1", "ctmle0"])
    outcome_covariates: list | None = None  # column names; null = all
    ps_covariates: list | None = None


@dataclass
class LassoSection:
    n_lambda: int = 100
    lambda_min_ratio: float | None = None  # null: 1e-3 if n > p else 5e-2
    folds: int = 10


@dataclass
class HdpsSection:
    claims: str | None = None
    k1: int = 100
    k2: int = 200
    sources: list | None = None


@dataclass
class SimulateSection:
    n_rep: int = 500
    n_per_rep: int = 1000
    n_confounders: int = 40
    q_subset_size: int = 10
    base_path: str | None = None  # CSV with a treatment column and covariates
    base_n: int = 5000
    base_p: int = 200
    base_seed: int = 20170101
    roster: list | None = None  # null: the full simulation roster
    max_failure_rate: float = 0.01


@dataclass
class PathSection:
    trace: str | None = None  # trace.json from an estimate run
    run_ctmle: bool = False


_SECTIONS = {
    "data": DataSection,
    "estimate": EstimateSection,
    "lasso": LassoSection,
    "hdps": HdpsSection,
    "simulate": SimulateSection,
    "path": PathSection,
}


@dataclass
class RunConfig:
    command: str = "estimate"
    seed: int = 0
    threads: int = field(default_factory=lambda: os.cpu_count() or 1)
    out: str = "out"
    ps_bounds: list = field(default_factory=lambda: [0.025, 0.975])
    data: DataSection = field(default_factory=DataSection)
    estimate: EstimateSection = field(default_factory=EstimateSection)
    lasso: LassoSection = field(default_factory=LassoSection)
    hdps: HdpsSection = field(default_factory=HdpsSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    path: PathSection = field(default_factory=PathSection)

    def validate(self) -> "RunConfig":
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}; choose from {', '.join(COMMANDS)}")
        lo, hi = (float(b) for b in self.ps_bounds)
        if not 0 < lo < hi < 1:
            raise ConfigError("ps_bounds must satisfy 0 < lower < upper < 1")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if self.lasso.n_lambda < 1:
            raise ConfigError("lasso.n_lambda must be at least 1")
        if self.lasso.folds < 2:
            raise ConfigError("lasso.folds must be at least 2")
        r = self.lasso.lambda_min_ratio
        if r is not None and not 0 < r < 1:
            raise ConfigError("lasso.lambda_min_ratio must lie in (0, 1)")
        if self.hdps.k1 < 1:
            raise ConfigError("hdps.k1 must be at least 1")
        if self.hdps.k2 < 0:
            raise ConfigError("hdps.k2 must be non-negative")
        if self.simulate.n_rep < 1 or self.simulate.n_per_rep < 2:
            raise ConfigError("simulate.n_rep must be >= 1 and simulate.n_per_rep >= 2")
        try:
            validate_roster(self.estimate.roster)
            if self.simulate.roster is not None:
                validate_roster(self.simulate.roster)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, raw: dict | None) -> "RunConfig":
        raw = dict(raw or {})
        kwargs = {}
        top = {f.name for f in fields(cls)}
        for key, value in raw.items():
            if key not in top:
                raise ConfigError(f"unknown config key {key!r}")
            if key in _SECTIONS:
                kwargs[key] = _section(_SECTIONS[key], value, key)
            else:
                kwargs[key] = value
        try:
            cfg = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    def config_hash(self) -> str:
        """Short SHA-256 of the settings that determine results.

        ``threads`` and ``out`` are left out: they change neither numbers nor
        their order, so outputs stay byte-identical across them.
        """
        d = self.to_dict()
        d.pop("threads")
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _section(cls, value, name):
    if value is None:
        return cls()
    if is_dataclass(value):
        return value
    if not isinstance(value, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    for key in value:
        if key not in known:
            raise ConfigError(f"unknown config key {name}.{key}")
    return cls(**value)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config file must hold a mapping")
    return RunConfig.from_dict(raw)
