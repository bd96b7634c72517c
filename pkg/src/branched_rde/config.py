"""Versioned JSON experiment configs."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .bounds import check_gamma
from .differentials import SigmaModel, model_from_spec, truncation_level
from .driver import PiecewiseLinearPath, linear_path, read_driver_csv, sample_fbm, sinusoid_path
from .solver import DEFAULT_MAX_N

SCHEMA_VERSION = 1

Vec = Union[float, list[float]]


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DriverSpec(Strict):
    kind: Literal["sinusoid", "linear", "fbm", "csv"] = "sinusoid"
    d: int = Field(1, ge=1)
    n: int = Field(512, ge=1)
    drift: Vec = 1.0
    amplitude: Vec = 0.2
    freq: Vec = 2.0
    phase: Vec = 0.0
    slope: list[float] = [1.0]
    H: float = 0.4
    seed: int = 0
    path: Optional[str] = None

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "csv" and not self.path:
            raise ValueError("csv drivers need a path")
        if self.kind == "fbm" and not 0 < self.H < 1:
            raise ValueError("H must lie in (0, 1)")
        return self

    def build(self) -> PiecewiseLinearPath:
        if self.kind == "sinusoid":
            return sinusoid_path(self.n, self.d, self.drift, self.amplitude, self.freq, self.phase)
        if self.kind == "linear":
            return linear_path(self.slope, self.n)
        if self.kind == "fbm":
            return sample_fbm(self.H, self.n, self.seed, self.d)
        return read_driver_csv(self.path)


class SigmaSpec(Strict):
    kind: Literal["zero", "constant", "linear", "power_bracket", "tanh", "sine", "polynomial"] = "tanh"
    k: int = Field(1, ge=1)
    d: int = Field(1, ge=1)
    params: dict = {}

    def build(self, N: int) -> SigmaModel:
        return model_from_spec(self.kind, N=N, k=self.k, d=self.d, **self.params)


class Versioned(Strict):
    schema_version: Literal[1] = SCHEMA_VERSION


def _alpha_ok(alpha: float, max_N: int = DEFAULT_MAX_N) -> float:
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    N = truncation_level(alpha)
    if N > max_N:
        raise ValueError(f"alpha = {alpha} gives N = {N} > {max_N}")
    return alpha


class WithAlpha(Versioned):
    alpha: float = 0.45

    @field_validator("alpha")
    @classmethod
    def _alpha(cls, v: float) -> float:
        return _alpha_ok(v)


class AlgebraConfig(Versioned):
    max_order: int = Field(5, ge=0)
    d: int = Field(2, ge=1)


class LiftConfig(WithAlpha):
    alpha: float = 0.45
    driver: DriverSpec = DriverSpec()
    intervals: list[tuple[float, float]] = [(0.0, 1.0), (0.0, 0.5), (0.5, 1.0)]
    norm_level: int = Field(8, ge=1, le=12)


class SolveCmdConfig(WithAlpha):
    alpha: float = 0.45
    m: float = 3.0
    y0: list[float] = [10.0]
    steps: int = Field(1024, ge=1)
    drift: bool = True
    splitting: Literal["strang", "lie"] = "strang"
    driver: DriverSpec = DriverSpec()
    sigma: SigmaSpec = SigmaSpec()
    norm_level: int = Field(7, ge=1, le=10)
    snapshots: int = Field(5, ge=2)

    @model_validator(mode="after")
    def _check(self):
        if self.m <= 1:
            raise ValueError("m must be > 1")
        if len(self.y0) != self.sigma.k:
            raise ValueError(f"y0 has {len(self.y0)} components but sigma has k = {self.sigma.k}")
        if self.driver.d != self.sigma.d:
            raise ValueError("driver and sigma disagree on d")
        return self


class BoundsConfig(WithAlpha):
    alpha: float = 0.45
    m: float = 3.0
    y0s: list[float] = [1e2, 1e4, 1e6, 1e8]
    ts: list[float] = [0.25, 0.5, 1.0]
    steps: int = Field(1024, ge=1)
    mode: Literal["bounded", "polynomial"] = "bounded"
    gamma: Optional[float] = None
    spread_limit: float = 4.0
    probe_t: float = 0.5
    probe_limit: float = 1.1
    driver: DriverSpec = DriverSpec(amplitude=0.05, freq=3.0)
    sigma: SigmaSpec = SigmaSpec()

    @model_validator(mode="after")
    def _check(self):
        if self.m <= 1:
            raise ValueError("m must be > 1")
        if self.mode == "polynomial":
            if self.gamma is None:
                raise ValueError("polynomial mode needs gamma")
            check_gamma(self.gamma, self.m, self.alpha)
        if min(self.y0s) <= 0 or max(self.y0s) / min(self.y0s) < 1e4:
            raise ValueError("y0s must be positive and span at least four decades")
        for t in self.ts + [self.probe_t]:
            if not 0 < t <= 1 or abs(t * self.steps - round(t * self.steps)) > 1e-9:
                raise ValueError(f"time {t} must lie in (0, 1] on the solver grid")
        return self


class SmallTimeConfig(WithAlpha):
    alpha: float = 0.45
    m: float = 3.0
    y0s: list[float] = [0.0, 0.5, 1.0, 3.0, 10.0, 30.0, 1e2, 1e3, 1e4, 1e6]
    drivers: int = Field(10, ge=1)
    H: float = 0.5
    n: int = 256
    steps: int = Field(64, ge=1)
    eps1: Optional[float] = None
    eps2: float = 0.1
    gamma: float = 1.2
    bounded_sigma: SigmaSpec = SigmaSpec(kind="tanh")
    polynomial_sigma: SigmaSpec = SigmaSpec(kind="power_bracket", params={"gamma": 1.2})
    modes: list[Literal["bounded", "polynomial"]] = ["bounded", "polynomial"]

    @model_validator(mode="after")
    def _check(self):
        if "polynomial" in self.modes:
            check_gamma(self.gamma, self.m, self.alpha)
        return self


class McConfig(WithAlpha):
    H: float = 0.4
    alpha: float = 0.35
    m: float = 3.0
    seeds: int = Field(1000, ge=1)
    n: int = Field(512, ge=2, le=2 ** 13)
    steps: int = Field(512, ge=2)
    y0: list[float] = [0.0]
    window: tuple[float, float] = (0.5, 1.0)
    sigma: SigmaSpec = SigmaSpec()

    @model_validator(mode="after")
    def _check(self):
        if self.H <= 0.25:
            raise ValueError("H must exceed 1/4")
        if self.alpha >= self.H:
            raise ValueError("alpha must be below H")
        return self


SCHEMAS = {
    "algebra-check": AlgebraConfig,
    "lift": LiftConfig,
    "solve": SolveCmdConfig,
    "bounds": BoundsConfig,
    "small-time": SmallTimeConfig,
    "mc-tails": McConfig,
}


def load_config(command: str, path: str | None, overrides: dict | None = None) -> BaseModel:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        raw = json.loads(p.read_text())
    for key, value in (overrides or {}).items():
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return SCHEMAS[command].model_validate(raw)


def resolved(cfg: BaseModel) -> dict:
    """Config as plain JSON data, with the derived truncation level echoed."""
    data = cfg.model_dump(mode="json")
    if "alpha" in data:
        data["N"] = truncation_level(data["alpha"])
    return data


def config_hash(data: dict) -> str:
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
