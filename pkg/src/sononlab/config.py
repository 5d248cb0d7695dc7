"""Run configuration: JSON files plus command-line overrides.

A config file is a flat JSON object. ``subcommand``, ``seed`` and
``output_dir`` are common keys; everything else belongs to the subcommand's
parameter model. Unknown keys are rejected.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .bell import MODEL_KINDS, list_presets
from .errors import ConfigError
from .pilot import SCENARIO_KINDS
from .sync import KERNELS

SUBCOMMANDS = ("field-scan", "pilot-wave", "kuramoto", "bell", "audit")
COMMON_KEYS = ("subcommand", "seed", "output_dir")
SEED_MAX = 2**64 - 1


class Params(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class FieldScanParams(Params):
    m: int = Field(1, ge=0, le=3)
    n: int = Field(1, ge=0)
    k_r: float = Field(1.0, gt=0)
    R_o: float = Field(1.0, gt=0)
    omega0: float = Field(1.0, gt=0)
    A: float = 1.0
    radii: list[float] = Field(default_factory=lambda: [2.0, 5.0, 10.0, 20.0, 40.0],
                               min_length=1)
    polar_angle_deg: float = Field(90.0, ge=0, le=180)
    azimuth_deg: float = 0.0
    time: float = 0.0
    quad_nodes: int = Field(512, ge=8)

    @field_validator("radii")
    @classmethod
    def _positive_radii(cls, v):
        if any(not (math.isfinite(r) and r > 0) for r in v):
            raise ValueError("radii must be positive")
        return v


class PilotWaveParams(Params):
    scenario: Literal[SCENARIO_KINDS] = "double_slit"
    trials: int = Field(1000, ge=100)
    wavenumber: Optional[float] = None
    energy: Optional[float] = Field(None, gt=0)
    width: Optional[float] = Field(None, gt=0)
    center: Optional[float] = None
    slit_separation: Optional[float] = Field(None, gt=0)
    barrier_height: Optional[float] = Field(None, ge=0)
    barrier_width: Optional[float] = Field(None, gt=0)
    extent: Optional[tuple[float, float]] = None
    samples: Optional[int] = Field(None, ge=64)
    t_final: Optional[float] = Field(None, gt=0)
    dt: Optional[float] = Field(None, gt=0)
    mass: float = Field(1.0, gt=0)
    hbar: float = Field(1.0, gt=0)
    absorb: Optional[bool] = None
    record_every: int = Field(10, ge=1)
    bins: int = Field(100, ge=2)

    @field_validator("extent")
    @classmethod
    def _ordered(cls, v):
        if v is not None and not v[0] < v[1]:
            raise ValueError("extent must be (lo, hi) with lo < hi")
        return v


class KuramotoParams(Params):
    mode: Literal["triangle", "tetrahedron"] = "triangle"
    angles: list[float] = Field(
        default_factory=lambda: [90.0 + 10.0 * i for i in range(10)], min_length=1)
    trials: int = Field(200, ge=2)
    coupling_strength: float = Field(1.0, ge=0)
    perimeter: float = Field(3.0, gt=0)
    edge: float = Field(1.0, gt=0)
    kernel: Literal[KERNELS] = "inverse_r"
    k_r: float = Field(1.0, gt=0)
    kernel_table: Optional[list[tuple[float, float]]] = None
    jitter: Optional[float] = Field(None, ge=0)
    base_freq: float = 0.0
    tol: float = Field(0.1, gt=0)
    window: Optional[float] = Field(None, gt=0)
    transient: Optional[float] = Field(None, ge=0)
    dt: Optional[float] = Field(None, gt=0)

    @field_validator("angles")
    @classmethod
    def _angle_range(cls, v):
        bad = [a for a in v if not 60.0 <= a <= 180.0]
        if bad:
            raise ValueError(f"angles must lie in [60, 180] degrees, got {bad}")
        return v


class BellParams(Params):
    model: Literal[MODEL_KINDS] = "shared_phase"
    table: Optional[tuple[int, int, int, int]] = None
    communication_allowed: bool = False
    settings_deg: tuple[float, float, float, float] = (0.0, 45.0, 22.5, 67.5)
    trials: int = Field(100_000, ge=100)

    @field_validator("table")
    @classmethod
    def _pm_one(cls, v):
        if v is not None and any(x not in (-1, 1) for x in v):
            raise ValueError("table entries must be +1 or -1")
        return v


class AuditParams(Params):
    presets: list[str] = Field(default_factory=list_presets, min_length=1)
    c: float = Field(299792458.0, gt=0)


PARAMS = {
    "field-scan": FieldScanParams,
    "pilot-wave": PilotWaveParams,
    "kuramoto": KuramotoParams,
    "bell": BellParams,
    "audit": AuditParams,
}


@dataclass(frozen=True)
class RunConfig:
    subcommand: str
    params: Params
    seed: int = 0
    output_dir: str = "results"

    def echo(self) -> dict:
        return {"subcommand": self.subcommand, "seed": self.seed,
                "output_dir": self.output_dir, **self.params.model_dump(mode="json")}


def _raise_from_validation(exc: ValidationError):
    err = exc.errors()[0]
    key = ".".join(str(p) for p in err["loc"]) or "config"
    raise ConfigError(key, err["msg"]) from None


def load_config_file(path: str) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config", f"{path} must hold a JSON object")
    return data


def parse_config(subcommand: str | None = None, file_values: dict | None = None,
                 overrides: dict | None = None) -> RunConfig:
    """Merge file values with overrides (overrides win) and validate."""
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    file_sub = merged.pop("subcommand", None)
    if subcommand and file_sub and file_sub != subcommand:
        raise ConfigError("subcommand", f"file says {file_sub!r} but {subcommand!r} was requested")
    sub = subcommand or file_sub
    if sub not in SUBCOMMANDS:
        raise ConfigError("subcommand", f"expected one of {SUBCOMMANDS}, got {sub!r}")
    seed = merged.pop("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed <= SEED_MAX:
        raise ConfigError("seed", "must be an integer in [0, 2^64)")
    output_dir = merged.pop("output_dir", "results")
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError("output_dir", "must be a non-empty path")
    try:
        params = PARAMS[sub](**merged)
    except ValidationError as exc:
        _raise_from_validation(exc)
    return RunConfig(sub, params, seed, output_dir)


def parse_flag_value(raw: str):
    """Interpret a command-line value: JSON when it parses, else comma list or string."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        pass
    if "," in raw:
        return [parse_flag_value(part.strip()) for part in raw.split(",")]
    return raw
