"""Run configuration: one TOML file per run, validated before any compute."""
from __future__ import annotations

import hashlib
import json
import math
from typing import Any, Dict, List, Literal, Optional

import tomli
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, field_validator, model_validator

from .laws import Law, ScalingRegime, law_from_config

EXPERIMENTS = ("simulate", "stationary", "bounds", "renewal-bounds", "limit-solve", "quasipotential", "panel")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LawConfig(BaseModel):
    """``{family = "gamma", shape = 2.0, scale = 0.5}``; parameters are checked per family."""

    model_config = ConfigDict(extra="allow")
    family: str

    @model_validator(mode="after")
    def _check(self):
        law_from_config(self.model_dump())
        return self

    def build(self) -> Law:
        return law_from_config(self.model_dump())


class RegimeConfig(_Strict):
    n: PositiveInt
    beta: PositiveFloat
    mu: PositiveFloat = 1.0
    b_exponent: float = Field(0.1, gt=0, lt=0.5)
    b_n: Optional[PositiveFloat] = None

    def build(self) -> ScalingRegime:
        b = float(self.n) ** self.b_exponent if self.b_n is None else self.b_n
        return ScalingRegime(self.n, b, self.beta, self.mu)


class SimulateConfig(_Strict):
    horizon: PositiveFloat
    samples: PositiveInt = 200
    q0: int = Field(0, ge=0)
    arrival_mode: Literal["ordinary", "equilibrium"] = "ordinary"


class StationaryConfig(_Strict):
    count: PositiveInt = 500
    spacing: PositiveFloat = 1.0
    burn_in: Optional[PositiveFloat] = None
    x_grid: List[float] = Field(default_factory=lambda: [0.0, 0.5, 1.0])


class BoundsConfig(_Strict):
    r_grid: List[float] = Field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    replications: PositiveInt = 2000
    i_max: Optional[PositiveInt] = None
    horizon: PositiveFloat = 50.0
    stationary_count: PositiveInt = 2000
    stationary_spacing: PositiveFloat = 2.0


class RenewalBoundsConfig(_Strict):
    laws: List[LawConfig] = Field(min_length=1)
    modes: List[Literal["ordinary", "equilibrium"]] = Field(default_factory=lambda: ["ordinary"])
    m_values: List[PositiveInt] = Field(default_factory=lambda: [1, 2, 3])
    t_values: List[PositiveFloat] = Field(default_factory=lambda: [0.5, 1.0, 5.0])
    reps: PositiveInt = 100_000
    batches: PositiveInt = 100
    level: float = Field(0.99, gt=0, lt=1)
    equilibrium_variance: bool = True


class LimitSolveConfig(_Strict):
    kind: Literal["renewal", "trajectory"] = "renewal"
    T: PositiveFloat = 20.0
    dt: Optional[PositiveFloat] = None
    # renewal forcing: f(t) = levels[k] on (breaks[k-1], breaks[k]]
    levels: List[float] = Field(default_factory=lambda: [-1.0])
    breaks: List[float] = Field(default_factory=list)
    method: Literal["march", "picard"] = "march"
    # trajectory
    x0: Optional[float] = None
    beta: PositiveFloat = 1.0
    sigma: Optional[float] = Field(None, ge=0)
    w_dot: float = 0.0
    cells: int = Field(32, ge=0)

    @model_validator(mode="after")
    def _shape(self):
        if len(self.levels) != len(self.breaks) + 1:
            raise ValueError("need exactly one more level than breaks")
        if any(b <= a for a, b in zip(self.breaks, self.breaks[1:])):
            raise ValueError("breaks must increase")
        return self


class QuasipotentialConfig(_Strict):
    x_grid: List[float] = Field(min_length=1)
    T_grid: List[PositiveFloat] = Field(default_factory=lambda: [2.0, 4.0, 8.0, 16.0, 32.0])
    beta: PositiveFloat = 1.0
    sigma: Optional[float] = Field(None, ge=0)
    dt: Optional[PositiveFloat] = None
    cells: int = Field(32, ge=0)
    dump_controls: bool = False

    @field_validator("T_grid")
    @classmethod
    def _increasing(cls, v):
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("T_grid must increase")
        return v

    @field_validator("x_grid")
    @classmethod
    def _finite(cls, v):
        if not all(math.isfinite(x) for x in v):
            raise ValueError("x_grid must be finite")
        return v


class PanelConfig(_Strict):
    n_list: List[PositiveInt] = Field(default_factory=lambda: [25, 100, 400])
    x_grid: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0])
    beta: PositiveFloat = 1.0
    b_exponent: float = Field(0.1, gt=0, lt=0.5)
    gg_replications: PositiveInt = 400
    simulate: bool = False
    sim_count: PositiveInt = 2000
    quasipotential: bool = True
    T_grid: List[PositiveFloat] = Field(default_factory=lambda: [2.0, 4.0, 8.0, 16.0, 32.0])
    dt: Optional[PositiveFloat] = None
    cells: int = Field(32, ge=0)


class RunConfig(_Strict):
    experiment: Literal["simulate", "stationary", "bounds", "renewal-bounds", "limit-solve", "quasipotential", "panel"]
    seed: int = Field(0, ge=0)
    output: str = "out"
    regime: Optional[RegimeConfig] = None
    service: LawConfig = Field(default_factory=lambda: LawConfig(family="exponential", rate=1.0))
    arrival: LawConfig = Field(default_factory=lambda: LawConfig(family="exponential", rate=1.0))
    simulate: Optional[SimulateConfig] = None
    stationary: Optional[StationaryConfig] = None
    bounds: Optional[BoundsConfig] = None
    renewal_bounds: Optional[RenewalBoundsConfig] = Field(None, alias="renewal-bounds")
    limit_solve: Optional[LimitSolveConfig] = Field(None, alias="limit-solve")
    quasipotential: Optional[QuasipotentialConfig] = None
    panel: Optional[PanelConfig] = None

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    @model_validator(mode="after")
    def _sections(self):
        kind = self.experiment
        needs_regime = kind in ("simulate", "stationary", "bounds")
        if needs_regime and self.regime is None:
            raise ValueError(f"experiment '{kind}' needs a [regime] section")
        key = kind.replace("-", "_")
        if getattr(self, key) is None:
            if kind in ("stationary", "bounds", "limit-solve", "panel"):
                setattr(self, key, {"stationary": StationaryConfig, "bounds": BoundsConfig,
                                    "limit_solve": LimitSolveConfig, "panel": PanelConfig}[key]())
            else:
                raise ValueError(f"experiment '{kind}' needs a [{kind}] section")
        if needs_regime:
            service = self.service.build()
            if abs(service.mean * self.regime.mu - 1.0) > 1e-9:
                raise ValueError("service mean must equal 1/mu")
            if not self.regime.build().stable():
                raise ValueError("regime is not stable (need rho_n < 1)")
        return self

    def resolved(self) -> Dict[str, Any]:
        """Config as plain data, only the active experiment's section kept."""
        d = self.model_dump(by_alias=True, exclude_none=True)
        for k in ("simulate", "stationary", "bounds", "renewal-bounds", "limit-solve", "quasipotential", "panel"):
            if k != self.experiment:
                d.pop(k, None)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path: str) -> RunConfig:
    with open(path, "rb") as fh:
        data = tomli.load(fh)
    return RunConfig.model_validate(data)
