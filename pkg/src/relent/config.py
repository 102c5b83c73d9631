"""JSON run configuration.

Every section rejects unknown keys. :func:`parse_config` returns a validated
:class:`RunConfig`; :func:`emit_config` writes its canonical form, which
parses back to an equal object. :func:`config_schema` is the published
JSON schema.
"""

from __future__ import annotations

import hashlib
import json
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .cns import ModelParams, StepperConfig
from .ensemble import ExperimentPlan
from .errors import ConfigError, UsageError
from .grid import Grid
from .noise import NoiseModel
from .thermo import PressureLaw

__all__ = [
    "RunConfig",
    "parse_config",
    "load_config",
    "emit_config",
    "config_schema",
    "run_hash",
]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ExperimentSection(_Section):
    kind: Literal["energy", "twin", "eps_sweep", "ito_check", "coercivity"] = "energy"
    n_members: int = Field(1, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    t_end: float = Field(0.5, ge=0)
    resolutions: list[int] = Field(default_factory=lambda: [64])
    eps_list: list[float] = Field(default_factory=list)
    mu_rule: Literal["eps", "eps2", "custom"] = "eps"
    mu_custom: list[float] = Field(default_factory=list)
    # twin
    variant: Literal["a", "b", "decoupled"] = "a"
    E0: float = Field(0.0, ge=0)
    refine: int = Field(3, ge=3)
    c_M: float | None = None
    # energy
    budget_constant: float = Field(1.0, ge=0)
    # eps sweep
    delta_rule: str = "eps"
    stop_M: float | None = Field(None, gt=0)
    target_ratio: float = Field(0.25, gt=0)
    n_rows: int = Field(20, ge=1)
    # ito check
    dts: list[float] = Field(default_factory=lambda: [1e-2, 5e-3, 2.5e-3])
    min_order: float = 0.8
    # coercivity
    deltas: list[float] = Field(default_factory=lambda: [0.1, 0.01])
    gammas: list[float] = Field(default_factory=lambda: [5.0 / 3.0, 2.0])

    @field_validator("eps_list")
    @classmethod
    def _eps_range(cls, v):
        if any(not 0.0 < e <= 1.0 for e in v):
            raise ValueError("every eps must lie in (0, 1]")
        return v

    @field_validator("refine")
    @classmethod
    def _odd(cls, v):
        if v % 2 == 0:
            raise ValueError("refine must be odd so that cell-centred grids nest")
        return v

    def plan(self) -> ExperimentPlan:
        return ExperimentPlan(
            kind=self.kind,
            n_members=self.n_members,
            seed=self.seed,
            t_end=self.t_end,
            resolutions=tuple(self.resolutions),
            eps_list=tuple(self.eps_list),
            mu_rule=self.mu_rule,
            mu_custom=tuple(self.mu_custom),
        )


class GridSection(_Section):
    dim: Literal[1, 2] = 1
    n: int = Field(64, ge=8)
    length: float = Field(2.0, gt=0)

    def build(self) -> Grid:
        return Grid(self.dim, self.n, self.length)


class ParamsSection(_Section):
    gamma: float = 2.0
    a: float = Field(1.0, gt=0)
    relax_gamma: bool = False
    mu: float = Field(0.1, ge=0)
    eta: float = Field(0.0, ge=0)
    eps: float = Field(1.0, gt=0, le=1)

    @model_validator(mode="after")
    def _gamma(self):
        if not self.gamma > 1.0:
            raise ValueError(f"gamma must exceed 1 (got {self.gamma})")
        if not self.relax_gamma and not self.gamma > 1.5:
            raise ValueError(f"gamma > 3/2 required (got {self.gamma}); set relax_gamma to override")
        return self

    def law(self) -> PressureLaw:
        return PressureLaw(self.gamma, self.a, self.relax_gamma)


class StepperSection(_Section):
    cfl: float = Field(0.4, gt=0, le=1)
    rho_floor: float = Field(1e-8, ge=0)
    max_dt: float = Field(1e-2, gt=0)
    viscous_treatment: Literal["explicit", "semi_implicit"] = "explicit"

    def build(self) -> StepperConfig:
        return StepperConfig(self.cfl, self.rho_floor, self.max_dt, self.viscous_treatment)


class NoiseSection(_Section):
    K: int = Field(8, ge=0)
    F: list[float] | None = None
    H: list[float] | None = None
    tail_budget: float = Field(0.0, ge=0)
    directions: list[list[float]] | None = None

    @model_validator(mode="after")
    def _lengths(self):
        for name in ("F", "H"):
            v = getattr(self, name)
            if v is not None and len(v) != self.K:
                raise ValueError(f"{name} has {len(v)} entries but K={self.K}")
        return self

    def build(self) -> NoiseModel:
        F = tuple(self.F) if self.F is not None else (0.0,) * self.K
        H = tuple(self.H) if self.H is not None else (0.0,) * self.K
        d = tuple(tuple(r) for r in self.directions) if self.directions is not None else None
        return NoiseModel(F, H, "affine", self.tail_budget, d)


class InitialSection(_Section):
    """Initial data: ``rho = 1 + rho_amplitude*sin(pi x)...``, ``u = u_amplitude*cos(pi x)...``."""

    kind: Literal["equilibrium", "smooth"] = "smooth"
    rho_amplitude: float = 0.1
    u_amplitude: float = 0.1
    v0_amplitude: float = 0.0  # eps sweep: amplitude of the solenoidal limit field


class RunConfig(_Section):
    experiment: ExperimentSection = Field(default_factory=ExperimentSection)
    grid: GridSection = Field(default_factory=GridSection)
    params: ParamsSection = Field(default_factory=ParamsSection)
    stepper: StepperSection = Field(default_factory=StepperSection)
    noise: NoiseSection = Field(default_factory=NoiseSection)
    initial: InitialSection = Field(default_factory=InitialSection)
    output_dir: str = "out"
    ledger_every: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _viscosity(self):
        if self.experiment.kind in ("energy", "twin") and self.params.eps == 1.0 and not self.params.mu > 0:
            raise ValueError("params.mu > 0 is required for the unscaled system (eps = 1)")
        return self

    def model_params(self) -> ModelParams:
        p = self.params
        return ModelParams(p.law(), p.mu, p.eta, p.eps, self.noise.build())

    def with_seed(self, seed: int) -> "RunConfig":
        exp = self.experiment.model_copy(update={"seed": int(seed)})
        return self.model_copy(update={"experiment": ExperimentSection.model_validate(exp.model_dump())})


def _describe(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        msg = e["msg"]
        if e["type"] == "extra_forbidden":
            msg = "unknown key"
        parts.append(f"{loc}: {msg}")
    return "; ".join(parts)


def parse_config(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from None
    try:
        # cross-checks owned by the domain objects
        cfg.experiment.plan()
        cfg.grid.build()
        cfg.model_params()
    except UsageError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def emit_config(cfg: RunConfig) -> str:
    """Canonical JSON: every field present, keys sorted."""
    return json.dumps(cfg.model_dump(mode="json"), sort_keys=True, indent=2, allow_nan=False)


def config_schema() -> dict:
    return RunConfig.model_json_schema()


def run_hash(cfg: RunConfig) -> str:
    """Twelve hex digits identifying a run; independent of ``output_dir``."""
    d = cfg.model_dump(mode="json")
    d.pop("output_dir")
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]

