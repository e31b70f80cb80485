"""
Experiment configuration.

An experiment is one document with four blocks (model, constraints,
utility, numerics). JSON is the canonical format; `.yaml`/`.yml` files are
read with PyYAML. The builders at the bottom turn a validated config into
engine objects.
"""

import json
import logging
from pathlib import Path
from typing import Annotated, List, Literal, Optional, Tuple, Union

import numpy as np
import yaml
from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from .engine.constraints import ConstraintSet
from .engine.errors import ConfigError, PortfolioError
from .engine.market import (
    AffineCoefficients,
    CoefficientFamily,
    ConstantCoefficients,
    FactorModel,
    OUFactor,
    SigmoidCoefficients,
)
from .engine.settings import SolverSettings
from .engine.utility import ConstantLevel, LevelFunction, SigmoidLevel, UtilitySpec

logger = logging.getLogger(__name__)

# --- Constants ---
YAML_SUFFIXES = (".yaml", ".yml")


def _as_matrix(value):
    """Accept a scalar or a one-element list for one-asset volatility."""
    if isinstance(value, (int, float)):
        return [[float(value)]]
    if isinstance(value, list) and len(value) == 1 and not isinstance(value[0], list):
        return [value]
    return value


def _as_vector(value):
    if isinstance(value, (int, float)):
        return [float(value)]
    return value


Matrix = Annotated[List[List[float]], BeforeValidator(_as_matrix)]
Vector = Annotated[List[float], BeforeValidator(_as_vector)]


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# --- Model block ---
class ConstantFamilyConfig(_Block):
    family: Literal["constant"]
    r: float
    mu: Vector
    sigma: Matrix

    def build(self) -> CoefficientFamily:
        return ConstantCoefficients(self.r, self.mu, self.sigma)


class AffineFamilyConfig(_Block):
    family: Literal["affine"]
    r0: float
    r1: float = 0.0
    mu0: Vector
    mu1: Vector
    sigma: Matrix
    y_low: float
    y_high: float

    def build(self) -> CoefficientFamily:
        return AffineCoefficients(
            self.r0, self.r1, self.mu0, self.mu1, self.sigma, self.y_low, self.y_high
        )


class SigmoidFamilyConfig(_Block):
    family: Literal["sigmoid"]
    r0: float
    r1: float = 0.0
    mu0: Vector
    mu1: Vector
    sigma: Matrix
    vol_mod: float = Field(0.0, gt=-1.0)
    slope: float = 1.0
    center: float = 0.0

    def build(self) -> CoefficientFamily:
        return SigmoidCoefficients(
            self.r0,
            self.r1,
            self.mu0,
            self.mu1,
            self.sigma,
            self.vol_mod,
            self.slope,
            self.center,
        )


FamilyConfig = Annotated[
    Union[ConstantFamilyConfig, AffineFamilyConfig, SigmoidFamilyConfig],
    Field(discriminator="family"),
]


class FactorConfig(_Block):
    kappa: float = Field(0.0, ge=0.0)
    mean: float = 0.0
    beta: float = 0.3
    y0: float = 0.0

    @field_validator("beta")
    @classmethod
    def _beta_nonzero(cls, value: float) -> float:
        if value == 0.0:
            raise ValueError("beta must be nonzero")
        return value


class BoundsConfig(_Block):
    """Optional overrides of the analytic certificate."""

    r_bar: Optional[float] = None
    r_lower: Optional[float] = None
    M0: Optional[float] = Field(None, ge=0.0)
    kappa0: Optional[float] = Field(None, ge=0.0)


class ModelConfig(_Block):
    coefficients: FamilyConfig
    factor: FactorConfig = FactorConfig()
    q: Optional[Vector] = None
    bounds: BoundsConfig = BoundsConfig()


# --- Constraint block ---
class ConstraintsConfig(_Block):
    kind: Literal[
        "unconstrained",
        "no_short",
        "borrow_cap",
        "no_short_borrow_cap",
        "box",
        "halfspaces",
    ] = "unconstrained"
    a: Optional[float] = Field(None, ge=0.0)
    lo: Optional[List[float]] = None
    hi: Optional[List[float]] = None
    normals: Optional[Matrix] = None
    offsets: Optional[List[float]] = None

    @model_validator(mode="after")
    def _parameters_present(self) -> "ConstraintsConfig":
        needs = {
            "borrow_cap": ("a",),
            "no_short_borrow_cap": ("a",),
            "box": ("lo", "hi"),
            "halfspaces": ("normals", "offsets"),
        }.get(self.kind, ())
        missing = [name for name in needs if getattr(self, name) is None]
        if missing:
            raise ValueError(f"constraint '{self.kind}' needs {missing}")
        return self

    def build(self, n: int) -> ConstraintSet:
        if self.kind == "unconstrained":
            return ConstraintSet.unconstrained(n)
        if self.kind == "no_short":
            return ConstraintSet.no_short(n)
        if self.kind == "borrow_cap":
            return ConstraintSet.borrow_cap(n, self.a)
        if self.kind == "no_short_borrow_cap":
            return ConstraintSet.no_short_borrow_cap(n, self.a)
        if self.kind == "box":
            return ConstraintSet.box(self.lo, self.hi)
        return ConstraintSet.halfspaces(self.normals, self.offsets)


# --- Utility block ---
class LevelConfig(_Block):
    family: Literal["constant", "sigmoid"] = "constant"
    value: float = Field(1.0, gt=0.0, le=1.0)
    low: Optional[float] = Field(None, gt=0.0, le=1.0)
    high: Optional[float] = Field(None, gt=0.0, le=1.0)
    slope: float = 1.0
    center: float = 0.0

    @model_validator(mode="after")
    def _sigmoid_levels(self) -> "LevelConfig":
        if self.family == "sigmoid" and (self.low is None or self.high is None):
            raise ValueError("sigmoid level needs 'low' and 'high'")
        return self

    def build(self) -> LevelFunction:
        if self.family == "constant":
            return ConstantLevel(self.value)
        return SigmoidLevel(self.low, self.high, self.slope, self.center)


class UtilityConfig(_Block):
    mode: Literal["power", "log"] = "power"
    alpha: Optional[float] = Field(None, lt=1.0)
    gamma: float = Field(..., gt=0.0, le=1.0)
    rho: float = Field(..., ge=0.0)
    tau: float = Field(1.0, gt=0.0)
    h: LevelConfig = LevelConfig()
    m: Optional[float] = Field(None, gt=0.0, le=1.0)

    @model_validator(mode="after")
    def _alpha_for_power(self) -> "UtilityConfig":
        if self.mode == "power" and (self.alpha is None or self.alpha == 0.0):
            raise ValueError("power utility needs alpha < 1, alpha != 0")
        return self

    @property
    def level_floor(self) -> float:
        """m, defaulting to the infimum of h."""
        return self.m if self.m is not None else self.h.build().lower

    def build(self) -> UtilitySpec:
        return UtilitySpec(
            alpha=self.alpha,
            gamma=self.gamma,
            rho=self.rho,
            tau=self.tau,
            h=self.h.build(),
            mode=self.mode,
        )


# --- Numerics block ---
class NumericsConfig(_Block):
    seed: int = Field(..., ge=0)
    paths: int = Field(65536, ge=2)
    steps_per_period: Optional[int] = Field(None, ge=1)
    dt: Optional[float] = Field(None, gt=0.0)
    grid_nodes: int = Field(41, ge=1)
    grid_width: float = Field(5.0, gt=0.0)
    policy_bins: int = Field(5, ge=1)
    tol: float = Field(1e-4, gt=0.0)
    max_iterations: int = Field(200, ge=1)
    seed_schedule: Literal["rotate", "frozen"] = "rotate"
    policy_max_iter: int = Field(200, ge=1)
    policy_tol: float = Field(1e-8, gt=0.0)
    dual_sweeps: int = Field(30, ge=0)
    dual_rel_tol: float = Field(1e-7, gt=0.0)
    dual_max_evals: int = Field(60, ge=1)
    eta_bound: float = Field(2.0, gt=0.0)
    periods: int = Field(8, ge=1)
    x0: float = Field(1.0, gt=0.0)
    log_cap: float = Field(700.0, gt=0.0)
    antithetic: bool = True
    workers: int = Field(1, ge=1)
    certify: bool = True

    @model_validator(mode="after")
    def _even_antithetic_paths(self) -> "NumericsConfig":
        if self.antithetic and self.paths % 2:
            raise ValueError("antithetic sampling needs an even path count")
        if self.steps_per_period is not None and self.dt is not None:
            raise ValueError("give either 'steps_per_period' or 'dt'")
        return self

    def build(self, tau: float) -> SolverSettings:
        if self.steps_per_period is not None:
            steps = self.steps_per_period
        elif self.dt is not None:
            steps = max(1, int(np.ceil(tau / self.dt - 1e-9)))
        else:
            steps = SolverSettings.steps_per_period
        fields = self.model_dump(exclude={"steps_per_period", "dt"})
        return SolverSettings(steps_per_period=steps, **fields)


class ExperimentConfig(_Block):
    """One experiment: market, constraints, preferences and numerics."""

    model: ModelConfig
    constraints: ConstraintsConfig = ConstraintsConfig()
    utility: UtilityConfig
    numerics: NumericsConfig

    def with_overrides(
        self, paths: Optional[int] = None, seed: Optional[int] = None
    ) -> "ExperimentConfig":
        """Apply the command-line overrides, re-validating the result."""
        changes = {k: v for k, v in (("paths", paths), ("seed", seed)) if v is not None}
        if not changes:
            return self
        try:
            numerics = NumericsConfig.model_validate(
                self.numerics.model_dump() | changes
            )
        except ValidationError as e:
            raise ConfigError(f"Invalid override: {e}") from e
        return self.model_copy(update={"numerics": numerics})

    def to_json(self) -> str:
        return self.model_dump_json(indent=2, exclude_none=True)


# --- Loading ---
def parse_config(data: dict) -> ExperimentConfig:
    """
    Validate a raw config mapping.

    Raises:
        ConfigError: If the document violates the schema.
    """
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid experiment config:\n{e}") from e


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """
    Read an experiment config from JSON or YAML.

    Args:
        path: Path to the config document.

    Returns:
        The validated ExperimentConfig.

    Raises:
        ConfigError: If the file is missing, unreadable or invalid.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"Cannot read config '{path}': {e}") from e
    try:
        if path.suffix.lower() in YAML_SUFFIXES:
            data = yaml.safe_load(text)
        else:
            data = json.loads(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"Cannot parse config '{path}': {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config '{path}' must hold a mapping at top level.")
    config = parse_config(data)
    logger.info(f"Loaded experiment config from {path}")
    return config


# --- Builders ---
def build_model(config: ExperimentConfig) -> FactorModel:
    """
    Factor model with bounds from the family certificate plus overrides.

    Raises:
        ConfigError: If the engine rejects the parameters.
    """
    block = config.model
    try:
        coefficients = block.coefficients.build()
        q = np.zeros(coefficients.n) if block.q is None else block.q
        factor = OUFactor(**block.factor.model_dump())
        return FactorModel.from_families(
            coefficients,
            factor,
            q,
            m=config.utility.level_floor,
            **block.bounds.model_dump(),
        )
    except PortfolioError as e:
        raise ConfigError(f"Invalid model block: {e}") from e


def build_experiment(
    config: ExperimentConfig,
) -> Tuple[FactorModel, ConstraintSet, UtilitySpec, SolverSettings]:
    """All engine objects of an experiment."""
    model = build_model(config)
    try:
        K = config.constraints.build(model.n)
        spec = config.utility.build()
    except PortfolioError as e:
        raise ConfigError(f"Invalid constraint or utility block: {e}") from e
    settings = config.numerics.build(spec.tau)
    return model, K, spec, settings
