"""Experiment configuration: one TOML file fully determines a run.

The file is parsed with tomlkit and validated with the library's own
pydantic models, so unknown keys are rejected and every error names the
dotted key path it refers to.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Literal

import tomlkit
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from tomlkit.exceptions import TOMLKitError

from hamiltonian import OperatorConfig
from problems import PROBLEM_CHOICES, ProblemError, make_problem, params_model
from rollout import Grid
from trainer import Schedule, TrainConfig
from valuenet import NetworkShapeError, ValueNetwork

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(path, message)

    def __str__(self):
        return f"{self.path}: {self.message}" if self.path else self.message


class Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ProblemBlock(Block):
    name: str
    agents: int = Field(1, ge=1)
    horizon: float = Field(1.0, gt=0)
    params: dict[str, Any] = Field(default_factory=dict)

    @field_validator("name")
    @classmethod
    def known_problem(cls, value):
        names = [key for key, _ in PROBLEM_CHOICES]
        if value not in names:
            raise ValueError(f"unknown problem {value!r}; expected one of: {', '.join(names)}")
        return value


class NetBlock(Block):
    widths: list[int] | None = None
    seed: int = 0


class OperatorBlock(OperatorConfig):
    detach_z: bool = False

    def operator_config(self) -> OperatorConfig:
        return OperatorConfig(**self.model_dump(exclude={"detach_z"}))


class TrainBlock(Block):
    backend: Literal["jfb", "implicit", "unrolled"] = "jfb"
    schedule: Schedule = Field(default_factory=Schedule)
    batch_size: int = Field(16, ge=1)
    epochs: int = Field(10, ge=1)
    iters_per_epoch: int = Field(50, ge=1)
    audit_every: int = Field(0, ge=0)
    checkpoint_every: int = Field(0, ge=0)
    log_true_grad: bool = False
    skip_nonfinite: bool = True

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **self.model_dump(exclude={"backend", "schedule"}))


class OutputBlock(Block):
    directory: str | None = None
    formats: list[Literal["csv", "json"]] = Field(default_factory=lambda: ["csv", "json"])
    trajectory: bool = True

    @field_validator("formats")
    @classmethod
    def not_empty(cls, value):
        if not value:
            raise ValueError("at least one output format is required")
        return value


class CompareBlock(Block):
    backends: list[Literal["jfb", "implicit", "unrolled"]] = Field(default_factory=lambda: ["jfb", "unrolled"])
    epochs: int | None = Field(None, ge=1)
    holdout: int = Field(32, ge=1)
    holdout_seed: int = 1


class OracleBlock(Block):
    holdout: int = Field(100, ge=1)
    holdout_seed: int = 12345
    train: bool = True


class NeighborhoodBlock(Block):
    alphas: list[float] = Field(default_factory=lambda: [1e-2, 5e-3, 2.5e-3])
    iterations: int = Field(2000, ge=1)
    window: float = Field(0.2, gt=0, le=1)
    divergence_factor: float = Field(10.0, gt=1)

    @field_validator("alphas")
    @classmethod
    def descending(cls, value):
        if not value or any(a <= 0 for a in value):
            raise ValueError("alphas must be a non-empty list of positive step sizes")
        if any(a < b for a, b in zip(value, value[1:])):
            raise ValueError("alphas must be sorted in descending order")
        return value


class DiagnoseBlock(Block):
    batch: int = Field(16, ge=1)
    seed: int = 0
    power_iters: int = Field(100, ge=10)
    checkpoint: str | None = None


class ExperimentConfig(Block):
    name: str = "run"
    seed: int = 0
    problem: ProblemBlock
    net: NetBlock = Field(default_factory=NetBlock)
    operator: OperatorBlock = Field(default_factory=OperatorBlock)
    grid: Grid = Field(default_factory=Grid)
    train: TrainBlock = Field(default_factory=TrainBlock)
    output: OutputBlock = Field(default_factory=OutputBlock)
    compare: CompareBlock | None = None
    oracle: OracleBlock | None = None
    neighborhood: NeighborhoodBlock | None = None
    diagnose: DiagnoseBlock | None = None

    def dumps(self) -> str:
        return tomlkit.dumps(self.model_dump(mode="json", exclude_none=True))

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_overrides(self, seed: int | None = None, audit_every: int | None = None) -> "ExperimentConfig":
        config = self
        if seed is not None:
            config = config.model_copy(update={"seed": seed})
        if audit_every is not None:
            if audit_every < 0:
                raise ConfigError("train.audit_every", "must be non-negative")
            config = config.model_copy(update={"train": config.train.model_copy(update={"audit_every": audit_every})})
        return config


def _dotted(loc) -> str:
    return ".".join(str(part) for part in loc)


def parse_config(data: dict) -> ExperimentConfig:
    """Validate a raw mapping, then check that every referenced name builds."""
    try:
        config = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        error = exc.errors()[0]
        raise ConfigError(_dotted(error["loc"]), error["msg"]) from exc

    try:
        params = params_model(config.problem.name).model_validate(config.problem.params)
    except ValidationError as exc:
        error = exc.errors()[0]
        raise ConfigError(_dotted(("problem", "params", *error["loc"])), error["msg"]) from exc
    try:
        problem = make_problem(config.problem.name, config.problem.agents, params, config.problem.horizon)
    except ProblemError as exc:
        raise ConfigError("problem.params", str(exc)) from exc

    if abs(config.grid.T - problem.T) > 1e-12:
        raise ConfigError("grid.T", f"must equal problem.horizon={problem.T}, got {config.grid.T}")

    try:
        ValueNetwork(problem.n, config.net.widths, config.net.seed)
    except NetworkShapeError as exc:
        raise ConfigError("net.widths", str(exc)) from exc
    return config


def loads(text: str) -> ExperimentConfig:
    try:
        data = tomlkit.parse(text).unwrap()
    except TOMLKitError as exc:
        raise ConfigError("", f"not valid TOML: {exc}") from exc
    return parse_config(data)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror or exc}") from exc
    config = loads(text)
    logger.debug("loaded %s (hash %s)", path, config.config_hash[:12])
    return config
