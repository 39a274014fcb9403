"""Experiment configuration: schema, defaults and loading."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigurationError
from .runner import METHODS

CONFIG_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Strict):
    """Where the training and test data come from.

    ``toy``: the emotion x degradation benchmark with disjoint train/test cells.
    ``mixed``: three source datasets split by the fold plan, with
    ``move_fraction`` of each test cell moved into training.
    ``file``: datasets previously written by ``gen``.
    ``spec``: explicit synthetic specs (``spec`` for training, ``test_spec``).
    """

    source: Literal["toy", "mixed", "file", "spec"] = "toy"
    spec: Optional[dict] = None
    test_spec: Optional[dict] = None
    n_train: int = Field(60, ge=1)
    n_test: int = Field(20, ge=1)
    per_cell: int = Field(30, ge=1)
    blur: float = Field(1.5, ge=0)
    noise: float = Field(0.35, ge=0)
    tint: float = 0.25
    fold: int = 1
    fold_plan: Optional[list[list[int]]] = None
    move_fraction: float = Field(0.1, ge=0, lt=1)
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    data_seed: Optional[int] = None

    @model_validator(mode="after")
    def _paths(self):
        if self.source == "file":
            for name in ("train_path", "test_path"):
                p = getattr(self, name)
                if p is None:
                    raise ValueError(f"data.source = file needs data.{name}")
                if not Path(p).with_suffix(".json").exists():
                    raise ValueError(f"data.{name} {p!r} does not exist")
        if self.source == "spec" and (self.spec is None or self.test_spec is None):
            raise ValueError("data.source = spec needs data.spec and data.test_spec")
        return self


class OptimConfig(_Strict):
    lr: float = Field(2e-4, gt=0)
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.999, gt=0, lt=1)
    epsilon: float = Field(1e-8, gt=0)
    warmup_steps: Optional[int] = Field(None, ge=0)
    warmup_fraction: float = Field(0.05, ge=0, le=1)
    epochs: int = Field(80, ge=1)
    batch_size: int = Field(32, ge=1)


class WeightsConfig(_Strict):
    lambda1: float = Field(1.0, ge=0)
    lambda2: float = Field(5e-4, ge=0)
    lambda3: float = Field(1.0, ge=0)


class ArchSection(_Strict):
    width: int = Field(16, ge=1)
    backbone_stride: int = Field(2, ge=1)


class ExperimentConfig(_Strict):
    format: Literal["iernlab-config"] = "iernlab-config"
    format_version: int = CONFIG_VERSION
    method: str = "iern"
    data: DataConfig = Field(default_factory=DataConfig)
    weights: WeightsConfig = Field(default_factory=WeightsConfig)
    optimizer: OptimConfig = Field(default_factory=OptimConfig)
    arch: ArchSection = Field(default_factory=ArchSection)
    seed: int = 0
    out: str = "runs/default"
    # compare only
    methods: list[str] = Field(default_factory=lambda: ["baseline", "iern"])
    seeds: list[int] = Field(default_factory=lambda: [0])
    lambda2_grid: Optional[list[float]] = None

    @field_validator("format_version")
    @classmethod
    def _version(cls, v):
        if v != CONFIG_VERSION:
            raise ValueError(f"unsupported config format_version {v}")
        return v

    @field_validator("method")
    @classmethod
    def _method(cls, v):
        if v not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        return v

    @field_validator("methods")
    @classmethod
    def _methods(cls, v):
        bad = [m for m in v if m not in METHODS]
        if bad or not v:
            raise ValueError(f"methods must be a non-empty subset of {METHODS}")
        return v

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v:
            raise ValueError("seeds must be non-empty")
        return v


def defaults() -> dict:
    return ExperimentConfig().model_dump()


def from_dict(d: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(d)
    except ValidationError as exc:
        raise ConfigurationError(str(exc)) from exc


def load(path: str | Path | None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a JSON config (or start from defaults) and apply top-level overrides."""
    d: dict = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigurationError(f"{path}: top level must be an object")
    d = {**d, **{k: v for k, v in (overrides or {}).items() if v is not None}}
    return from_dict(d)
