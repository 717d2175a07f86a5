"""Experiment configuration schema.

Every section rejects unknown keys. Defaults reproduce the desk-scale setup.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigurationError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ShiftConfig(_Strict):
    kind: Literal["rotation", "affine", "class_conditional_offset"] = "rotation"
    magnitude: float = math.pi / 4
    noise_std: float = Field(0.0, ge=0)
    seed: int = 0


class DataConfig(_Strict):
    geometry: Literal["blobs", "moons"] = "moons"
    classes: int = Field(2, ge=2)
    dim: int = Field(2, ge=2)
    n_per_class: int = Field(200, ge=1)
    cluster_std: float = Field(0.4, ge=0)
    shift: ShiftConfig = ShiftConfig()
    source_path: Optional[str] = None
    target_path: Optional[str] = None


class ModelConfig(_Strict):
    generator_hidden: int = Field(64, ge=1)
    encoder_hidden: int = Field(32, ge=1)
    latent_dim: int = Field(16, ge=1)
    discriminator_hidden: int = Field(64, ge=1)
    discriminator_dropout: float = Field(0.0, ge=0, lt=1)
    codebook_size: int = Field(32, ge=1)
    distance: Literal["squared_euclidean", "cosine"] = "squared_euclidean"
    codebook_init_scale: float = Field(1.0, gt=0)
    commitment_beta: float = Field(0.25, ge=0)


class TrainConfig(_Strict):
    lambdas: Tuple[float, float, float, float, float] = (1.0, 1.0, 0.01, 0.01, 0.1)
    epochs: int = Field(100, ge=1)
    batch_size: int = Field(64, ge=1)
    learning_rate: float = Field(0.05, gt=0)
    lr_decay: bool = True
    momentum: float = Field(0.9, ge=0)
    weight_decay: float = Field(5e-4, ge=0)
    seed: int = 0
    tau_start: float = Field(1.0, gt=0)
    tau_end: float = Field(0.5, gt=0)
    entropy_threshold: Optional[float] = Field(None, ge=0)
    sigma_scale: float = Field(0.1, ge=0)
    warmup_epochs: int = Field(2, ge=0)
    grl_gamma: float = Field(10.0, ge=0)
    grad_clip: Optional[float] = Field(20.0, gt=0)

    @field_validator("lambdas")
    @classmethod
    def _check_lambdas(cls, v):
        if any(x < 0 for x in v):
            raise ValueError("lambda weights must be >= 0")
        if v[0] <= 0:
            raise ValueError("lambda1 (source risk) must be > 0")
        return v


class VariantConfig(_Strict):
    name: str = "gvida"


class OutputConfig(_Strict):
    runs_dir: Optional[str] = None
    run_name: Optional[str] = None
    checkpoint: bool = True


class ExperimentConfig(_Strict):
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    variant: VariantConfig = VariantConfig()
    output: OutputConfig = OutputConfig()
    seeds: List[int] = [0]
    task: str = "synthetic"

    @model_validator(mode="after")
    def _check_variant(self):
        from .baselines import parse_variant  # local: baselines imports this module

        try:
            parse_variant(self.variant.name)
        except ConfigurationError as exc:
            raise ValueError(str(exc)) from None
        return self


def _format_errors(exc: ValidationError, origin: str) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{origin}: {loc}: {err['msg']}")
    return "\n".join(lines)


def parse_config(data: dict, origin: str = "<config>") -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(_format_errors(exc, origin)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"{path}: config file not found")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a JSON object")
    return parse_config(data, str(path))


def apply_overrides(cfg: ExperimentConfig, overrides: dict, origin: str = "<cli>") -> ExperimentConfig:
    """Return a copy with dotted-path overrides applied, e.g. {"train.epochs": 5}."""
    data = cfg.model_dump(mode="json")
    for dotted, value in overrides.items():
        node = data
        parts = dotted.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigurationError(f"{origin}: unknown config path {dotted}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigurationError(f"{origin}: unknown config path {dotted}")
        node[parts[-1]] = value
    return parse_config(data, origin)


def json_schema() -> dict:
    return ExperimentConfig.model_json_schema()
