"""
Run configuration: a UTF-8 key=value file read with python-dotenv and
validated by pydantic. Unknown keys are rejected by name.
"""
import logging
import os
from pathlib import Path
from typing import List, Optional, Tuple

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from stnforecast.core.errors import ConfigError
from stnforecast.models.config import PRESETS, ModelConfig, Variant
from stnforecast.training.objects import TrainConfig

logger = logging.getLogger(__name__)

MODEL_KEYS = ("h", "b", "a", "l", "f", "blocks", "variant", "r", "n", "tau", "conv_channels", "mlp_hidden",
              "convlstm_channels", "feedforward")
TRAIN_KEYS = tuple(TrainConfig.model_fields)


def _int_list(v):
    if isinstance(v, str):
        return [int(x) for x in v.replace(" ", "").split(",") if x]
    return v


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    preset: Optional[str] = "desk"
    h: Optional[int] = Field(default=None, gt=0)
    b: Optional[int] = Field(default=None, gt=0)
    a: Optional[int] = Field(default=None, gt=0)
    l: Optional[int] = Field(default=None, gt=0)
    f: Optional[int] = Field(default=None, gt=0)
    blocks: Optional[int] = Field(default=None, gt=0)
    variant: Optional[Variant] = None
    r: Optional[int] = Field(default=None, ge=0)
    n: Optional[int] = Field(default=None, gt=0)
    tau: Optional[int] = Field(default=None, gt=0)
    conv_channels: Optional[List[int]] = None
    mlp_hidden: Optional[int] = Field(default=None, gt=0)
    convlstm_channels: Optional[int] = Field(default=None, gt=0)
    feedforward: Optional[bool] = None

    epochs: int = Field(default=40, gt=0)
    batch_size: int = Field(default=64, gt=0)
    lr: float = Field(default=5e-4, ge=0)
    beta1: float = Field(default=0.9, gt=0, lt=1)
    beta2: float = Field(default=0.999, gt=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    seed: int = Field(default=0, ge=0)
    checkpoint_every: int = Field(default=1, gt=0)
    patience: Optional[int] = Field(default=None, gt=0)
    clip_norm: Optional[float] = Field(default=10.0, gt=0)
    samples_per_epoch: Optional[int] = Field(default=None, gt=0)

    data: Optional[str] = None
    feature: str = Field(default_factory=lambda: os.getenv("STN_FEATURE", "internet"))
    splits: List[float] = Field(default_factory=lambda: [0.70, 0.15, 0.15])
    train_stride: int = Field(default=6, gt=0)
    val_stride: int = Field(default=6, gt=0)
    out_dir: str = Field(default_factory=lambda: os.getenv("STN_OUTPUT_DIR", "runs"))

    @field_validator("conv_channels", mode="before")
    def parse_channels(cls, v):
        return _int_list(v) or None

    @field_validator("splits", mode="before")
    def parse_splits(cls, v):
        if isinstance(v, str):
            return [float(x) for x in v.replace(" ", "").split(",") if x]
        return v

    @field_validator("preset", "patience", "clip_norm", "samples_per_epoch", "data", "variant", "mlp_hidden",
                     "convlstm_channels", "feedforward", "h", "b", "a", "l", "f", "blocks", "r", "n", "tau",
                     mode="before")
    def blank_is_none(cls, v):
        return None if isinstance(v, str) and not v.strip() else v

    def model_settings(self) -> ModelConfig:
        base = {}
        if self.preset:
            if self.preset not in PRESETS:
                raise ConfigError(f"unknown preset {self.preset!r}; known: {', '.join(PRESETS)}")
            base.update(PRESETS[self.preset])
        for key in MODEL_KEYS:
            value = getattr(self, key)
            if value is not None:
                base[key] = value
        return ModelConfig(**base).check()

    def train_settings(self) -> TrainConfig:
        return TrainConfig(**{key: getattr(self, key) for key in TRAIN_KEYS})

    def resolve(self) -> Tuple[ModelConfig, TrainConfig]:
        return self.model_settings(), self.train_settings()

    def resolved_text(self) -> str:
        """The fully-resolved configuration as key=value lines, model keys expanded from the preset."""
        model, _ = self.resolve()
        values = self.model_dump(mode="json")
        values.update(model.model_dump(mode="json"))
        lines = []
        for key, value in values.items():
            if value is None:
                value = ""
            elif isinstance(value, bool):
                value = str(value).lower()
            elif isinstance(value, list):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    def write_resolved(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.resolved_text(), encoding="utf-8")
        return path

    def to_json(self):
        return self.model_dump_json()

    def __str__(self) -> str:
        return self.model_dump_json(indent=2)


def config_error(e: ValidationError, source: str) -> ConfigError:
    first = e.errors()[0]
    key = ".".join(str(p) for p in first["loc"]) or "?"
    return ConfigError(f"{source}: key {key!r}: {first['msg']}")


def load_run_config(path=None, **overrides) -> RunConfig:
    values = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        values.update(dotenv_values(path))
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        config = RunConfig(**values)
        config.resolve()
    except ValidationError as e:
        raise config_error(e, str(path or "config")) from e
    logger.debug("run config %s", config.to_json())
    return config
