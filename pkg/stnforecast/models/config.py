from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field

from stnforecast.core.errors import ConfigError


class Variant(str, Enum):
    STN = "STN"
    STN_TF = "STN-TF"
    STN_SLSTM = "STN-sLSTM"
    STN_SLSTM_TF = "STN-sLSTM-TF"
    LSTM_FLAT = "LSTM-flat"
    SLSTM_FLAT = "sLSTM-flat"

    @property
    def uses_slstm(self) -> bool:
        return self in (Variant.STN_SLSTM, Variant.STN_SLSTM_TF, Variant.SLSTM_FLAT)

    @property
    def uses_transformer(self) -> bool:
        return self in (Variant.STN_TF, Variant.STN_SLSTM_TF)

    @property
    def is_flat(self) -> bool:
        return self in (Variant.LSTM_FLAT, Variant.SLSTM_FLAT)


class ModelConfig(BaseModel):
    """
    Architecture hyperparameters:
    h hidden size, b STN blocks, a sLSTM heads, l sLSTM layers, f fusion heads.
    """

    model_config = ConfigDict(extra="forbid", use_enum_values=False)

    h: int = Field(default=16, gt=0)
    b: int = Field(default=1, gt=0)
    a: int = Field(default=2, gt=0)
    l: int = Field(default=1, gt=0)
    f: int = Field(default=2, gt=0)
    blocks: int = Field(default=1, gt=0)
    variant: Variant = Variant.STN_SLSTM_TF
    r: int = Field(default=5, ge=0)
    n: int = Field(default=6, gt=0)
    tau: int = Field(default=1, gt=0)
    conv_channels: Optional[List[int]] = None
    mlp_hidden: Optional[int] = Field(default=None, gt=0)
    convlstm_channels: Optional[int] = Field(default=None, gt=0)
    feedforward: bool = True

    @property
    def patch(self) -> int:
        return 2 * self.r + 1

    @property
    def channel_plan(self) -> List[int]:
        """Conv3D widths after each of the three stages: h/4, h/2, h by default."""
        if self.conv_channels:
            return list(self.conv_channels)
        return [max(1, self.h // 4), max(1, self.h // 2), self.h]

    @property
    def head_width(self) -> int:
        return self.mlp_hidden or self.h

    @property
    def convlstm_width(self) -> int:
        return self.convlstm_channels or max(1, self.h // 4)

    @property
    def feedforward_dim(self) -> int:
        return 2 * self.h if self.feedforward else 0

    def check(self):
        """Divisibility rules the field validators cannot express."""
        if self.conv_channels is not None and (len(self.conv_channels) != 3 or min(self.conv_channels) < 1):
            raise ConfigError(f"conv_channels must be three positive widths, got {self.conv_channels}")
        if self.variant.uses_slstm and self.h % self.a:
            raise ConfigError(f"hidden size h={self.h} is not divisible by sLSTM heads a={self.a}")
        if self.variant.uses_transformer and self.h % self.f:
            raise ConfigError(f"embedding width d=h={self.h} is not divisible by fusion heads f={self.f}")
        return self

    def to_json(self):
        return self.model_dump_json()

    def __str__(self) -> str:
        return self.model_dump_json(indent=2)


# explored configurations, frozen as presets
PRESETS: Dict[str, Dict] = {
    "table2-best": dict(h=64, b=2, a=4, l=2, f=8),
    "table2-2": dict(h=64, b=2, a=2, l=1, f=8),
    "table2-3": dict(h=64, b=1, a=8, l=1, f=2),
    "table2-4": dict(h=64, b=2, a=8, l=2, f=2),
    "table2-5": dict(h=64, b=2, a=8, l=1, f=8),
    "desk": dict(h=16, b=1, a=2, l=1, f=2),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})
