from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from stnforecast.core.errors import ConfigError, InputError, RangeError

TIA_FEATURES = ["sms_in", "sms_out", "call_in", "call_out", "internet"]

NORM_EPS = 1e-8


class GridSeries(BaseModel):
    """
    Traffic snapshots of an I×J grid over T intervals with F feature channels.
    ``values`` is ``T×I×J×F`` float32.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray
    start_time: int = 0
    interval: int = 600
    feature_names: List[str] = Field(default_factory=lambda: ["internet"])

    @field_validator("values", mode="before")
    def parse_values(cls, v):
        array = np.ascontiguousarray(np.asarray(v, dtype=np.float32))
        if array.ndim == 3:
            array = array[..., None]
        if array.ndim != 4 or min(array.shape) < 1:
            raise InputError(f"grid values must be T×I×J×F with every extent ≥ 1, got {array.shape}")
        if not np.isfinite(array).all():
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(array))[0])
            raise InputError(f"grid value at {bad} is not finite")
        array.setflags(write=False)
        return array

    @field_validator("interval")
    def positive_interval(cls, v):
        if v <= 0:
            raise InputError(f"interval must be positive, got {v}")
        return v

    @model_validator(mode="after")
    def names_match(self):
        if len(self.feature_names) != self.values.shape[3]:
            raise InputError(f"{len(self.feature_names)} feature names for {self.values.shape[3]} channels")
        return self

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def I(self) -> int:
        return self.values.shape[1]

    @property
    def J(self) -> int:
        return self.values.shape[2]

    @property
    def F(self) -> int:
        return self.values.shape[3]

    def feature_index(self, feature: str) -> int:
        if feature not in self.feature_names:
            raise ConfigError(f"feature {feature!r} not in grid features {self.feature_names}")
        return self.feature_names.index(feature)

    def channel(self, feature: str) -> np.ndarray:
        """The ``T×I×J`` series of one feature."""
        return self.values[..., self.feature_index(feature)]

    def window(self, start: int, stop: int) -> "GridSeries":
        if not 0 <= start < stop <= self.T:
            raise RangeError(f"time window [{start}, {stop}) outside [0, {self.T})")
        return GridSeries(
            values=self.values[start:stop],
            start_time=self.start_time + start * self.interval,
            interval=self.interval,
            feature_names=list(self.feature_names),
        )

    def with_frame(self, frame: np.ndarray, feature: Optional[str] = None) -> "GridSeries":
        """Append one snapshot; an ``I×J`` frame fills ``feature`` and copies the others from the last step."""
        frame = np.asarray(frame, dtype=np.float32)
        if frame.shape == (self.I, self.J):
            full = self.values[-1].copy()
            full[..., self.feature_index(feature or self.feature_names[0])] = frame
            frame = full
        if frame.shape != (self.I, self.J, self.F):
            raise InputError(f"frame {frame.shape} does not fit grid {self.I}×{self.J}×{self.F}")
        return GridSeries(
            values=np.concatenate([self.values, frame[None]], axis=0),
            start_time=self.start_time,
            interval=self.interval,
            feature_names=list(self.feature_names),
        )

    def to_json(self):
        return self.model_dump_json(exclude={"values"})

    def __str__(self) -> str:
        return f"GridSeries(T={self.T}, I={self.I}, J={self.J}, F={self.F}, interval={self.interval}s)"


class PatchSample(BaseModel):
    """One supervised example: normalized ``n×P×P`` window and ``tau`` normalized targets."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    input: np.ndarray
    target: np.ndarray
    cell: Tuple[int, int]
    t_end: int

    def __str__(self) -> str:
        return f"PatchSample(cell={self.cell}, t_end={self.t_end}, input={self.input.shape}, target={self.target.shape})"


class NormStats(BaseModel):
    """Per-cell mean and population standard deviation of the training span."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    mean: np.ndarray
    std: np.ndarray
    eps: float = NORM_EPS

    @field_validator("mean", "std", mode="before")
    def as_float64(cls, v):
        return np.asarray(v, dtype=np.float64)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.mean.shape

    def _scale(self) -> np.ndarray:
        return np.where(self.std < self.eps, 0.0, 1.0 / np.maximum(self.std, self.eps))

    def apply(self, x: np.ndarray) -> np.ndarray:
        """z-score ``...×I×J`` values; cells with std < eps map to 0."""
        return ((np.asarray(x, dtype=np.float64) - self.mean) * self._scale())

    def invert(self, z: np.ndarray) -> np.ndarray:
        """Back to original units; cells with std < eps map to their mean."""
        std = np.where(self.std < self.eps, 0.0, self.std)
        return np.asarray(z, dtype=np.float64) * std + self.mean

    def apply_cell(self, x, i: int, j: int):
        if self.std[i, j] < self.eps:
            return np.zeros_like(np.asarray(x, dtype=np.float64))
        return (np.asarray(x, dtype=np.float64) - self.mean[i, j]) / self.std[i, j]

    def invert_cell(self, z, i: int, j: int):
        std = 0.0 if self.std[i, j] < self.eps else self.std[i, j]
        return np.asarray(z, dtype=np.float64) * std + self.mean[i, j]

    def __str__(self) -> str:
        return f"NormStats(shape={self.shape}, mean≈{self.mean.mean():.4f}, std≈{self.std.mean():.4f})"


class SynthScenario(BaseModel):
    """Parameters of the synthetic grid generator (10-minute intervals)."""

    model_config = ConfigDict(extra="forbid")

    I: int = Field(default=20, ge=1)
    J: int = Field(default=20, ge=1)
    T: int = Field(default=2016, ge=1)
    base: float = Field(default=100.0, ge=0)
    daily_amp: float = 0.5
    weekly_amp: float = 0.2
    hotspots: int = Field(default=4, ge=0)
    hotspot_gain: float = Field(default=3.0, ge=0)
    hotspot_radius: float = Field(default=2.5, gt=0)
    noise_sd: float = Field(default=5.0, ge=0)
    spike_rate: float = Field(default=0.002, ge=0, le=1)
    spike_scale: float = Field(default=8.0, ge=0)
    diffusion: float = Field(default=0.3, ge=0, le=1)
    start_time: int = 1383260400
    interval: int = Field(default=600, gt=0)
    feature: str = "internet"

    def to_json(self):
        return self.model_dump_json()

    def __str__(self) -> str:
        return self.model_dump_json(indent=2)
