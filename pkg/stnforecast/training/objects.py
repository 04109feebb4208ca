import math
from io import StringIO
from typing import List, Optional

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from stnforecast.training.optim import AdamState


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

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

    def to_json(self):
        return self.model_dump_json()

    def __str__(self) -> str:
        return self.model_dump_json(indent=2)


class EpochRecord(BaseModel):
    epoch: int
    steps: int
    train_loss: float
    val_loss: float
    best_val: float
    gap: float

    def __str__(self) -> str:
        return (f"epoch {self.epoch}: train {self.train_loss:.6f} val {self.val_loss:.6f} "
                f"best {self.best_val:.6f} gap {self.gap:.6f}")


class HistoryLog:
    """
    Fact table of finished epochs. ``gap`` is the latest validation loss
    minus the best one seen so far.
    """

    COLUMNS = ["epoch", "steps", "train_loss", "val_loss", "best_val", "gap"]

    def __init__(self, records: Optional[List[EpochRecord]] = None):
        self.fact_epochs: List[EpochRecord] = list(records or [])

    def save_epoch_event(self, epoch: int, steps: int, train_loss: float, val_loss: float) -> EpochRecord:
        best = min([val_loss] + [r.val_loss for r in self.fact_epochs if not math.isnan(r.val_loss)])
        record = EpochRecord(epoch=epoch, steps=steps, train_loss=train_loss, val_loss=val_loss,
                             best_val=best, gap=val_loss - best)
        self.fact_epochs.append(record)
        return record

    @property
    def best_val(self) -> float:
        return self.fact_epochs[-1].best_val if self.fact_epochs else float("inf")

    @property
    def gap(self) -> float:
        return self.fact_epochs[-1].gap if self.fact_epochs else 0.0

    def epochs_since_best(self) -> int:
        if not self.fact_epochs:
            return 0
        best_epoch = min(r.epoch for r in self.fact_epochs if r.val_loss == self.best_val)
        return self.fact_epochs[-1].epoch - best_epoch

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.model_dump() for r in self.fact_epochs], columns=self.COLUMNS)

    def to_csv(self, float_format: str = "%.17g") -> str:
        return self.to_frame().to_csv(index=False, float_format=float_format)

    @classmethod
    def from_csv_text(cls, text: str) -> "HistoryLog":
        if not text.strip():
            return cls()
        frame = pd.read_csv(StringIO(text), float_precision="round_trip")
        return cls([EpochRecord(**row) for row in frame.to_dict(orient="records")])

    def save_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.9g")

    def __len__(self) -> int:
        return len(self.fact_epochs)


class TrainState(BaseModel):
    """Everything besides the model that a resumed run needs."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: TrainConfig = Field(default_factory=TrainConfig)
    epoch: int = 0
    step: int = 0
    feature: str = "internet"
    adam: AdamState = Field(default_factory=AdamState)
    history: List[EpochRecord] = Field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.config.seed

    def __str__(self) -> str:
        return f"TrainState(epoch={self.epoch}, step={self.step}, seed={self.seed}, adam_t={self.adam.t})"
