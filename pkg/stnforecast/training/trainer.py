import logging
import math
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import BaseModel
from tqdm import tqdm

from stnforecast.core.errors import ContractError, TrainingError
from stnforecast.core.tensor import Tape, backward
from stnforecast.data.patches import PatchDataset
from stnforecast.models.stn import StnModel, forward, loss_l2
from stnforecast.training.checkpoint import save_checkpoint
from stnforecast.training.objects import EpochRecord, HistoryLog, TrainConfig, TrainState
from stnforecast.training.optim import Adam, AdamState, clip_grad_norm

logger = logging.getLogger(__name__)

BEST_CHECKPOINT = "best.stnc"
LAST_CHECKPOINT = "last.stnc"
HISTORY_CSV = "history.csv"


class TrainResult(BaseModel):
    history: List[EpochRecord]
    best_val: float
    gap: float
    steps: int
    stopped_early: bool = False
    best_checkpoint: Optional[str] = None
    last_checkpoint: Optional[str] = None

    def to_json(self):
        return self.model_dump_json()

    def __str__(self) -> str:
        return self.model_dump_json(indent=2)


def epoch_order(size: int, seed: int, epoch: int, cap: Optional[int] = None) -> np.ndarray:
    """Sample order of one epoch; depends only on (seed, epoch) so resumed runs replay it."""
    order = np.random.default_rng([seed, epoch]).permutation(size)
    return order[:cap] if cap else order


def evaluate_loss(model: StnModel, dataset: PatchDataset, batch_size: int = 256) -> float:
    """Sample-weighted mean L2 loss with batch norm in inference mode; never records a tape."""
    was_training = model.training
    model.eval()
    total = 0.0
    try:
        for start in range(0, len(dataset), batch_size):
            inputs, targets = dataset.batch(np.arange(start, min(start + batch_size, len(dataset))))
            loss = loss_l2(forward(model, inputs), targets)
            total += loss.item() * len(inputs)
    finally:
        model.train(was_training)
    return total / len(dataset)


class Trainer:
    """
    Mini-batch Adam on the L2 loss. Checkpoints ``last.stnc`` every
    ``checkpoint_every`` epochs and ``best.stnc`` whenever validation improves.
    """

    def __init__(self, model: StnModel, config: TrainConfig, out_dir=None, state: Optional[TrainState] = None,
                 progress: bool = False):
        self.model = model
        self.config = config
        self.out_dir = Path(out_dir) if out_dir else None
        self.params = model.parameters()
        self.state = state or TrainState(config=config, adam=AdamState.zeros_like(self.params))
        self.state.config = config
        self.optimizer = Adam(self.params, config.lr, (config.beta1, config.beta2), config.eps, self.state.adam)
        self.history = HistoryLog(self.state.history)
        self.progress = progress
        self.last_checkpoint: Optional[Path] = None
        self.best_checkpoint: Optional[Path] = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            if (self.out_dir / LAST_CHECKPOINT).exists():
                self.last_checkpoint = self.out_dir / LAST_CHECKPOINT
            if (self.out_dir / BEST_CHECKPOINT).exists():
                self.best_checkpoint = self.out_dir / BEST_CHECKPOINT

    def train_step(self, inputs: np.ndarray, targets: np.ndarray) -> float:
        self.model.train()
        with Tape() as tape:
            loss = loss_l2(forward(self.model, inputs), targets)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(
                f"loss diverged to {value} at step {self.state.step + 1}",
                last_checkpoint=str(self.last_checkpoint) if self.last_checkpoint else None,
            )
        backward(tape, loss, leaves=list(self.params.values()))
        grads = {name: p.grad for name, p in self.params.items()}
        grads, norm = clip_grad_norm(grads, self.config.clip_norm)
        try:
            self.optimizer.step(grads)
        except TrainingError as e:
            e.last_checkpoint = str(self.last_checkpoint) if self.last_checkpoint else None
            raise
        self.state.step += 1
        return value

    def run_epoch(self, dataset: PatchDataset, epoch: int) -> float:
        order = epoch_order(len(dataset), self.config.seed, epoch, self.config.samples_per_epoch)
        batches = range(0, len(order), self.config.batch_size)
        total = 0.0
        for start in tqdm(batches, desc=f"epoch {epoch}", disable=not self.progress, leave=False):
            indices = order[start:start + self.config.batch_size]
            inputs, targets = dataset.batch(indices)
            total += self.train_step(inputs, targets) * len(indices)
        return total / len(order)

    def _save(self, name: str) -> Path:
        self.state.history = list(self.history.fact_epochs)
        return save_checkpoint(self.model, self.state, self.out_dir / name)

    def fit(self, dataset: PatchDataset, val_dataset: PatchDataset) -> TrainResult:
        if len(dataset) == 0 or len(val_dataset) == 0:
            raise ContractError("training and validation datasets must be non-empty")
        self.state.feature = dataset.feature
        stopped_early = False
        for epoch in range(self.state.epoch + 1, self.config.epochs + 1):
            train_loss = self.run_epoch(dataset, epoch)
            val_loss = evaluate_loss(self.model, val_dataset, max(self.config.batch_size, 256))
            record = self.history.save_epoch_event(epoch, self.state.step, train_loss, val_loss)
            self.state.epoch = epoch
            logger.info("%s", record)
            if self.out_dir is not None:
                if record.gap == 0.0:
                    self.best_checkpoint = self._save(BEST_CHECKPOINT)
                if epoch % self.config.checkpoint_every == 0 or epoch == self.config.epochs:
                    self.last_checkpoint = self._save(LAST_CHECKPOINT)
                self.history.save_csv(self.out_dir / HISTORY_CSV)
            if self.config.patience and self.history.epochs_since_best() >= self.config.patience:
                logger.info("no validation improvement for %d epochs, stopping", self.config.patience)
                stopped_early = True
                if self.out_dir is not None:
                    self.last_checkpoint = self._save(LAST_CHECKPOINT)
                break
        self.state.history = list(self.history.fact_epochs)
        return TrainResult(
            history=self.history.fact_epochs,
            best_val=self.history.best_val,
            gap=self.history.gap,
            steps=self.state.step,
            stopped_early=stopped_early,
            best_checkpoint=str(self.best_checkpoint) if self.best_checkpoint else None,
            last_checkpoint=str(self.last_checkpoint) if self.last_checkpoint else None,
        )


def train(model: StnModel, dataset: PatchDataset, val_dataset: PatchDataset, config: TrainConfig,
          out_dir=None, state: Optional[TrainState] = None, progress: bool = False) -> TrainResult:
    """Train ``model`` in place and return the epoch history; resumes from ``state`` when given."""
    return Trainer(model, config, out_dir, state, progress).fit(dataset, val_dataset)
