from stnforecast.training.checkpoint import load_checkpoint, read_sections, save_checkpoint
from stnforecast.training.objects import EpochRecord, HistoryLog, TrainConfig, TrainState
from stnforecast.training.optim import Adam, AdamState, adam_step, clip_grad_norm
from stnforecast.training.trainer import TrainResult, Trainer, epoch_order, evaluate_loss, train
