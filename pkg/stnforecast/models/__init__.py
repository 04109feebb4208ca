from stnforecast.models.config import PRESETS, ModelConfig, Variant, preset
from stnforecast.models.stn import StnModel, build_model, count_macs, count_params, forward, loss_l2
