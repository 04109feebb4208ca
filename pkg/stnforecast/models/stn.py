"""
Assembly of the STN family: a Conv3D spatial branch and a recurrent temporal
branch (ConvLSTM, sLSTM or LSTM) fused per timestep token, stacked ``b``
times, and decoded by an MLP head into ``tau`` normalized forecasts of the
patch's center cell.
"""
import logging
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from stnforecast.core import ops
from stnforecast.core.errors import DimensionError, InputError
from stnforecast.core.module import Module
from stnforecast.core.tensor import Tensor
from stnforecast.models.config import ModelConfig, Variant
from stnforecast.models.fusion import FusionConfig, LinearFusion, TransformerFusion
from stnforecast.models.layers import Conv3dBlock, Linear, MlpHead
from stnforecast.models.recurrent import ConvLstmCell, LstmStack, SlstmStack

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Tensor]


class SpatialBranch(Module):
    """Three Conv3D+BN+GELU stages over (time, height, width), pooled per timestep."""

    def __init__(self, channel_plan: Sequence[int], rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.convs: List[Conv3dBlock] = []
        width = 1
        for k, out in enumerate(channel_plan):
            self.convs.append(self.child(f"conv{k + 1}", Conv3dBlock(width, out, rng, dtype=dtype)))
            width = out
        self.out_dim = width

    def forward(self, window: Tensor) -> Tensor:
        """``window`` is ``B×1×n×P×P``; returns per-timestep features ``B×n×C``."""
        x = window
        for conv in self.convs:
            x = conv(x)
        pooled = ops.mean(x, axis=(3, 4))
        return ops.transpose(pooled, (0, 2, 1))

    def macs(self, input_shape) -> int:
        total = 0
        shape = tuple(input_shape)
        for conv in self.convs:
            total += conv.macs(shape)
            shape = conv.output_shape(shape)
        return total


def spatial_branch_forward(window: Tensor, branch: SpatialBranch) -> Tensor:
    """``1×n×P×P`` gives ``n×C``; ``B×1×n×P×P`` gives ``B×n×C``."""
    if window.ndim == 4:
        out = branch(ops.reshape(window, (1,) + window.shape))
        return ops.reshape(out, out.shape[1:])
    return branch(window)


class TemporalBranch(Module):
    """
    Recurrent encoder of the window. sLSTM and LSTM read the flattened patch
    per step; ConvLSTM reads the raw frames and is pooled per step.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.variant = config.variant
        patch_dim = config.patch * config.patch
        if config.variant.uses_slstm:
            self.cell = self.child("slstm", SlstmStack(patch_dim, config.h, config.a, config.l, rng, dtype))
            self.out_dim = config.h
        elif config.variant == Variant.LSTM_FLAT:
            self.cell = self.child("lstm", LstmStack(patch_dim, config.h, config.l, rng, dtype))
            self.out_dim = config.h
        else:
            self.cell = self.child("convlstm", ConvLstmCell(1, config.convlstm_width, rng, dtype=dtype))
            self.out_dim = config.convlstm_width

    @property
    def is_convolutional(self) -> bool:
        return isinstance(self.cell, ConvLstmCell)

    def forward(self, window: Tensor) -> Tensor:
        """``window`` is ``B×n×P×P``; returns ``B×n×out_dim`` tokens."""
        batch, steps, p, q = window.shape
        if self.is_convolutional:
            maps = self.cell(ops.reshape(window, (batch, steps, 1, p, q)))
            return ops.mean(maps, axis=(3, 4))
        return self.cell(ops.reshape(window, (batch, steps, p * q)))

    def macs(self, input_shape) -> int:
        steps, p, q = input_shape
        if self.is_convolutional:
            return self.cell.macs((steps, 1, p, q))
        return self.cell.macs((steps,))


def _make_fusion(config: ModelConfig, spatial_dim: int, temporal_dim: int, rng, dtype) -> Tuple[Module, Module, Module]:
    """Returns (spatial projection, temporal projection, fusion); projections are None for linear fusion."""
    d = config.h
    if config.variant.uses_transformer:
        fusion_config = FusionConfig(embed_dim=d, heads=config.f, blocks=config.blocks, feedforward_dim=config.feedforward_dim)
        return Linear(spatial_dim, d, rng, dtype), Linear(temporal_dim, d, rng, dtype), TransformerFusion(fusion_config, rng, dtype)
    return None, None, LinearFusion(spatial_dim, temporal_dim, d, rng, dtype)


class FusionStage(Module):
    """
    One dual-branch + fusion stage. The first stage reads the window through
    the Conv3D and recurrent branches; later stages read the previous fused
    tokens through the two branch input projections.
    """

    def __init__(self, config: ModelConfig, first: bool, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.first = first
        self.config = config
        d = config.h
        if first:
            self.spatial = self.child("spatial", SpatialBranch(config.channel_plan, rng, dtype))
            self.temporal = self.child("temporal", TemporalBranch(config, rng, dtype))
            spatial_dim, temporal_dim = self.spatial.out_dim, self.temporal.out_dim
        else:
            self.spatial_in = self.child("spatial_in", Linear(d, d, rng, dtype))
            self.temporal_in = self.child("temporal_in", Linear(d, d, rng, dtype))
            spatial_dim = temporal_dim = d
        proj_s, proj_t, fusion = _make_fusion(config, spatial_dim, temporal_dim, rng, dtype)
        self.proj_s = self.child("proj_spatial", proj_s) if proj_s is not None else None
        self.proj_t = self.child("proj_temporal", proj_t) if proj_t is not None else None
        self.fusion = self.child("fusion", fusion)
        self.spatial_dim, self.temporal_dim = spatial_dim, temporal_dim

    def forward(self, x: Tensor) -> Tensor:
        if self.first:
            batch, steps, p, q = x.shape
            spatial = self.spatial(ops.reshape(x, (batch, 1, steps, p, q)))
            temporal = self.temporal(x)
        else:
            spatial = self.spatial_in(x)
            temporal = self.temporal_in(x)
        if self.proj_s is not None:
            spatial = self.proj_s(spatial)
            temporal = self.proj_t(temporal)
        return self.fusion(spatial, temporal)

    def macs(self, input_shape) -> int:
        steps = input_shape[0]
        d = self.config.h
        if self.first:
            total = self.spatial.macs((1,) + tuple(input_shape)) + self.temporal.macs(input_shape)
        else:
            total = 2 * steps * d * d
        if self.proj_s is not None:
            total += self.proj_s.macs((steps, self.spatial_dim)) + self.proj_t.macs((steps, self.temporal_dim))
        return total + self.fusion.macs((steps, steps))


class StnModel(Module):
    """The mapping M(θ; window) -> tau normalized forecasts of the center cell."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.config = config
        self.norm_stats = None
        self.stages: List[FusionStage] = []
        if config.variant.is_flat:
            self.temporal = self.child("temporal", TemporalBranch(config, rng, dtype))
        else:
            for k in range(config.b):
                self.stages.append(self.child(f"stage{k}", FusionStage(config, k == 0, rng, dtype)))
        self.head = self.child("head", MlpHead(config.h, config.head_width, config.tau, rng, dtype))

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return (self.config.n, self.config.patch, self.config.patch)

    def forward(self, window: Tensor) -> Tensor:
        """``window`` is ``B×n×P×P``; returns ``B×tau``."""
        if self.config.variant.is_flat:
            hiddens = self.temporal(window)
            features = ops.getitem(hiddens, (slice(None), hiddens.shape[1] - 1))
        else:
            tokens = window
            for stage in self.stages:
                tokens = stage(tokens)
            features = ops.mean(tokens, axis=1)
        return self.head(features)

    def macs(self, input_shape=None) -> int:
        input_shape = tuple(input_shape or self.input_shape)
        head = self.head.macs()
        if self.config.variant.is_flat:
            return self.temporal.macs(input_shape) + head
        return sum(stage.macs(input_shape) for stage in self.stages) + head


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> StnModel:
    """Deterministic initialization: identical (config, seed) gives identical parameters."""
    config.check()
    model = StnModel(config, np.random.default_rng(seed), dtype)
    logger.debug("built %s with %d parameters", config.variant.value, count_params(model))
    return model


def _as_window(model: StnModel, window: ArrayLike) -> Tuple[Tensor, bool]:
    tensor = window if isinstance(window, Tensor) else Tensor.wrap(np.asarray(window, dtype=_model_dtype(model)))
    bad = np.argwhere(~np.isfinite(tensor.data))
    if bad.size:
        raise InputError(f"non-finite input value at index {tuple(int(i) for i in bad[0])}")
    single = tensor.ndim == 3
    if single:
        tensor = ops.reshape(tensor, (1,) + tensor.shape)
    if tensor.shape[1:] != model.input_shape:
        raise DimensionError(f"model expects windows of shape {model.input_shape}, got {tensor.shape}")
    return tensor, single


def _model_dtype(model: StnModel):
    return next(iter(model.parameters().values())).dtype


def forward(model: StnModel, window: ArrayLike) -> Tensor:
    """
    Forecast from a normalized window ``n×P×P`` (returns ``tau``) or a batch
    ``B×n×P×P`` (returns ``B×tau``).
    """
    tensor, single = _as_window(model, window)
    out = model(tensor)
    return ops.reshape(out, (out.shape[1],)) if single else out


def loss_l2(predictions: Tensor, targets: Tensor) -> Tensor:
    """Mean squared error over all B·tau entries."""
    if not isinstance(targets, Tensor):
        targets = Tensor.wrap(np.asarray(targets, dtype=predictions.dtype))
    if predictions.shape != targets.shape:
        raise DimensionError(f"loss_l2: predictions {predictions.shape} vs targets {targets.shape}")
    diff = ops.sub(predictions, targets)
    return ops.mean(ops.mul(diff, diff))


def count_params(model: Module) -> int:
    """Scalar parameters including batch-norm affine terms; running statistics excluded."""
    return int(sum(t.size for _, t in model.named_parameters()))


def count_macs(model: Module, input_shape=None) -> int:
    """Analytic multiply-accumulate count of one forward pass for one sample."""
    return int(model.macs(input_shape))
