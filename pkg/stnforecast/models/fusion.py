"""
Fusion of the spatial and temporal branch tokens: multi-head cross-attention
blocks (spatial tokens query, temporal tokens key/value) or a single affine
map of the concatenated features.
"""
from enum import Enum
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, Field

from stnforecast.core import ops
from stnforecast.core.errors import ConfigError, DimensionError
from stnforecast.core.module import Module
from stnforecast.core.tensor import Tensor
from stnforecast.models.layers import LayerNorm, Linear


class FusionVariant(str, Enum):
    LINEAR = "linear"
    TRANSFORMER = "transformer"


class FusionConfig(BaseModel):
    embed_dim: int = Field(gt=0)
    heads: int = Field(default=1, gt=0)
    blocks: int = Field(default=1, gt=0)
    feedforward_dim: int = Field(default=0, ge=0)
    variant: FusionVariant = FusionVariant.TRANSFORMER

    def check(self):
        if self.embed_dim % self.heads:
            raise ConfigError(f"fusion embed_dim {self.embed_dim} is not divisible by {self.heads} heads")

    def to_json(self):
        return self.model_dump_json()

    def __str__(self) -> str:
        return self.model_dump_json(indent=2)


def _batched(x: Tensor) -> Tensor:
    return ops.reshape(x, (1,) + x.shape) if x.ndim == 2 else x


class CrossAttention(Module):
    """Multi-head attention with Q from spatial tokens and K, V from temporal tokens."""

    def __init__(self, embed_dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if embed_dim % heads:
            raise ConfigError(f"embed_dim {embed_dim} is not divisible by {heads} heads")
        self.embed_dim = embed_dim
        self.heads = heads
        self.head_dim = embed_dim // heads
        self.q = self.child("q", Linear(embed_dim, embed_dim, rng, dtype))
        self.k = self.child("k", Linear(embed_dim, embed_dim, rng, dtype))
        self.v = self.child("v", Linear(embed_dim, embed_dim, rng, dtype))
        self.out = self.child("out", Linear(embed_dim, embed_dim, rng, dtype))

    def _split_heads(self, x: Tensor) -> Tensor:
        batch, tokens, _ = x.shape
        return ops.transpose(ops.reshape(x, (batch, tokens, self.heads, self.head_dim)), (0, 2, 1, 3))

    def weights(self, spatial: Tensor, temporal: Tensor) -> Tensor:
        """Attention weights ``B×f×S×L`` (rows sum to one)."""
        q = self._split_heads(self.q(spatial))
        k = self._split_heads(self.k(temporal))
        scores = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2)))
        return ops.softmax(ops.mul_scalar(scores, 1.0 / np.sqrt(self.head_dim)), axis=-1)

    def forward(self, spatial: Tensor, temporal: Tensor) -> Tensor:
        single = spatial.ndim == 2
        spatial, temporal = _batched(spatial), _batched(temporal)
        if spatial.shape[-1] != self.embed_dim or temporal.shape[-1] != self.embed_dim:
            raise DimensionError(f"cross-attention width {self.embed_dim}: got {spatial.shape} and {temporal.shape}")
        if spatial.shape[0] != temporal.shape[0]:
            raise DimensionError(f"cross-attention batch mismatch {spatial.shape} vs {temporal.shape}")
        probs = self.weights(spatial, temporal)
        v = self._split_heads(self.v(temporal))
        mixed = ops.matmul(probs, v)
        batch, _, tokens, _ = mixed.shape
        merged = ops.reshape(ops.transpose(mixed, (0, 2, 1, 3)), (batch, tokens, self.embed_dim))
        out = self.out(merged)
        return ops.reshape(out, out.shape[1:]) if single else out

    def macs(self, input_shape) -> int:
        s, l = input_shape
        d = self.embed_dim
        projections = (s + 2 * l + s) * d * d
        return projections + 2 * s * l * d


def cross_attention(spatial_tokens: Tensor, temporal_tokens: Tensor, attention: CrossAttention) -> Tensor:
    """softmax(Q·Kᵀ/√(d/f))·V per head, heads concatenated and output-projected."""
    return attention(spatial_tokens, temporal_tokens)


class FeedForward(Module):
    def __init__(self, embed_dim: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.inner = self.child("inner", Linear(embed_dim, hidden, rng, dtype))
        self.outer = self.child("outer", Linear(hidden, embed_dim, rng, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return self.outer(ops.gelu(self.inner(x)))

    def macs(self, input_shape) -> int:
        tokens = input_shape[0]
        return tokens * (self.inner.macs() + self.outer.macs())


class FusionBlock(Module):
    """
    x = LN(spatial + attention(spatial, temporal)); out = LN(x + FF(x)).
    With ``feedforward_dim == 0`` the second sublayer is skipped.
    """

    def __init__(self, embed_dim: int, heads: int, feedforward_dim: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.attention = self.child("attention", CrossAttention(embed_dim, heads, rng, dtype))
        self.norm1 = self.child("norm1", LayerNorm(embed_dim, dtype=dtype))
        self.feedforward: Optional[FeedForward] = None
        self.norm2: Optional[LayerNorm] = None
        if feedforward_dim:
            self.feedforward = self.child("feedforward", FeedForward(embed_dim, feedforward_dim, rng, dtype))
            self.norm2 = self.child("norm2", LayerNorm(embed_dim, dtype=dtype))

    def forward(self, spatial: Tensor, temporal: Tensor) -> Tensor:
        x = self.norm1(ops.add(spatial, self.attention(spatial, temporal)))
        if self.feedforward is None:
            return x
        return self.norm2(ops.add(x, self.feedforward(x)))

    def macs(self, input_shape) -> int:
        total = self.attention.macs(input_shape)
        if self.feedforward is not None:
            total += self.feedforward.macs(input_shape)
        return total


def fusion_block(spatial_tokens: Tensor, temporal_tokens: Tensor, block: FusionBlock) -> Tensor:
    return block(spatial_tokens, temporal_tokens)


class TransformerFusion(Module):
    """``blocks`` fusion blocks; each block's output is the next block's query tokens."""

    def __init__(self, config: FusionConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        config.check()
        self.config = config
        self.blocks: List[FusionBlock] = [
            self.child(f"block{k}", FusionBlock(config.embed_dim, config.heads, config.feedforward_dim, rng, dtype))
            for k in range(config.blocks)
        ]

    def forward(self, spatial: Tensor, temporal: Tensor) -> Tensor:
        x = spatial
        for block in self.blocks:
            x = block(x, temporal)
        return x

    def macs(self, input_shape) -> int:
        return sum(block.macs(input_shape) for block in self.blocks)


class LinearFusion(Module):
    """Affine map of [spatial ‖ temporal] to width d, applied per token."""

    def __init__(self, spatial_dim: int, temporal_dim: int, embed_dim: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spatial_dim = spatial_dim
        self.temporal_dim = temporal_dim
        self.affine = self.child("affine", Linear(spatial_dim + temporal_dim, embed_dim, rng, dtype))

    def forward(self, spatial: Tensor, temporal: Tensor) -> Tensor:
        if spatial.shape[-1] != self.spatial_dim or temporal.shape[-1] != self.temporal_dim:
            raise DimensionError(
                f"linear fusion expects widths {self.spatial_dim}+{self.temporal_dim}, got {spatial.shape} and {temporal.shape}"
            )
        if spatial.shape[:-1] != temporal.shape[:-1]:
            raise DimensionError(f"linear fusion token mismatch {spatial.shape} vs {temporal.shape}")
        return self.affine(ops.concat([spatial, temporal], axis=-1))

    def macs(self, input_shape) -> int:
        tokens = input_shape[0]
        return tokens * self.affine.macs()


def linear_fusion(spatial_vec: Tensor, temporal_vec: Tensor, fusion: LinearFusion) -> Tensor:
    return fusion(spatial_vec, temporal_vec)
