from typing import Sequence, Tuple

import numpy as np

from stnforecast.core import ops
from stnforecast.core.errors import DimensionError
from stnforecast.core.module import Module
from stnforecast.core.ops import BatchNormState
from stnforecast.core.tensor import Tensor
from stnforecast.core.utils import uniform_init


class Linear(Module):
    """Affine map over the last axis: x[..., in] -> x[..., out]."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = self.param("weight", uniform_init(rng, (in_features, out_features), in_features, dtype))
        self.bias = self.param("bias", np.zeros(out_features, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"Linear({self.in_features}->{self.out_features}) got input {x.shape}")
        if x.ndim == 1:
            out = ops.matmul(ops.reshape(x, (1, self.in_features)), self.weight)
            return ops.reshape(ops.add(out, self.bias), (self.out_features,))
        return ops.add(ops.matmul(x, self.weight), self.bias)

    def macs(self, input_shape=None) -> int:
        tokens = int(np.prod(input_shape[:-1])) if input_shape else 1
        return tokens * self.in_features * self.out_features


class LayerNorm(Module):
    def __init__(self, features: int, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.gamma = self.param("gamma", np.ones(features, dtype=dtype))
        self.beta = self.param("beta", np.zeros(features, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)

    def macs(self, input_shape=None) -> int:
        return 0


class Conv3dBlock(Module):
    """
    conv3d (same padding) -> batch norm over channels -> GELU.

    Input and output are ``N×C×D×H×W``.
    """

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 kernel: Tuple[int, int, int] = (3, 3, 3), dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = tuple(kernel)
        self.padding = tuple((k - 1) // 2 for k in self.kernel)
        fan_in = in_channels * int(np.prod(self.kernel))
        self.kernels = self.param("kernels", uniform_init(rng, (out_channels, in_channels) + self.kernel, fan_in, dtype))
        self.bias = self.param("bias", np.zeros(out_channels, dtype=dtype))
        self.bn_gamma = self.param("bn_gamma", np.ones(out_channels, dtype=dtype))
        self.bn_beta = self.param("bn_beta", np.zeros(out_channels, dtype=dtype))
        self.bn = self.state("bn", BatchNormState.fresh(out_channels, dtype))

    def forward(self, x: Tensor) -> Tensor:
        y = ops.conv3d(x, self.kernels, self.bias, self.padding)
        n, c, d, h, w = y.shape
        rows = ops.reshape(ops.transpose(y, (0, 2, 3, 4, 1)), (n * d * h * w, c))
        rows = ops.batch_norm(rows, self.bn, self.training, self.bn_gamma, self.bn_beta)
        y = ops.transpose(ops.reshape(rows, (n, d, h, w, c)), (0, 4, 1, 2, 3))
        return ops.gelu(y)

    def output_shape(self, input_shape: Sequence[int]) -> Tuple[int, ...]:
        _, d, h, w = input_shape
        dims = [s + 2 * p - k + 1 for s, p, k in zip((d, h, w), self.padding, self.kernel)]
        return (self.out_channels, *dims)

    def macs(self, input_shape) -> int:
        """C_out·D'·H'·W'·C_in·kd·kh·kw for one ``C_in×D×H×W`` sample."""
        _, d, h, w = self.output_shape(input_shape)
        return self.out_channels * d * h * w * self.in_channels * int(np.prod(self.kernel))


class MlpHead(Module):
    """Linear -> GELU -> Linear, emitting the forecast horizon."""

    def __init__(self, in_features: int, hidden: int, out_features: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.hidden = self.child("hidden", Linear(in_features, hidden, rng, dtype))
        self.out = self.child("out", Linear(hidden, out_features, rng, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return self.out(ops.gelu(self.hidden(x)))

    def macs(self, input_shape=None) -> int:
        return self.hidden.macs() + self.out.macs()
