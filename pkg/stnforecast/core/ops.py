"""
Differentiable kernels over :class:`Tensor`.

Every function computes its value with numpy and, when a tape is active and an
input requires a gradient, records a backward rule. Broadcasting is limited to
adding a bias along the last axis (or the channel axis inside conv3d).
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from stnforecast.core.errors import DimensionError
from stnforecast.core.tensor import Tensor, make_output

Axis = Union[int, Tuple[int, ...], None]

_GELU_C = np.sqrt(2.0 / np.pi)


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _is_bias(a: Tensor, b: Tensor) -> bool:
    return b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1] and a.shape != b.shape


def _sum_to_bias(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


# ----- elementwise arithmetic -----

def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b for equal shapes, or a[..., k] + bias[k]."""
    if _is_bias(a, b):
        return make_output("add_bias", a.data + b.data, (a, b), lambda g: (g, _sum_to_bias(g)))
    _same_shape("add", a, b)
    return make_output("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return make_output("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if _is_bias(a, b):
        return make_output(
            "mul_bias", a.data * b.data, (a, b),
            lambda g: (g * b.data, _sum_to_bias(g * a.data)),
        )
    _same_shape("mul", a, b)
    return make_output("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    value = a.data / b.data
    return make_output("div", value, (a, b), lambda g: (g / b.data, -g * value / b.data))


def neg(x: Tensor) -> Tensor:
    return make_output("neg", -x.data, (x,), lambda g: (-g,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return make_output("add_scalar", x.data + x.dtype.type(c), (x,), lambda g: (g,))


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return make_output("mul_scalar", x.data * c, (x,), lambda g: (g * c,))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    _same_shape("maximum", a, b)
    take_a = a.data >= b.data
    return make_output(
        "maximum", np.where(take_a, a.data, b.data), (a, b),
        lambda g: (np.where(take_a, g, 0).astype(g.dtype), np.where(take_a, 0, g).astype(g.dtype)),
    )


def clamp_min(x: Tensor, floor: float) -> Tensor:
    keep = x.data >= floor
    value = np.where(keep, x.data, x.dtype.type(floor))
    return make_output("clamp_min", value, (x,), lambda g: (np.where(keep, g, 0).astype(g.dtype),))


# ----- activations -----

def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_output("tanh", y, (x,), lambda g: (g * (1 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1 + np.tanh(0.5 * x.data))
    return make_output("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_output("exp", y, (x,), lambda g: (g * y,))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    y = 0.5 * v * (1 + t)

    def _backward(g):
        d_inner = _GELU_C * (1 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1 + t) + 0.5 * v * (1 - t * t) * d_inner),)

    return make_output("gelu", y.astype(v.dtype, copy=False), (x,), _backward)


# ----- reductions and shape -----

def _expand_grad(g: np.ndarray, shape: Tuple[int, ...], axis: Axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(sorted(a % len(shape) for a in axes))
        for a in axes:
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    value = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)
    shape = x.shape
    return make_output(
        "sum", value, (x,),
        lambda g: (np.array(_expand_grad(g, shape, axis, keepdims)),),
    )


def mean(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    value = np.asarray(x.data.mean(axis=axis, keepdims=keepdims), dtype=x.dtype)
    shape = x.shape
    count = x.size // max(value.size, 1) if axis is not None else x.size

    def _backward(g):
        return (np.array(_expand_grad(g, shape, axis, keepdims)) / count,)

    return make_output("mean", value, (x,), _backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        value = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from exc
    original = x.shape
    return make_output("reshape", value, (x,), lambda g: (g.reshape(original),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_output(
        "transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inverse)),),
    )


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    value = np.array(x.data[index])
    shape = x.shape

    def _backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return make_output("getitem", value, (x,), _backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    value = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_output(
        "concat", value, tensors,
        lambda g: tuple(np.ascontiguousarray(part) for part in np.split(g, bounds, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    value = np.stack([t.data for t in tensors], axis=axis)
    return make_output(
        "stack", value, tensors,
        lambda g: tuple(np.ascontiguousarray(np.take(g, k, axis=axis)) for k in range(len(tensors))),
    )


# ----- linear algebra -----

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product.

    Accepts ``[m×k]·[k×n]``, ``[...×m×k]·[k×n]`` (weight shared across the
    leading axes) and ``[...×m×k]·[...×k×n]`` with identical leading axes.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    if b.ndim == 2:
        value = a.data @ b.data

        def _backward(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return make_output("matmul", value, (a, b), _backward)

    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} differ")
    value = a.data @ b.data
    return make_output(
        "matmul", value, (a, b),
        lambda g: (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g),
    )


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return make_output(
        "softmax", y, (x,),
        lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),),
    )


# ----- normalization -----

def _normalize_backward(g_hat: np.ndarray, x_hat: np.ndarray, inv_std: np.ndarray, axis: int) -> np.ndarray:
    n = g_hat.shape[axis]
    return inv_std / n * (
        n * g_hat
        - g_hat.sum(axis=axis, keepdims=True)
        - x_hat * (g_hat * x_hat).sum(axis=axis, keepdims=True)
    )


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis (population variance), then scale and shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu) * inv_std
    value = x_hat * gamma.data + beta.data

    def _backward(g):
        gx = _normalize_backward(g * gamma.data, x_hat, inv_std, axis=-1)
        return gx, _sum_to_bias(g * x_hat), _sum_to_bias(g)

    return make_output("layer_norm", value.astype(x.dtype, copy=False), (x, gamma, beta), _backward)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer (not trainable)."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, features: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(features, dtype=dtype), np.ones(features, dtype=dtype))


def batch_norm(
    x: Tensor,
    state: BatchNormState,
    training: bool,
    gamma: Optional[Tensor] = None,
    beta: Optional[Tensor] = None,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """
    Batch normalization over axis 0 of ``x[batch×features]``.

    Training mode normalizes with the batch statistics and moves the running
    statistics by an exponential moving average; inference mode reads the
    running statistics only.
    """
    if x.ndim != 2:
        raise DimensionError(f"batch_norm expects [batch×features], got {x.shape}")
    if training:
        mu = x.data.mean(axis=0, keepdims=True)
        var = x.data.var(axis=0, keepdims=True)
        state.running_mean[...] = (1 - momentum) * state.running_mean + momentum * mu[0]
        state.running_var[...] = (1 - momentum) * state.running_var + momentum * var[0]
    else:
        mu = state.running_mean[None, :].astype(x.dtype)
        var = state.running_var[None, :].astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    x_hat = (x.data - mu) * inv_std

    params = tuple(p for p in (gamma, beta) if p is not None)
    value = x_hat
    if gamma is not None:
        value = value * gamma.data
    if beta is not None:
        value = value + beta.data

    def _backward(g):
        g_hat = g * gamma.data if gamma is not None else g
        if training:
            gx = _normalize_backward(g_hat, x_hat, inv_std, axis=0)
        else:
            gx = g_hat * inv_std
        grads = [gx]
        if gamma is not None:
            grads.append(_sum_to_bias(g * x_hat))
        if beta is not None:
            grads.append(_sum_to_bias(g))
        return tuple(grads)

    return make_output("batch_norm", value.astype(x.dtype, copy=False), (x,) + params, _backward)


# ----- convolution -----

def _triple(padding) -> Tuple[int, int, int]:
    if isinstance(padding, int):
        return (padding, padding, padding)
    padding = tuple(int(p) for p in padding)
    if len(padding) != 3 or any(p < 0 for p in padding):
        raise DimensionError(f"conv3d padding must be three nonnegative integers, got {padding}")
    return padding


def _conv3d_batched(x: Tensor, w: Tensor, b: Optional[Tensor], padding: Tuple[int, int, int]) -> Tensor:
    n, c, d, h, wd = x.shape
    o, c_w, kd, kh, kw = w.shape
    if c != c_w:
        raise DimensionError(f"conv3d: input channels {x.shape} vs kernels {w.shape}")
    pd, ph, pw = padding
    od, oh, ow = d + 2 * pd - kd + 1, h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1
    if min(od, oh, ow) < 1:
        raise DimensionError(f"conv3d: kernel {w.shape[2:]} larger than padded input {x.shape[2:]} (padding {padding})")
    if b is not None and b.shape != (o,):
        raise DimensionError(f"conv3d: bias {b.shape} vs {o} output channels")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    out = np.zeros((o, n, od, oh, ow), dtype=x.dtype)
    offsets = list(np.ndindex(kd, kh, kw))
    for a, p, q in offsets:
        window = xp[:, :, a:a + od, p:p + oh, q:q + ow]
        out += np.tensordot(w.data[:, :, a, p, q], window, axes=([1], [1]))
    value = np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))
    if b is not None:
        value += b.data[None, :, None, None, None]

    def _backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for a, p, q in offsets:
            window = xp[:, :, a:a + od, p:p + oh, q:q + ow]
            gw[:, :, a, p, q] = np.tensordot(g, window, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
            gxp[:, :, a:a + od, p:p + oh, q:q + ow] += np.tensordot(
                g, w.data[:, :, a, p, q], axes=([1], [0])
            ).transpose(0, 4, 1, 2, 3)
        gx = np.ascontiguousarray(gxp[:, :, pd:pd + d, ph:ph + h, pw:pw + wd])
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return make_output("conv3d", value, inputs, _backward)


def conv3d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None, padding=0) -> Tensor:
    """
    Stride-1 3-D cross-correlation over (depth, height, width).

    ``x`` is ``C_in×D×H×W`` or batched ``N×C_in×D×H×W``; ``kernels`` is
    ``C_out×C_in×kd×kh×kw``. Output extent per axis is ``in + 2·pad − k + 1``.
    """
    if kernels.ndim != 5:
        raise DimensionError(f"conv3d kernels must be 5-D, got {kernels.shape}")
    padding = _triple(padding)
    if x.ndim == 4:
        out = _conv3d_batched(reshape(x, (1,) + x.shape), kernels, bias, padding)
        return reshape(out, out.shape[1:])
    if x.ndim != 5:
        raise DimensionError(f"conv3d input must be 4-D or 5-D, got {x.shape}")
    return _conv3d_batched(x, kernels, bias, padding)


def conv2d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None, padding=0) -> Tensor:
    """Stride-1 2-D cross-correlation, realized as a depth-1 conv3d."""
    if kernels.ndim != 4:
        raise DimensionError(f"conv2d kernels must be 4-D, got {kernels.shape}")
    ph, pw = (padding, padding) if isinstance(padding, int) else tuple(padding)
    batched = x.ndim == 4
    if not batched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be 3-D or 4-D, got {x.shape}")
    n, c, h, w = x.shape
    o = kernels.shape[0]
    k5 = reshape(kernels, (o, kernels.shape[1], 1) + kernels.shape[2:])
    out = _conv3d_batched(reshape(x, (n, c, 1, h, w)), k5, bias, (0, ph, pw))
    out = reshape(out, (n, o) + out.shape[3:])
    return out if batched else reshape(out, out.shape[1:])
