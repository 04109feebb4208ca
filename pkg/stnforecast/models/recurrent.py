"""
Temporal cells: the sLSTM (exponential gating, normalizer state, log-domain
stabilizer, block-diagonal multi-head recurrence), a ConvLSTM cell and a plain
LSTM cell.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from stnforecast.core import ops
from stnforecast.core.errors import ConfigError, ContractError, DimensionError
from stnforecast.core.module import Module
from stnforecast.core.tensor import Tensor
from stnforecast.core.utils import uniform_init

SLSTM_GATES = ("z", "i", "f", "o")

# floor on the normalizer so a fully underflowed first step gives 0, not NaN
_NORMALIZER_FLOOR = 1e-30


@dataclass
class SlstmState:
    c: Tensor
    n: Tensor
    m: Tensor
    hdn: Tensor

    @classmethod
    def zeros(cls, batch: int, hidden: int, dtype=np.float32) -> "SlstmState":
        def z():
            return Tensor.wrap(np.zeros((batch, hidden), dtype=dtype))
        return cls(z(), z(), z(), z())


class SlstmLayer(Module):
    """
    One sLSTM layer.

    Input weights W_g are ``input_dim×h``; recurrent weights R_g are stored per
    head as ``a×(h/a)×(h/a)`` so the recurrence is block-diagonal across heads.
    """

    def __init__(self, input_dim: int, hidden: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if hidden % heads:
            raise ConfigError(f"sLSTM hidden size {hidden} is not divisible by {heads} heads")
        self.input_dim = input_dim
        self.hidden = hidden
        self.heads = heads
        self.head_dim = hidden // heads
        self.W = {g: self.param(f"W_{g}", uniform_init(rng, (input_dim, hidden), input_dim, dtype)) for g in SLSTM_GATES}
        self.R = {
            g: self.param(f"R_{g}", uniform_init(rng, (heads, self.head_dim, self.head_dim), self.head_dim, dtype))
            for g in SLSTM_GATES
        }
        self.b = {g: self.param(f"b_{g}", np.zeros(hidden, dtype=dtype)) for g in SLSTM_GATES}

    def recurrent(self, gate: str, hdn: Tensor) -> Tensor:
        batch = hdn.shape[0]
        per_head = ops.transpose(ops.reshape(hdn, (batch, self.heads, self.head_dim)), (1, 0, 2))
        mixed = ops.matmul(per_head, self.R[gate])
        return ops.reshape(ops.transpose(mixed, (1, 0, 2)), (batch, self.hidden))

    def project_inputs(self, xs: Tensor) -> dict:
        """W_g·x + b_g for every step at once; ``xs`` is ``B×n×input_dim``."""
        return {g: ops.add(ops.matmul(xs, self.W[g]), self.b[g]) for g in SLSTM_GATES}

    def step(self, projected: dict, state: SlstmState) -> Tuple[Tensor, SlstmState]:
        pre = {g: ops.add(projected[g], self.recurrent(g, state.hdn)) for g in SLSTM_GATES}
        z = ops.tanh(pre["z"])
        o = ops.sigmoid(pre["o"])
        log_f = ops.add(pre["f"], state.m)
        m_new = ops.maximum(log_f, pre["i"])
        i_gate = ops.exp(ops.sub(pre["i"], m_new))
        f_gate = ops.exp(ops.sub(log_f, m_new))
        c_new = ops.add(ops.mul(f_gate, state.c), ops.mul(i_gate, z))
        n_new = ops.add(ops.mul(f_gate, state.n), i_gate)
        hdn = ops.mul(o, ops.div(c_new, ops.clamp_min(n_new, _NORMALIZER_FLOOR)))
        return hdn, SlstmState(c_new, n_new, m_new, hdn)

    def macs(self, input_shape) -> int:
        steps = input_shape[0]
        per_step = len(SLSTM_GATES) * (self.input_dim * self.hidden + self.heads * self.head_dim * self.head_dim)
        return steps * per_step


def slstm_step(x: Tensor, state: Optional[SlstmState], layer: SlstmLayer) -> Tuple[Tensor, SlstmState]:
    """
    One sLSTM step for ``x`` of shape ``input_dim`` or ``B×input_dim``.

    m' = max(f̃ + m, ĩ); i' = exp(ĩ − m'); f' = exp(f̃ + m − m');
    c' = f'·c + i'·z; n' = f'·n + i'; hidden = o·c'/n'.
    """
    single = x.ndim == 1
    if single:
        x = ops.reshape(x, (1, x.shape[0]))
    if x.shape[-1] != layer.input_dim:
        raise DimensionError(f"sLSTM layer expects input width {layer.input_dim}, got {x.shape}")
    if state is None:
        state = SlstmState.zeros(x.shape[0], layer.hidden, x.dtype)
    projected = {g: ops.add(ops.matmul(x, layer.W[g]), layer.b[g]) for g in SLSTM_GATES}
    hdn, new_state = layer.step(projected, state)
    if single:
        hdn = ops.reshape(hdn, (layer.hidden,))
    return hdn, new_state


class SlstmStack(Module):
    """``l`` stacked sLSTM layers; layer k's hidden sequence feeds layer k+1."""

    def __init__(self, input_dim: int, hidden: int, heads: int, layers: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.hidden = hidden
        self.layers: List[SlstmLayer] = []
        width = input_dim
        for k in range(layers):
            self.layers.append(self.child(f"layer{k}", SlstmLayer(width, hidden, heads, rng, dtype)))
            width = hidden

    def forward(self, xs: Tensor) -> Tensor:
        return slstm_sequence(xs, self)

    def macs(self, input_shape) -> int:
        steps = input_shape[0]
        return sum(layer.macs((steps,)) for layer in self.layers)


def slstm_sequence(xs, stack: SlstmStack) -> Tensor:
    """
    Unroll the stack over ``xs`` (``n×input_dim``, ``B×n×input_dim`` or a list
    of per-step tensors) and return the top-layer hiddens, ``B×n×h`` (or
    ``n×h`` for unbatched input).
    """
    if isinstance(xs, (list, tuple)):
        if not xs:
            raise ContractError("slstm_sequence needs at least one step")
        xs = ops.stack(list(xs), axis=-2)
    single = xs.ndim == 2
    if single:
        xs = ops.reshape(xs, (1,) + xs.shape)
    batch, steps, _ = xs.shape
    if steps == 0:
        raise ContractError("slstm_sequence needs at least one step")

    sequence = xs
    for layer in stack.layers:
        projected = layer.project_inputs(sequence)
        state = SlstmState.zeros(batch, layer.hidden, xs.dtype)
        outputs = []
        for t in range(steps):
            step_inputs = {g: ops.getitem(projected[g], (slice(None), t)) for g in SLSTM_GATES}
            hdn, state = layer.step(step_inputs, state)
            outputs.append(hdn)
        sequence = ops.stack(outputs, axis=1)
    return ops.reshape(sequence, sequence.shape[1:]) if single else sequence


# ----- ConvLSTM -----

@dataclass
class ConvLstmState:
    hidden: Tensor
    cell: Tensor

    @classmethod
    def zeros(cls, batch: int, channels: int, height: int, width: int, dtype=np.float32) -> "ConvLstmState":
        shape = (batch, channels, height, width)
        return cls(Tensor.wrap(np.zeros(shape, dtype=dtype)), Tensor.wrap(np.zeros(shape, dtype=dtype)))


class ConvLstmCell(Module):
    """
    ConvLSTM without peepholes. Gate order along the output channels is
    i, f, o, g; both convolutions use same padding.
    """

    def __init__(self, in_channels: int, hidden_channels: int, rng: np.random.Generator, kernel: int = 3, dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        self.kernel = kernel
        self.padding = (kernel - 1) // 2
        gates = 4 * hidden_channels
        self.W_x = self.param("W_x", uniform_init(rng, (gates, in_channels, kernel, kernel), in_channels * kernel * kernel, dtype))
        self.W_h = self.param("W_h", uniform_init(rng, (gates, hidden_channels, kernel, kernel), hidden_channels * kernel * kernel, dtype))
        self.bias = self.param("bias", np.zeros(gates, dtype=dtype))

    def forward(self, frames: Tensor) -> Tensor:
        """``frames`` is ``B×n×C_in×H×W``; returns hidden maps ``B×n×C×H×W``."""
        batch, steps, _, height, width = frames.shape
        state = ConvLstmState.zeros(batch, self.hidden_channels, height, width, frames.dtype)
        outputs = []
        for t in range(steps):
            state = convlstm_step(ops.getitem(frames, (slice(None), t)), state, self)
            outputs.append(state.hidden)
        return ops.stack(outputs, axis=1)

    def macs(self, input_shape) -> int:
        steps, _, height, width = input_shape
        per_pixel = 4 * self.hidden_channels * self.kernel * self.kernel * (self.in_channels + self.hidden_channels)
        return steps * height * width * per_pixel


def convlstm_step(frame: Tensor, state: Optional[ConvLstmState], cell: ConvLstmCell) -> ConvLstmState:
    """
    i,f,o = sigmoid(conv(x)+conv(h)+b); g = tanh(·);
    c' = f⊙c + i⊙g; h' = o⊙tanh(c'). ``frame`` is ``C_in×H×W`` or batched.
    """
    single = frame.ndim == 3
    if single:
        frame = ops.reshape(frame, (1,) + frame.shape)
    if frame.ndim != 4 or frame.shape[1] != cell.in_channels:
        raise DimensionError(f"ConvLSTM expects {cell.in_channels} input channels, got frame {frame.shape}")
    batch, _, height, width = frame.shape
    if state is None:
        state = ConvLstmState.zeros(batch, cell.hidden_channels, height, width, frame.dtype)
    elif single and state.hidden.ndim == 3:
        state = ConvLstmState(ops.reshape(state.hidden, (1,) + state.hidden.shape), ops.reshape(state.cell, (1,) + state.cell.shape))
    if state.hidden.shape != (batch, cell.hidden_channels, height, width):
        raise DimensionError(f"ConvLSTM state {state.hidden.shape} does not match frame {frame.shape}")

    pre = ops.add(
        ops.conv2d(frame, cell.W_x, cell.bias, cell.padding),
        ops.conv2d(state.hidden, cell.W_h, None, cell.padding),
    )
    c = cell.hidden_channels
    i = ops.sigmoid(ops.getitem(pre, (slice(None), slice(0, c))))
    f = ops.sigmoid(ops.getitem(pre, (slice(None), slice(c, 2 * c))))
    o = ops.sigmoid(ops.getitem(pre, (slice(None), slice(2 * c, 3 * c))))
    g = ops.tanh(ops.getitem(pre, (slice(None), slice(3 * c, 4 * c))))
    cell_new = ops.add(ops.mul(f, state.cell), ops.mul(i, g))
    hidden_new = ops.mul(o, ops.tanh(cell_new))
    if single:
        return ConvLstmState(ops.reshape(hidden_new, hidden_new.shape[1:]), ops.reshape(cell_new, cell_new.shape[1:]))
    return ConvLstmState(hidden_new, cell_new)


# ----- plain LSTM -----

class LstmCell(Module):
    """Standard LSTM; gate blocks along the 4h axis are ordered i, f, g, o."""

    def __init__(self, input_dim: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.input_dim = input_dim
        self.hidden = hidden
        self.W_x = self.param("W_x", uniform_init(rng, (input_dim, 4 * hidden), input_dim, dtype))
        self.W_h = self.param("W_h", uniform_init(rng, (hidden, 4 * hidden), hidden, dtype))
        self.bias = self.param("bias", np.zeros(4 * hidden, dtype=dtype))

    def forward(self, xs: Tensor) -> Tensor:
        """``xs`` is ``B×n×input_dim``; returns hiddens ``B×n×h``."""
        batch, steps, _ = xs.shape
        projected = ops.add(ops.matmul(xs, self.W_x), self.bias)
        h = Tensor.wrap(np.zeros((batch, self.hidden), dtype=xs.dtype))
        c = Tensor.wrap(np.zeros((batch, self.hidden), dtype=xs.dtype))
        outputs = []
        for t in range(steps):
            pre = ops.add(ops.getitem(projected, (slice(None), t)), ops.matmul(h, self.W_h))
            h, c = _lstm_gates(pre, c, self.hidden)
            outputs.append(h)
        return ops.stack(outputs, axis=1)

    def macs(self, input_shape) -> int:
        steps = input_shape[0]
        return steps * 4 * self.hidden * (self.input_dim + self.hidden)


def _lstm_gates(pre: Tensor, c: Tensor, hidden: int) -> Tuple[Tensor, Tensor]:
    def block(k):
        return ops.getitem(pre, (slice(None), slice(k * hidden, (k + 1) * hidden)))

    i = ops.sigmoid(block(0))
    f = ops.sigmoid(block(1))
    g = ops.tanh(block(2))
    o = ops.sigmoid(block(3))
    c_new = ops.add(ops.mul(f, c), ops.mul(i, g))
    return ops.mul(o, ops.tanh(c_new)), c_new


def lstm_step(x: Tensor, state: Optional[Tuple[Tensor, Tensor]], cell: LstmCell) -> Tuple[Tensor, Tensor]:
    """One LSTM step; ``x`` is ``input_dim`` or ``B×input_dim``; returns (h', c')."""
    single = x.ndim == 1
    if single:
        x = ops.reshape(x, (1, x.shape[0]))
    if x.shape[-1] != cell.input_dim:
        raise DimensionError(f"LSTM expects input width {cell.input_dim}, got {x.shape}")
    batch = x.shape[0]
    if state is None:
        h = Tensor.wrap(np.zeros((batch, cell.hidden), dtype=x.dtype))
        c = Tensor.wrap(np.zeros((batch, cell.hidden), dtype=x.dtype))
    else:
        h, c = state
        if h.ndim == 1:
            h, c = ops.reshape(h, (1, cell.hidden)), ops.reshape(c, (1, cell.hidden))
    if h.shape != (batch, cell.hidden) or c.shape != (batch, cell.hidden):
        raise DimensionError(f"LSTM state {h.shape}/{c.shape} does not match hidden size {cell.hidden}")
    pre = ops.add(ops.add(ops.matmul(x, cell.W_x), ops.matmul(h, cell.W_h)), cell.bias)
    h_new, c_new = _lstm_gates(pre, c, cell.hidden)
    if single:
        return ops.reshape(h_new, (cell.hidden,)), ops.reshape(c_new, (cell.hidden,))
    return h_new, c_new


class LstmStack(Module):
    def __init__(self, input_dim: int, hidden: int, layers: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.hidden = hidden
        self.cells: List[LstmCell] = []
        width = input_dim
        for k in range(layers):
            self.cells.append(self.child(f"layer{k}", LstmCell(width, hidden, rng, dtype)))
            width = hidden

    def forward(self, xs: Tensor) -> Tensor:
        for cell in self.cells:
            xs = cell(xs)
        return xs

    def macs(self, input_shape) -> int:
        return sum(cell.macs(input_shape) for cell in self.cells)
