import contextvars
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from stnforecast.core.errors import ContractError, DimensionError

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("active_tape", default=None)


class Tensor:
    """
    Dense n-dimensional array that can take part in a differentiation tape.

    Values live in ``data`` (row-major numpy array, float32 or float64).
    ``grad`` is filled by :func:`backward` for leaves with ``requires_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        array = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if array.dtype not in (np.float32, np.float64):
            array = array.astype(np.float32)
        self.data = np.ascontiguousarray(array)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Wrap an op result without copying."""
        out = cls.__new__(cls)
        out.data = array
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor.wrap(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # operators delegate to stnforecast.core.ops (imported lazily to avoid a cycle)

    def __add__(self, other):
        from stnforecast.core import ops
        return ops.add(self, other) if isinstance(other, Tensor) else ops.add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from stnforecast.core import ops
        return ops.sub(self, other) if isinstance(other, Tensor) else ops.add_scalar(self, -other)

    def __rsub__(self, other):
        from stnforecast.core import ops
        return ops.add_scalar(ops.neg(self), other)

    def __mul__(self, other):
        from stnforecast.core import ops
        return ops.mul(self, other) if isinstance(other, Tensor) else ops.mul_scalar(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from stnforecast.core import ops
        return ops.div(self, other) if isinstance(other, Tensor) else ops.mul_scalar(self, 1.0 / other)

    def __neg__(self):
        from stnforecast.core import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from stnforecast.core import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from stnforecast.core import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from stnforecast.core import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from stnforecast.core import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from stnforecast.core import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from stnforecast.core import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: BackwardFn


@dataclass
class Tape:
    """
    Append-only record of the operations of one forward pass.

    Use as a context manager; ops executed inside the block with at least one
    ``requires_grad`` input are recorded. Nodes are appended as they execute,
    so the list is already in topological order.
    """

    nodes: List[Node] = field(default_factory=list)
    _token: Optional[contextvars.Token] = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def record(self, op: str, output: Tensor, inputs: Tuple[Tensor, ...], backward: BackwardFn):
        self.nodes.append(Node(op, output, inputs, backward))

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def make_output(op: str, value: np.ndarray, inputs: Tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    """Wrap ``value`` and record it on the active tape when a gradient is needed."""
    tape = _ACTIVE_TAPE.get()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.wrap(value, requires_grad=needs_grad)
    if needs_grad:
        tape.record(op, out, inputs, backward)
    return out


def backward(tape: Tape, loss: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
    """
    Reverse sweep over ``tape`` starting from the scalar ``loss``.

    Gradients are written to ``grad`` of every ``requires_grad`` leaf found on
    the tape plus every tensor in ``leaves`` (zeros when the loss does not
    depend on it). Returns the leaf -> gradient mapping.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(node.output) for node in tape.nodes}
    if id(loss) not in produced:
        raise ContractError("loss was not produced on this tape")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen_leaves: Dict[int, Tensor] = {}

    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.backward(g)
        for tensor, tg in zip(node.inputs, input_grads):
            if tg is None or not tensor.requires_grad:
                continue
            if tg.shape != tensor.shape:
                raise DimensionError(f"{node.op} backward produced {tg.shape} for input {tensor.shape}")
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + tg
            else:
                grads[key] = tg
            if id(tensor) not in produced:
                seen_leaves[key] = tensor

    result: Dict[Tensor, np.ndarray] = {}
    for key, tensor in seen_leaves.items():
        tensor.grad = grads[key].astype(tensor.dtype, copy=False)
        result[tensor] = tensor.grad
    for tensor in leaves or ():
        if tensor not in result:
            tensor.grad = np.zeros_like(tensor.data)
            result[tensor] = tensor.grad
    return result
