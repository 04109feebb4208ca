from typing import Dict, Iterator, Tuple

import numpy as np

from stnforecast.core.ops import BatchNormState
from stnforecast.core.tensor import Tensor


class Module:
    """
    Container of named parameters, batch-norm states and child modules.

    Names are dotted paths (``stage0.spatial.conv1.kernels``) and are the keys
    used by checkpoints.
    """

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._states: Dict[str, BatchNormState] = {}
        self._children: Dict[str, "Module"] = {}
        self.training = True

    def param(self, name: str, array: np.ndarray) -> Tensor:
        tensor = Tensor(array, requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def state(self, name: str, state: BatchNormState) -> BatchNormState:
        self._states[name] = state
        return state

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        return iter(self._children.items())

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, tensor in self._params.items():
            yield prefix + name, tensor
        for name, module in self._children.items():
            yield from module.named_parameters(prefix + name + ".")

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def named_states(self, prefix: str = "") -> Iterator[Tuple[str, BatchNormState]]:
        for name, state in self._states.items():
            yield prefix + name, state
        for name, module in self._children.items():
            yield from module.named_states(prefix + name + ".")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, module in self._children.items():
            module.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Cast parameters and running statistics in place (float64 for gradient checks)."""
        for _, tensor in self.named_parameters():
            tensor.data = tensor.data.astype(dtype)
            tensor.grad = None
        for _, state in self.named_states():
            state.running_mean = state.running_mean.astype(dtype)
            state.running_var = state.running_var.astype(dtype)
        return self

    def zero_grad(self):
        for _, tensor in self.named_parameters():
            tensor.grad = None

    def macs(self, input_shape) -> int:
        raise NotImplementedError(f"{type(self).__name__} does not report MACs")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError
