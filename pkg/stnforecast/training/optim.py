import logging
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from stnforecast.core.errors import ContractError, TrainingError
from stnforecast.core.tensor import Tensor

logger = logging.getLogger(__name__)


class AdamState(BaseModel):
    """First and second moment buffers keyed by parameter name, plus the step counter."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    m: Dict[str, np.ndarray] = Field(default_factory=dict)
    v: Dict[str, np.ndarray] = Field(default_factory=dict)
    t: int = Field(default=0, ge=0)

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )

    def __str__(self) -> str:
        return f"AdamState(t={self.t}, buffers={len(self.m)})"


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float = 5e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """
    Bias-corrected Adam update applied to ``params`` in place. Every gradient
    is checked before any parameter moves, so a NaN leaves the model intact.
    """
    for name, grad in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if grad.shape != params[name].shape:
            raise ContractError(f"gradient {name} has shape {grad.shape}, parameter has {params[name].shape}")
        if not np.isfinite(grad).all():
            raise TrainingError(f"non-finite gradient in parameter {name}")

    state.t += 1
    correction1 = 1 - beta1 ** state.t
    correction2 = 1 - beta2 ** state.t
    for name, grad in grads.items():
        param = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad * grad
        state.m[name] = m.astype(param.dtype)
        state.v[name] = v.astype(param.dtype)
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        param.data = (param.data - update).astype(param.dtype)
    return state


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> Tuple[Dict[str, np.ndarray], float]:
    """Scale all gradients together so their global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm is None or not np.isfinite(norm) or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {name: (g * scale).astype(g.dtype) for name, g in grads.items()}, norm


class Adam:
    """Adam bound to a parameter set: ``step(grads)`` applies one update."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 5e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 state: Optional[AdamState] = None):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state = state or AdamState.zeros_like(self.params)

    def step(self, grads: Mapping[str, np.ndarray]) -> AdamState:
        return adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
