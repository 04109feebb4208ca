import logging
from typing import Callable, Mapping, Optional

import numpy as np

from stnforecast.core.errors import ContractError, GradientCheckError
from stnforecast.core.tensor import Tape, Tensor, backward

logger = logging.getLogger(__name__)


def grad_check(
    fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    coords_per_tensor: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Compare tape gradients of ``fn(params)`` with central finite differences.

    Relative error per coordinate is |analytic − numeric| / max(1, |analytic|, |numeric|);
    the maximum over all checked coordinates is returned. ``coords_per_tensor``
    samples that many coordinates per tensor (seeded) instead of all of them.
    """
    for name, tensor in params.items():
        if tensor.dtype != np.float64:
            raise ContractError(f"grad_check needs 64-bit tensors; {name} is {tensor.dtype}")

    with Tape() as tape:
        loss = fn(params)
    backward(tape, loss, leaves=params.values())
    analytic = {name: params[name].grad.copy() for name in params}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, tensor in params.items():
        flat = tensor.data.reshape(-1)
        indices = np.arange(flat.size)
        if coords_per_tensor is not None and flat.size > coords_per_tensor:
            indices = np.sort(rng.choice(flat.size, size=coords_per_tensor, replace=False))
        for idx in indices:
            original = flat[idx]
            flat[idx] = original + step
            plus = fn(params).item()
            flat[idx] = original - step
            minus = fn(params).item()
            flat[idx] = original
            numeric = (plus - minus) / (2 * step)
            a = float(analytic[name].reshape(-1)[idx])
            if not np.isfinite(numeric) or not np.isfinite(a):
                coord = [int(c) for c in np.unravel_index(idx, tensor.shape)]
                raise GradientCheckError(f"non-finite gradient at {name}{coord}: analytic={a}, numeric={numeric}")
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    logger.debug("grad_check over %d tensors: max relative error %.3e", len(params), worst)
    return worst
