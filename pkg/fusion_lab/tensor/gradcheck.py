"""
Finite-difference verification of autodiff gradients.
"""

from typing import Callable, List

import numpy as np

from ..errors import ContractError, NumericError
from .core import Tensor, backward, no_grad, precision

# Relative errors are taken against max(|analytic|, |numeric|, floor) so that
# gradients that are exactly zero do not blow up the ratio.
RELATIVE_FLOOR = 1e-4


def _evaluate(function: Callable[[], Tensor], label: str) -> float:
    with no_grad():
        value = function()
    if value.data.size != 1:
        raise ContractError(f"grad_check function must return a scalar, got shape {list(value.shape)}")
    result = float(value.data.reshape(-1)[0])
    if not np.isfinite(result):
        raise NumericError(f"Non-finite function value while perturbing {label}")
    return result


def grad_check(function: Callable[[], Tensor], params: List[Tensor], step: float = 1e-5) -> float:
    """
    Compare autodiff gradients with central finite differences in 64-bit mode.

    Args:
        function: Zero-argument callable building a scalar loss from `params`
        params: Leaf tensors to verify; they are promoted to float64 for the check
        step: Finite-difference step

    Returns:
        float: Max over all parameter elements of the relative error
    """
    originals = [p.data for p in params]
    flags = [p.requires_grad for p in params]
    try:
        with precision("float64"):
            for p in params:
                p.data = p.data.astype(np.float64)
                p.requires_grad = True
                p.grad = None

            loss = function()
            if not np.all(np.isfinite(loss.data)):
                raise NumericError("Non-finite loss at the unperturbed point")
            backward(loss)

            worst = 0.0
            for index, p in enumerate(params):
                label = p.name or f"param[{index}]"
                if not np.all(np.isfinite(p.data)):
                    raise NumericError(f"Non-finite value in {label}")
                analytic = p.grad.reshape(-1) if p.grad is not None else np.zeros(p.data.size)
                flat = p.data.reshape(-1)
                for i in range(flat.size):
                    original = flat[i]
                    flat[i] = original + step
                    plus = _evaluate(function, f"{label}[{i}]")
                    flat[i] = original - step
                    minus = _evaluate(function, f"{label}[{i}]")
                    flat[i] = original
                    numeric = (plus - minus) / (2.0 * step)
                    denom = max(abs(analytic[i]), abs(numeric), RELATIVE_FLOOR)
                    worst = max(worst, abs(analytic[i] - numeric) / denom)
            return worst
    finally:
        for p, data, flag in zip(params, originals, flags):
            p.data = data
            p.requires_grad = flag
            p.grad = None
