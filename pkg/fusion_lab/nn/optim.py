"""
Optimizers over leaf Tensors.
"""

from typing import Iterable, List, Tuple

import numpy as np

from ..errors import ContractError
from ..tensor.core import Tensor


class Optimizer:
    def __init__(self, params: Iterable[Tensor], lr: float):
        self.params: List[Tensor] = list(params)
        if not self.params:
            raise ContractError("Optimizer needs at least one parameter")
        for p in self.params:
            if not p.requires_grad:
                raise ContractError(f"Parameter {p.name or p!r} does not require gradients")
        self.lr = lr

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        raise NotImplementedError


class GradientDescent(Optimizer):
    """Plain full-batch gradient descent, no momentum."""

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad.astype(p.data.dtype)


class AdamW(Optimizer):
    """
    Adaptive-moment optimizer with decoupled weight decay.

    Args:
        params: Trainable tensors; the list is kept for parameter-set audits
        lr: Learning rate
        betas: Decay rates of the first and second moment estimates
        eps: Denominator floor
        weight_decay: Decoupled decay applied as p -= lr * wd * p
    """

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        super().__init__(params, lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.steps = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            grad = p.grad.astype(p.data.dtype)
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            p.data = p.data - self.lr * (update + self.weight_decay * p.data)
