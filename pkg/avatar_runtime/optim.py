from typing import Dict, Sequence, Tuple

import numpy as np

from .exceptions import NumericError
from .tensor import Tensor


class Adam:
    """Adam with bias correction; parameters without a gradient are skipped."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 max_grad_norm: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.step_count = 0
        self.moments: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}

    def grad_norm(self) -> float:
        total = sum(float(np.sum(p.grad * p.grad)) for p in self.params if p.grad is not None)
        return float(np.sqrt(total))

    def step(self) -> None:
        norm = self.grad_norm()
        if not np.isfinite(norm):
            raise NumericError("gradient norm is not finite")
        clip = 1.0
        if self.max_grad_norm > 0 and norm > self.max_grad_norm:
            clip = self.max_grad_norm / norm
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            grad = p.grad * clip
            m, v = self.moments.get(i, (np.zeros_like(p.data), np.zeros_like(p.data)))
            m = self.beta1 * m + (1.0 - self.beta1) * grad
            v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            self.moments[i] = (m, v)
            p.data = p.data - self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
