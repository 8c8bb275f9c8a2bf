"""Adam optimizer with bias correction."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    """Standard Adam update applied in place to a fixed parameter list.

    Defaults follow the common convention: lr 1e-3, beta1 0.9,
    beta2 0.999, eps 1e-8 (eps added outside the square root).
    Gradients are zeroed after each step.
    """

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params: list[Tensor] = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p._grad
            if g is None:
                g = np.zeros_like(p.data)
            self.m[i] += (1.0 - b1) * (g - self.m[i])
            self.v[i] += (1.0 - b2) * (g * g - self.v[i])
            m_hat = self.m[i] / (1.0 - b1**t)
            v_hat = self.v[i] / (1.0 - b2**t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype, copy=False)
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
