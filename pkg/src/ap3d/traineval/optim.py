"""Adam with L2 weight decay and a step learning-rate schedule."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..tensorcore import Parameter


def step_lr(epoch: int, base_lr: float, decay: float = 0.1, every: int = 60) -> float:
    return base_lr * decay ** (epoch // every)


class Adam:
    """Weight decay is added to the gradient before the moment updates."""

    def __init__(self, params: Sequence[Parameter], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 5e-4):
        self.params = list(params)
        self.lr, self.eps, self.weight_decay = lr, eps, weight_decay
        self.beta1, self.beta2 = betas
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
