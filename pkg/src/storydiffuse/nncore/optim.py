"""AdamW with decoupled weight decay and a cosine-annealed learning rate."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .layers import Parameter


class NumericError(FloatingPointError):
    pass


def cosine_annealing_lr(step: int, total_steps: int, lr_init: float, lr_min: float = 0.0) -> float:
    if total_steps <= 0 or step >= total_steps:
        return lr_min if step >= total_steps else lr_init
    step = max(step, 0)
    return lr_min + (lr_init - lr_min) * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class AdamW:
    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 1e-4,
        weight_decay: float = 1e-2,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        # validate everything first so a bad gradient leaves all parameters intact
        for p in self.params:
            if p.grad is not None and not p.frozen and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in parameter {p.name or '<unnamed>'}")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            if p.frozen or p.grad is None:
                continue
            g = p.grad
            m, v = self.m[i], self.v[i]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
