from __future__ import annotations

import math

import numpy as np


def cosine_lr(step: int, total_steps: int, peak_lr: float, warmup_steps: int = 0,
              min_lr: float = 0.0) -> float:
    """Linear warmup to ``peak_lr`` then half-cosine decay to ``min_lr``."""
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return min_lr + 0.5 * (peak_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay over a dict of float64 arrays.

    ``no_decay`` lists parameter names exempt from decay (biases, norms,
    temperature).
    """

    def __init__(self, params: dict, lr=1e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, no_decay=()):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay and k not in self.no_decay:
                params[k] *= 1.0 - lr * self.weight_decay
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
