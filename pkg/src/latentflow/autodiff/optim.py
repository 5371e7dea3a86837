"""AdamW with global-norm clipping and a one-cycle learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np


def one_cycle_lr(step: int, total: int, peak: float, pct_start: float = 0.05,
                 div_factor: float = 25.0, final_div: float = 1e4) -> float:
    """Linear warm-up from peak/div_factor to peak, then linear decay to peak/final_div."""
    if total <= 1:
        return peak
    warm = max(1, int(round(pct_start * total)))
    start, end = peak / div_factor, peak / final_div
    if step < warm:
        return start + (peak - start) * step / warm
    frac = min(1.0, (step - warm) / max(1, total - 1 - warm))
    return peak + (end - peak) * frac


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class AdamW:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-5):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype)
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data * (1.0 - self.lr * self.weight_decay) - self.lr * update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
