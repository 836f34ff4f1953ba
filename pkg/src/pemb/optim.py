"""Learning-rate schedule and a decoupled-weight-decay Adam."""

from __future__ import annotations

import math
from collections.abc import Sequence

import numpy as np

from .tensor import Tensor

__all__ = ["lr_at", "warmup_steps", "AdamW"]


def warmup_steps(total: int, warmup: float) -> int:
    return math.ceil(warmup * total)


def lr_at(step: int, cfg) -> float:
    """Linear ramp from 0 over ceil(warmup * total) steps, then constant (or cosine)."""
    total = cfg.total_steps
    w = warmup_steps(total, cfg.warmup)
    if step < w:
        return cfg.lr * step / w
    if getattr(cfg, "schedule", "constant") == "cosine" and total > w:
        frac = min(1.0, (step - w) / (total - w))
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    return cfg.lr


class AdamW:
    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        # per-parameter step counts, so skipped tensors keep exact bias correction
        self.t = [0] * len(self.params)

    def step(self, lr: float) -> None:
        for i, (p, m, v) in enumerate(zip(self.params, self.m, self.v)):
            g = p.grad
            if g is None or not np.any(g):
                # a zero gradient leaves the parameter untouched
                continue
            self.t[i] += 1
            c1 = 1.0 - self.b1 ** self.t[i]
            c2 = 1.0 - self.b2 ** self.t[i]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd:
                upd = upd + self.wd * p.data
            p.data -= (lr * upd).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
