"""Adam with decoupled weight decay and a warmup / inverse-sqrt schedule."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor


@dataclass
class OptimConfig:
    peak_lr: float = 3e-4
    warmup_steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0


def inverse_sqrt_lr(step: int, peak_lr: float, warmup_steps: int) -> float:
    """Linear warmup to ``peak_lr`` then decay proportional to ``step**-0.5``."""
    step = max(step, 1)
    if warmup_steps <= 0:
        return peak_lr
    if step <= warmup_steps:
        return peak_lr * step / warmup_steps
    return peak_lr * np.sqrt(warmup_steps / step)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class Adam:
    def __init__(self, params: Sequence[Tensor], cfg: OptimConfig):
        self.params = list(params)
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self) -> float:
        return inverse_sqrt_lr(self.t, self.cfg.peak_lr, self.cfg.warmup_steps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        """Clip, update, and return the pre-clip gradient norm."""
        c = self.cfg
        norm = clip_grad_norm(self.params, c.clip_norm)
        self.t += 1
        lr = self.lr
        b1, b2 = c.beta1, c.beta2
        bc1, bc2 = 1 - b1**self.t, 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad**2
            if c.weight_decay:
                p.data = p.data * (1 - lr * c.weight_decay)
            p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
        return norm
