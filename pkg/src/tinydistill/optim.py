"""Adam with linear warmup/decay and global gradient-norm clipping."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor


def linear_schedule(step: int, total: int, peak: float, warmup: float = 0.1) -> float:
    """Learning rate at 0-based ``step``: ramp over the first ``warmup`` fraction, then decay to 0."""
    if total <= 0:
        return peak
    warm = int(round(warmup * total))
    if warm and step < warm:
        return peak * (step + 1) / warm
    return peak * max(0.0, (total - step) / max(1, total - warm))


class Adam:
    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        total_steps: int,
        warmup: float = 0.1,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        clip: float | None = 1.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.total_steps = total_steps
        self.warmup = warmup
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        return linear_schedule(self.t, self.total_steps, self.lr, self.warmup)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in self.params if p.grad is not None)))

    def step(self) -> float:
        """Apply one update from the accumulated grads, clear them, and return the pre-clip norm."""
        norm = self.grad_norm()
        factor = self.clip / norm if self.clip is not None and norm > self.clip else 1.0
        lr = self.current_lr()
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                g = 0.0
            else:
                g = p.grad * factor
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g if p.grad is not None else 0.0)
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None
        return norm
