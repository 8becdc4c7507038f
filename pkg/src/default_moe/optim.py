"""AdamW, warmup-plus-cosine learning-rate schedule and global-norm clipping."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .autodiff import Tensor


def cosine_lr(step: int, peak: float, total_steps: int, warmup_steps: int = 0, min_ratio: float = 0.1) -> float:
    """Linear warmup to ``peak`` then cosine decay to ``peak * min_ratio`` at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return peak * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return peak * (min_ratio + (1 - min_ratio) * 0.5 * (1 + math.cos(math.pi * progress)))


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-6)
        for p in params:
            p.grad *= p.grad.dtype.type(factor)
    return total


class AdamW:
    """Adam with decoupled weight decay.

    Decay applies only to parameters whose name is in ``decay``; by default
    that is every parameter with two or more axes (norm gains are exempt).
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.0, decay: set[str] | None = None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay = decay if decay is not None else {n for n, p in params.items() if p.data.ndim >= 2}
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            dt = p.data.dtype.type
            m, v = self.m[name], self.v[name]
            m *= dt(b1)
            m += dt(1 - b1) * g
            v *= dt(b2)
            v += dt(1 - b2) * (g * g)
            if name in self.decay and self.weight_decay:
                p.data *= dt(1 - lr * self.weight_decay)
            p.data -= dt(lr / c1) * m / (np.sqrt(v / dt(c2)) + dt(self.eps))

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for name in self.params:
            self.m[name] = np.array(state["m"][name], dtype=self.m[name].dtype)
            self.v[name] = np.array(state["v"][name], dtype=self.v[name].dtype)
