"""Adaptive-moment optimizer with linear warm-up and optional cosine decay."""

from __future__ import annotations

import numpy as np

from .nn import Parameter


class Adam:
    def __init__(
        self,
        params: list[Parameter],
        lr: float = 3e-4,
        betas: tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        warmup: int = 100,
        grad_clip: float | None = 1.0,
        decay_steps: int | None = None,
    ):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup = warmup
        self.grad_clip = grad_clip
        self.decay_steps = decay_steps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        lr = self.lr
        if self.warmup > 0:
            lr *= min(1.0, (self.step_count + 1) / self.warmup)
        if self.decay_steps:
            frac = min(1.0, self.step_count / self.decay_steps)
            lr *= 0.5 * (1.0 + np.cos(np.pi * frac))
        return lr

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in self.params)))

    def step(self) -> None:
        lr = self.current_lr()
        self.step_count += 1
        b1, b2 = self.betas
        clip = 1.0
        if self.grad_clip is not None:
            norm = self.grad_norm()
            if norm > self.grad_clip:
                clip = self.grad_clip / (norm + 1e-12)
        c1 = 1 - b1**self.step_count
        c2 = 1 - b2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad * np.float32(clip)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if lr == 0.0:
                continue
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                upd = upd + self.weight_decay * p.data
            p.data = (p.data - np.float32(lr) * upd).astype(np.float32)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)
