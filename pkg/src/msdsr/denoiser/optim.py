"""AdamW with linear warmup and cosine decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .net import NumericError


@dataclass
class AdamW:
    lr: float = 1e-4
    total_steps: int = 1000
    weight_decay: float = 0.01
    warmup: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def lr_at(self, step: int) -> float:
        """Linear ramp from 0 over the warmup fraction, then cosine decay to 0."""
        warm = self.warmup * self.total_steps
        if step < warm:
            return self.lr * step / warm
        span = max(self.total_steps - warm, 1e-12)
        progress = min((step - warm) / span, 1.0)
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * progress))

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Return updated parameters; tensors missing from ``grads`` are left untouched."""
        for name, g in grads.items():
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name}")
            if g.shape != params[name].shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name} at step {self.step_count}")
        lr = self.lr_at(self.step_count)
        self.step_count += 1
        k = self.step_count
        c1 = 1.0 - self.beta1 ** k
        c2 = 1.0 - self.beta2 ** k
        out = dict(params)
        for name, g in grads.items():
            p = params[name]
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            out[name] = (p - lr * self.weight_decay * p - lr * update).astype(p.dtype)
        return out
