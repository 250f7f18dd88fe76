from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..tensor import Tensor


@dataclass(frozen=True)
class AdamWSpec:
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = 1.0


class AdamW:
    """Adam with decoupled weight decay and optional global-norm clipping."""

    def __init__(self, params: Sequence[Tensor], spec: AdamWSpec = AdamWSpec()):
        self.params = list(params)
        self.spec = spec
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(np.vdot(p.grad, p.grad)
                                 for p in self.params if p.grad is not None)))

    def step(self, lr: float) -> float:
        """Apply one update; returns the pre-clip gradient norm."""
        b1, b2 = self.spec.betas
        self.t += 1
        norm = self.grad_norm()
        scale = 1.0
        if self.spec.grad_clip is not None and norm > self.spec.grad_clip:
            scale = self.spec.grad_clip / (norm + 1e-12)
        step_size = lr / (1.0 - b1 ** self.t)
        inv_c2 = 1.0 / np.sqrt(1.0 - b2 ** self.t)
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            buf = np.multiply(g, (1.0 - b1) * scale)
            m *= b1
            m += buf
            np.multiply(g, g, out=buf)
            buf *= (1.0 - b2) * scale * scale
            v *= b2
            v += buf
            np.sqrt(v, out=buf)
            buf *= inv_c2
            buf += self.spec.eps
            np.divide(m, buf, out=buf)
            buf *= step_size
            if self.spec.weight_decay:
                p.data *= 1.0 - lr * self.spec.weight_decay
            p.data -= buf
        return norm
