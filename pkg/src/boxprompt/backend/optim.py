"""Adam optimizer over Parameter lists; frozen parameters are never touched."""

from __future__ import annotations

import numpy as np

from .tensor import Parameter


class NonFiniteGradient(RuntimeError):
    """Raised when a training step sees a NaN/Inf gradient."""


class Adam:
    def __init__(self, params: list[Parameter], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = {id(p): np.zeros(p.shape, dtype=np.float64) for p in self.params if p.trainable}
        self._v = {id(p): np.zeros(p.shape, dtype=np.float64) for p in self.params if p.trainable}

    def zero_grad(self) -> None:
        for p in self.params:
            if p.trainable:
                p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p in self.params:
            if not p.trainable:
                continue
            g = p.gradient.data.astype(np.float64)
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in parameter {p.name!r} at step {self.t}")
            m = self._m[id(p)]
            v = self._v[id(p)]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.assign(p.value.data - update.astype(p.dtype))
