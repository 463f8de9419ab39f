"""Adam optimizer over a ParamStore.

Buffers never mutate in place: each step builds a fresh frozen array and
swaps it onto the parameter, so graphs recorded against old values stay
valid and reruns stay bit-identical.
"""

from __future__ import annotations

import numpy as np

from .params import ParamStore

__all__ = ["Adam"]


class Adam:
    def __init__(self, store: ParamStore, lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.t = 0
        self._m = {name: np.zeros(p.shape) for name, p in store.items()}
        self._v = {name: np.zeros(p.shape) for name, p in store.items()}

    def step(self) -> None:
        """Apply one update from the gradients currently on the store's tensors."""
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.store.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[name] = self.beta1 * self._m[name] + (1.0 - self.beta1) * g
            v = self._v[name] = self.beta2 * self._v[name] + (1.0 - self.beta2) * (g * g)
            update = self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            new = p.data - update
            new.flags.writeable = False
            p.data = new

    def zero_grad(self) -> None:
        self.store.zero_grad()
