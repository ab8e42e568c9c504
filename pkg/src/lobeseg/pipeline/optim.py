"""First/second-moment adaptive optimizer with bias correction."""

from __future__ import annotations

import numpy as np

from ..autodiff import Tensor


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype, copy=False)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": a for k, a in self.m.items()}
        out.update({f"v/{k}": a for k, a in self.v.items()})
        return out

    def load_state(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k] = tensors[f"m/{k}"].copy()
            self.v[k] = tensors[f"v/{k}"].copy()
        self.t = t
