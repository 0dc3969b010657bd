from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import NonFiniteError, Tensor


class AdamW:
    """AdamW with decoupled weight decay.

    Tensors of rank <= 1 (biases, norm gains, mask tokens) are exempt from
    weight decay.
    """

    def __init__(self, params: Sequence[tuple[str, Tensor]], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.betas = tuple(float(b) for b in betas)
        self.eps = float(eps)
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self, lr: float, wd: float) -> None:
        for name, p in self.params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NonFiniteError(f"non-finite gradient in {name}; step aborted")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if wd and p.data.ndim > 1:
                p.data *= p.data.dtype.type(1.0 - lr * wd)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, _ in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for name, p in self.params:
            self.m[name] = np.array(arrays[f"adam.m.{name}"], dtype=p.data.dtype)
            self.v[name] = np.array(arrays[f"adam.v.{name}"], dtype=p.data.dtype)
        self.t = int(t)
