from __future__ import annotations

import numpy as np

from msim.neural.tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


class Adam:
    """Bias-corrected Adam over a fixed, ordered parameter list."""

    def __init__(self, params: list[Tensor], lr: float = 1e-5, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: list[np.ndarray] | None = None) -> None:
        if grads is None:
            grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        for k, g in enumerate(grads):
            if not np.isfinite(g).all():
                raise NonFiniteGradient(f"non-finite gradient for parameter {k}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.step": np.array([float(self.step_count)])}
        for k, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam.m.{k}"] = m
            out[f"adam.v.{k}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.step_count = int(arrays["adam.step"][0])
        for k in range(len(self.params)):
            self.m[k] = np.array(arrays[f"adam.m.{k}"], dtype=np.float64)
            self.v[k] = np.array(arrays[f"adam.v.{k}"], dtype=np.float64)
