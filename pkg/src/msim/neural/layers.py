"""Parameter containers: linear layers, layer norm and the two-hidden-layer MLP."""
from __future__ import annotations

import numpy as np

from msim.neural.tensor import ShapeError, Tensor, gelu, layer_norm


class Module:
    """Base class collecting named parameters from attributes and child modules."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def param(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        bound = 1.0 / np.sqrt(n_in)
        if zero:
            self.weight = param(np.zeros((n_in, n_out)))
            self.bias = param(np.zeros(n_out))
        else:
            self.weight = param(rng.uniform(-bound, bound, size=(n_in, n_out)))
            self.bias = param(rng.uniform(-bound, bound, size=n_out))
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"linear: input width {x.shape[-1]} but layer expects {self.n_in}")
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, width: int):
        self.gain = param(np.ones(width))
        self.bias = param(np.zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class MLP(Module):
    """``(linear -> layer norm -> GELU) x n_hidden -> linear``."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, hidden: int = 128,
                 n_hidden: int = 2, zero_output: bool = False):
        widths = [n_in] + [hidden] * n_hidden
        self.hidden = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.norms = [LayerNorm(hidden) for _ in range(n_hidden)]
        self.out = Linear(widths[-1], n_out, rng, zero=zero_output)
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"mlp: input width {x.shape[-1]} but MLP expects {self.n_in}")
        for lin, ln in zip(self.hidden, self.norms):
            x = gelu(ln(lin(x)))
        return self.out(x)
