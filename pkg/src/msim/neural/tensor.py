"""A small reverse-mode differentiation engine over float64 numpy arrays.

Each :class:`Tensor` records the operation that produced it and a closure that
pushes its adjoint back to its parents.  Graphs are rebuilt on every forward
pass, which is what the layered position updates need.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference rollouts)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    # -- graph plumbing ----------------------------------------------------
    @staticmethod
    def _make(data, parents, op, backward):
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
            out.op = op
        return out

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        """Accumulate adjoints of ``self`` into every reachable leaf.

        Nodes are visited once, in reverse topological order.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def zero_grad(self) -> None:
        self.grad = None

    # -- conveniences --------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        _check_broadcast(self.data, other.data, "add")
        sa, sb = self.shape, other.shape
        return Tensor._make(self.data + other.data, (self, other), "add",
                            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        _check_broadcast(self.data, other.data, "sub")
        sa, sb = self.shape, other.shape
        return Tensor._make(self.data - other.data, (self, other), "sub",
                            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), "neg", lambda g: (-g,))

    def __mul__(self, other):
        other = as_tensor(other)
        _check_broadcast(self.data, other.data, "mul")
        a, b = self.data, other.data
        return Tensor._make(a * b, (self, other), "mul",
                            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        _check_broadcast(self.data, other.data, "div")
        a, b = self.data, other.data
        out = a / b
        return Tensor._make(out, (self, other), "div",
                            lambda g: (_unbroadcast(g / b, a.shape),
                                       _unbroadcast(-g * out / b, b.shape)))

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p: float):
        a = self.data
        return Tensor._make(a**p, (self,), "pow", lambda g: (g * p * a ** (p - 1),))

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        return Tensor._make(a @ b, (self, other), "matmul", lambda g: (g @ b.T, a.T @ g))

    def __getitem__(self, idx):
        shape = self.shape

        def back(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._make(self.data[idx], (self,), "index", back)

    # -- reductions and reshapes ----------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum", back)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        old = self.shape
        return Tensor._make(self.data.reshape(*shape), (self,), "reshape",
                            lambda g: (g.reshape(old),))

    @property
    def T(self):
        return Tensor._make(self.data.T, (self,), "transpose", lambda g: (g.T,))

    # -- elementwise functions -------------------------------------------------
    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), "sqrt", lambda g: (0.5 * g / out,))

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), "exp", lambda g: (g * out,))

    def log(self):
        a = self.data
        return Tensor._make(np.log(a), (self,), "log", lambda g: (g / a,))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), "tanh", lambda g: (g * (1.0 - out**2),))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Free-function primitives
# ---------------------------------------------------------------------------

def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "maximum")
    pick_a = a.data >= b.data
    sa, sb = a.shape, b.shape
    return Tensor._make(np.maximum(a.data, b.data), (a, b), "maximum",
                        lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), sa),
                                   _unbroadcast(np.where(pick_a, 0.0, g), sb)))


def atan2(y, x) -> Tensor:
    y, x = as_tensor(y), as_tensor(x)
    _check_broadcast(y.data, x.data, "atan2")
    yd, xd = y.data, x.data
    r2 = xd**2 + yd**2
    return Tensor._make(np.arctan2(yd, xd), (y, x), "atan2",
                        lambda g: (_unbroadcast(g * xd / r2, yd.shape),
                                   _unbroadcast(-g * yd / r2, xd.shape)))


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    splits = np.cumsum(sizes)[:-1]
    return Tensor._make(data, tuple(ts), "concat",
                        lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in ts], axis=axis)
    return Tensor._make(data, tuple(ts), "stack",
                        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))))


def gather(x, index) -> Tensor:
    """Rows ``x[index]`` with a scatter-add backward."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return Tensor._make(x.data[index], (x,), "gather", back)


def scatter_add(x, index, n: int) -> Tensor:
    """Sum rows of ``x`` into ``n`` output rows; accumulation follows ``index`` order."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if len(index) != x.shape[0]:
        raise ShapeError(f"scatter_add: index length {len(index)} vs rows {x.shape[0]}")
    out = np.zeros((n,) + x.shape[1:])
    np.add.at(out, index, x.data)
    return Tensor._make(out, (x,), "scatter_add", lambda g: (g[index],))


def cross(a, b) -> Tensor:
    """Cross product along the last axis (length 3)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != 3 or b.shape[-1] != 3:
        raise ShapeError(f"cross: need last axis 3, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._make(np.cross(ad, bd), (a, b), "cross",
                        lambda g: (_unbroadcast(np.cross(bd, g), ad.shape),
                                   _unbroadcast(np.cross(g, ad), bd.shape)))


def dot(a, b) -> Tensor:
    """Inner product along the last axis, keeping a trailing axis of size 1."""
    return (as_tensor(a) * b).sum(axis=-1, keepdims=True)


def norm(x) -> Tensor:
    """Euclidean norm along the last axis, keeping a trailing axis of size 1."""
    x = as_tensor(x)
    out = np.sqrt(np.sum(x.data**2, axis=-1, keepdims=True))
    xd = x.data
    return Tensor._make(out, (x,), "norm", lambda g: (g * xd / out,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """Tanh-approximated GELU with the exact derivative of that formula."""
    x = as_tensor(x)
    a = x.data
    a2 = a * a
    t = np.tanh(_GELU_C * a * (1.0 + 0.044715 * a2))
    out = 0.5 * a * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * a2)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t**2) * dinner),)

    return Tensor._make(out, (x,), "gelu", back)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the learnable affine map."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    gshape, bshape = gain.shape, bias.shape

    def back(g):
        gx = g * gain.data
        n = a.shape[-1]
        dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        return (dx, _unbroadcast(g * xhat, gshape), _unbroadcast(g, bshape))

    return Tensor._make(out, (x, gain, bias), "layer_norm", back)


def external(x, fn) -> Tensor:
    """Scalar node ``fn(x.data) -> (value, grad)`` whose adjoint is supplied by ``fn``.

    Used to splice analytically differentiated physics (the training loss)
    into a recorded graph.
    """
    x = as_tensor(x)
    value, grad = fn(x.data)
    grad = np.asarray(grad, dtype=np.float64).reshape(x.shape)
    return Tensor._make(np.asarray(float(value)), (x,), "external", lambda g: (g * grad,))


def where_rows(mask, x) -> Tensor:
    """Zero the rows of ``x`` where ``mask`` is False."""
    m = np.asarray(mask, dtype=np.float64).reshape((-1,) + (1,) * (as_tensor(x).ndim - 1))
    return as_tensor(x) * m
