"""Reverse-mode differentiation on top of float64 numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and
a closure that pushes the output gradient back into them.  Graphs are built
fresh on every forward pass and discarded afterwards.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        parents: Sequence["Tensor"] = (),
        backward: Optional[Callable[[], None]] = None,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Backpropagate from this node; a scalar output defaults to seed 1."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        # iterative DFS; deep residual stacks overflow the recursion limit otherwise
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.accumulate(np.broadcast_to(grad, self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # arithmetic -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


class Parameter(Tensor):
    """A trainable block: value, gradient and momentum buffer share one shape."""

    __slots__ = ("momentum_buffer",)

    def __init__(self, value, name: Optional[str] = None):
        super().__init__(value, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)
        self.momentum_buffer = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    @property
    def gradient(self) -> np.ndarray:
        return self.grad

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


# elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def backward():
        a.accumulate(_unbroadcast(out.grad, a.shape))
        b.accumulate(_unbroadcast(out.grad, b.shape))

    out = Tensor(out_data, (a, b), backward)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def backward():
        a.accumulate(_unbroadcast(out.grad * b.data, a.shape))
        b.accumulate(_unbroadcast(out.grad * a.data, b.shape))

    out = Tensor(out_data, (a, b), backward)
    return out


def neg(a: Tensor) -> Tensor:
    def backward():
        a.accumulate(-out.grad)

    out = Tensor(-a.data, (a,), backward)
    return out


def tabs(a: Tensor) -> Tensor:
    def backward():
        a.accumulate(out.grad * np.sign(a.data))

    out = Tensor(np.abs(a.data), (a,), backward)
    return out


def log(a: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log; values below ``floor`` are clamped (zero gradient there)."""
    x = np.maximum(a.data, floor) if floor > 0 else a.data

    def backward():
        g = out.grad / x
        if floor > 0:
            g = np.where(a.data >= floor, g, 0.0)
        a.accumulate(g)

    out = Tensor(np.log(x), (a,), backward)
    return out


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """``max(a, lo)``; clamped entries pass no gradient."""
    mask = a.data >= lo

    def backward():
        a.accumulate(out.grad * mask)

    out = Tensor(np.where(mask, a.data, lo), (a,), backward)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward():
        a.accumulate(out.grad * mask)

    out = Tensor(a.data * mask, (a,), backward)
    return out


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope)

    def backward():
        a.accumulate(out.grad * scale)

    out = Tensor(a.data * scale, (a,), backward)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)

    def backward():
        a.accumulate(out.grad * s * (1.0 - s))

    out = Tensor(s, (a,), backward)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def smooth_clamp(a: Tensor, sharpness: float = 40.0) -> Tensor:
    """Differentiable squash onto (0, 1) that is close to the identity inside.

    ``(softplus(k x) - softplus(k (x - 1))) / k``; the deviation from a hard
    clamp is at most ``log(2) / k`` and decays exponentially away from 0 and 1.
    """
    k = sharpness
    x = a.data
    y = (_softplus(k * x) - _softplus(k * (x - 1.0))) / k

    def backward():
        a.accumulate(out.grad * (_sigmoid(k * x) - _sigmoid(k * (x - 1.0))))

    out = Tensor(y, (a,), backward)
    return out


# reductions and reshaping -------------------------------------------------

def tsum(a: Tensor) -> Tensor:
    def backward():
        a.accumulate(np.broadcast_to(out.grad, a.shape))

    out = Tensor(a.data.sum(), (a,), backward)
    return out


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward():
        a.accumulate(np.broadcast_to(out.grad / n, a.shape))

    out = Tensor(a.data.mean(), (a,), backward)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    def backward():
        a.accumulate(out.grad.reshape(a.shape))

    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    out = Tensor(out_data, (a,), backward)
    return out


def take(a: Tensor, index) -> Tensor:
    """Basic/advanced indexing with scatter-add backward."""

    def backward():
        g = np.zeros_like(a.data)
        np.add.at(g, index, out.grad)
        a.accumulate(g)

    out = Tensor(a.data[index], (a,), backward)
    return out


def dot(a: Tensor, b) -> Tensor:
    """Inner product of ``a`` with a constant or tensor of the same shape."""
    return tsum(mul(a, b))
