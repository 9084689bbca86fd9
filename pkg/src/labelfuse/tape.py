"""A minimal reverse-mode tape over numpy float64 arrays.

Operations execute eagerly.  While gradients are enabled every result node
remembers its parents and a closure that pushes the output gradient back to
them; ``Tape.from_root(loss)`` collects the nodes reachable from a scalar
loss in topological order and ``backward`` visits each exactly once in
reverse.  Inside ``no_grad()`` the same functions run without recording,
which is what the plain (non-training) forward paths use.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np

# recording is toggled per thread: worker threads that merge under no_grad
# must not disturb a training thread that is recording
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Var:
    """A float64 array plus an accumulated gradient of the same shape."""

    __slots__ = ("value", "grad", "parents", "_backward")

    def __init__(self, value, parents=(), backward=None):
        if type(value) is np.ndarray and value.dtype == np.float64:
            self.value = value
        else:
            self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        if not parents or grad_enabled():
            self.parents = parents
            self._backward = backward
        else:
            self.parents = ()
            self._backward = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    # arithmetic sugar; scalars and arrays are lifted to constants
    def __add__(self, other):
        return add(self, as_var(other))

    def __radd__(self, other):
        return add(as_var(other), self)

    def __sub__(self, other):
        return sub(self, as_var(other))

    def __rsub__(self, other):
        return sub(as_var(other), self)

    def __mul__(self, other):
        return mul(self, as_var(other))

    def __rmul__(self, other):
        return mul(as_var(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_var(other))

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` (the inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if squeeze:
        g = g.sum(axis=squeeze, keepdims=True)
    return g.reshape(shape)


def add(a: Var, b: Var) -> Var:
    out = Var(a.value + b.value, (a, b))

    def backward(g):
        a.accumulate(_unbroadcast(g, a.value.shape))
        b.accumulate(_unbroadcast(g, b.value.shape))

    if out.parents:
        out._backward = backward
    return out


def sub(a: Var, b: Var) -> Var:
    out = Var(a.value - b.value, (a, b))

    def backward(g):
        a.accumulate(_unbroadcast(g, a.value.shape))
        b.accumulate(_unbroadcast(-g, b.value.shape))

    if out.parents:
        out._backward = backward
    return out


def mul(a: Var, b: Var) -> Var:
    out = Var(a.value * b.value, (a, b))

    def backward(g):
        a.accumulate(_unbroadcast(g * b.value, a.value.shape))
        b.accumulate(_unbroadcast(g * a.value, b.value.shape))

    if out.parents:
        out._backward = backward
    return out


def neg(a: Var) -> Var:
    out = Var(-a.value, (a,))

    def backward(g):
        a.accumulate(-g)

    if out.parents:
        out._backward = backward
    return out


def matmul(a: Var, b: Var) -> Var:
    """Batched matrix product with numpy broadcasting over leading axes."""
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ValueError("matmul operands must have rank >= 2")
    out = Var(a.value @ b.value, (a, b))

    def backward(g):
        a.accumulate(_unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.value.shape))
        b.accumulate(_unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.value.shape))

    if out.parents:
        out._backward = backward
    return out


def transpose(a: Var, axes: tuple) -> Var:
    out = Var(np.transpose(a.value, axes), (a,))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a.accumulate(np.transpose(g, inverse))

    if out.parents:
        out._backward = backward
    return out


def reshape(a: Var, shape: tuple) -> Var:
    out = Var(a.value.reshape(shape), (a,))

    def backward(g):
        a.accumulate(g.reshape(a.value.shape))

    if out.parents:
        out._backward = backward
    return out


def stack(vars_: list, axis: int) -> Var:
    vars_ = [as_var(v) for v in vars_]
    out = Var(np.stack([v.value for v in vars_], axis=axis), tuple(vars_))

    def backward(g):
        for i, v in enumerate(vars_):
            v.accumulate(np.take(g, i, axis=axis))

    if out.parents:
        out._backward = backward
    return out


def concat(vars_: list, axis: int) -> Var:
    vars_ = [as_var(v) for v in vars_]
    out = Var(np.concatenate([v.value for v in vars_], axis=axis), tuple(vars_))
    sizes = [v.value.shape[axis] for v in vars_]

    def backward(g):
        start = 0
        for v, size in zip(vars_, sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, start + size)
            v.accumulate(g[tuple(index)])
            start += size

    if out.parents:
        out._backward = backward
    return out


def take_index(a: Var, i: int, axis: int) -> Var:
    """Select index ``i`` along ``axis`` (drops that axis)."""
    out = Var(np.take(a.value, i, axis=axis), (a,))

    def backward(g):
        full = np.zeros_like(a.value)
        index = [slice(None)] * a.value.ndim
        index[axis] = i
        full[tuple(index)] = g
        a.accumulate(full)

    if out.parents:
        out._backward = backward
    return out


def sum_all(a: Var) -> Var:
    out = Var(a.value.sum(), (a,))

    def backward(g):
        a.accumulate(np.broadcast_to(g, a.value.shape).copy())

    if out.parents:
        out._backward = backward
    return out


def mean_all(a: Var) -> Var:
    n = a.value.size
    out = Var(a.value.mean(), (a,))

    def backward(g):
        a.accumulate(np.broadcast_to(g / n, a.value.shape).copy())

    if out.parents:
        out._backward = backward
    return out


def relu(a: Var) -> Var:
    out = Var(np.maximum(a.value, 0.0), (a,))

    def backward(g):
        a.accumulate(g * (a.value > 0.0))

    if out.parents:
        out._backward = backward
    return out


_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def gelu(a: Var) -> Var:
    """Elementwise GeLU, tanh approximation; the backward differentiates the
    approximation itself so gradient checks are exact."""
    x = a.value
    inner = _GELU_K * (x + _GELU_C * x ** 3)
    t = np.tanh(inner)
    out = Var(0.5 * x * (1.0 + t), (a,))

    def backward(g):
        dinner = _GELU_K * (1.0 + 3.0 * _GELU_C * x ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner
        a.accumulate(g * local)

    if out.parents:
        out._backward = backward
    return out


def softmax(a: Var) -> Var:
    """Row softmax over the last axis (max-shifted for stability)."""
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Var(s, (a,))

    def backward(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        a.accumulate(s * (g - dot))

    if out.parents:
        out._backward = backward
    return out


def layer_norm(a: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
    """Normalize over the last axis with biased variance, then scale and shift."""
    x = a.value
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = Var(gamma.value * xh + beta.value, (a, gamma, beta))

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gamma.accumulate(_unbroadcast((g * xh).sum(axis=lead), gamma.value.shape))
        beta.accumulate(_unbroadcast(g.sum(axis=lead), beta.value.shape))
        dxh = g * gamma.value
        term = dxh.sum(axis=-1, keepdims=True) + xh * (dxh * xh).sum(axis=-1, keepdims=True)
        a.accumulate(inv / d * (d * dxh - term))

    if out.parents:
        out._backward = backward
    return out


class Tape:
    """The nodes of one recorded forward pass, topologically ordered."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Var) -> "Tape":
        order: list[Var] = []
        seen: set[int] = set()
        stack: list[tuple[Var, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def backward_from(self, root: Var) -> None:
        root.accumulate(np.ones_like(root.value))
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def backward(loss: Var) -> Tape:
    """Reverse-mode gradients of a scalar loss; returns the walked tape."""
    if loss.value.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.value.shape}")
    tape = Tape.from_root(loss)
    tape.backward_from(loss)
    return tape
