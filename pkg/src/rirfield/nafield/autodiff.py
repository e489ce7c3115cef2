"""
Minimal tape-free reverse-mode autodiff over numpy arrays.

Each ``Tensor`` remembers its parents and a closure that pushes its gradient
back to them. ``Tensor.backward`` walks the graph in reverse topological order.
Only the handful of ops the acoustic field needs are provided.
"""
from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.value)
        order, seen = [], set()

        def visit(t):
            # iterative DFS; deep MLP graphs would blow the recursion limit otherwise
            stack = [(t, False)]
            while stack:
                node, done = stack.pop()
                if done:
                    order.append(node)
                    continue
                if id(node) in seen or not node.requires_grad:
                    continue
                seen.add(id(node))
                stack.append((node, True))
                for p in node.parents:
                    stack.append((p, False))

        visit(self)
        self._accumulate(grad)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(a.value + b.value, parents=(a, b), backward_fn=back)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor(a.value - b.value, parents=(a, b), backward_fn=back)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.shape))

    return Tensor(a.value * b.value, parents=(a, b), backward_fn=back)


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``a`` of shape (..., k) and ``b`` a (k, m) matrix."""
    a, b = _lift(a), _lift(b)
    if b.value.ndim != 2:
        raise ValueError("right operand of matmul must be 2-D")

    def back(g):
        if a.requires_grad:
            a._accumulate(g @ b.value.T)
        if b.requires_grad:
            k = a.value.shape[-1]
            b._accumulate(a.value.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))

    return Tensor(a.value @ b.value, parents=(a, b), backward_fn=back)


def transpose(a: Tensor) -> Tensor:
    def back(g):
        a._accumulate(g.T)

    return Tensor(a.value.T, parents=(a,), backward_fn=back)


def softplus(a: Tensor) -> Tensor:
    v = a.value
    out = np.logaddexp(0.0, v)

    def back(g):
        # sigmoid, written to stay finite for large |v|
        a._accumulate(g * np.exp(-np.logaddexp(0.0, -v)))

    return Tensor(out, parents=(a,), backward_fn=back)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)

    def back(g):
        a._accumulate(g * out)

    return Tensor(out, parents=(a,), backward_fn=back)


def log(a: Tensor) -> Tensor:
    v = a.value

    def back(g):
        a._accumulate(g / v)

    return Tensor(np.log(v), parents=(a,), backward_fn=back)


def absolute(a: Tensor) -> Tensor:
    """``|a|`` with subgradient 0 at 0."""
    s = np.sign(a.value)

    def back(g):
        a._accumulate(g * s)

    return Tensor(np.abs(a.value), parents=(a,), backward_fn=back)


def square(a: Tensor) -> Tensor:
    v = a.value

    def back(g):
        a._accumulate(2.0 * g * v)

    return Tensor(v * v, parents=(a,), backward_fn=back)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, shape))

    return Tensor(a.value.sum(axis=axis, keepdims=keepdims), parents=(a,), backward_fn=back)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reverse_cumsum(a: Tensor, axis: int) -> Tensor:
    """``out[i] = sum_{j >= i} a[j]`` along ``axis``."""
    out = np.flip(np.cumsum(np.flip(a.value, axis), axis), axis)

    def back(g):
        a._accumulate(np.cumsum(g, axis))

    return Tensor(out, parents=(a,), backward_fn=back)


def take(a: Tensor, index, axis: int) -> Tensor:
    """Keep a single position along ``axis`` (dimension retained)."""
    sl = [slice(None)] * a.value.ndim
    sl[axis] = slice(index, index + 1)
    sl = tuple(sl)

    def back(g):
        full = np.zeros_like(a.value)
        full[sl] = g
        a._accumulate(full)

    return Tensor(a.value[sl], parents=(a,), backward_fn=back)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def back(g):
        a._accumulate(g.reshape(old))

    return Tensor(a.value.reshape(shape), parents=(a,), backward_fn=back)


def concat(parts, axis: int = -1) -> Tensor:
    parts = [_lift(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for p, gp in zip(parts, np.split(g, splits, axis=axis)):
            if p.requires_grad:
                p._accumulate(gp)

    return Tensor(np.concatenate([p.value for p in parts], axis=axis), parents=tuple(parts), backward_fn=back)
