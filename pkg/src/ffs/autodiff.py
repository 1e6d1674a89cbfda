"""Minimal reverse-mode differentiation over numpy arrays.

A :class:`Var` wraps an ``ndarray``.  Operations on variables that (directly
or indirectly) depend on a leaf created with ``requires_grad=True`` record a
vector-Jacobian product; everything else is evaluated eagerly with no tape,
so pure inference pays only the cost of the wrapper objects.

Only the operations needed by the flow and head code are provided.
"""

from __future__ import annotations

import numpy as np


class Var:
    __slots__ = ("value", "requires_grad", "_parents", "_vjp", "grad")
    __array_priority__ = 1000
    __array_ufunc__ = None

    def __init__(self, value, requires_grad=False, _parents=(), _vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Var({self.value!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def backward(self, seed=None):
        backward(self, seed)


def wrap(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def leaf(value) -> Var:
    return Var(np.array(value, dtype=np.float64), requires_grad=True)


def value(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _node(out, parents, vjp):
    """Build a result node; the tape entry is dropped when no input needs it."""
    tracked = tuple(p for p in parents if p.requires_grad)
    if not tracked:
        return Var(out)
    return Var(out, True, parents, vjp)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    a, b = wrap(a), wrap(b)
    return _node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = wrap(a), wrap(b)
    return _node(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = wrap(a), wrap(b)
    return _node(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.shape),
            _unbroadcast(g * a.value, b.shape),
        ),
    )


def div(a, b):
    a, b = wrap(a), wrap(b)
    out = a.value / b.value
    return _node(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * out / b.value, b.shape),
        ),
    )


def neg(a):
    a = wrap(a)
    return _node(-a.value, (a,), lambda g: (-g,))


def matmul(a, b):
    a, b = wrap(a), wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    return _node(
        a.value @ b.value,
        (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def transpose(a):
    a = wrap(a)
    return _node(a.value.T, (a,), lambda g: (g.T,))


def exp(a):
    a = wrap(a)
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    a = wrap(a)
    return _node(np.log(a.value), (a,), lambda g: (g / a.value,))


def tanh(a):
    a = wrap(a)
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    a = wrap(a)
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a):
    a = wrap(a)
    out = np.empty_like(a.value)
    pos = a.value >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.value[pos]))
    e = np.exp(a.value[~pos])
    out[~pos] = e / (1.0 + e)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def clip(a, lo, hi):
    """Clamp values; the gradient is zero where clamping was active."""
    a = wrap(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _node(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


def maximum0(a):
    return relu(a)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = wrap(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = wrap(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def logsumexp(a, axis=-1):
    """Stable log-sum-exp along one axis (max subtracted first)."""
    a = wrap(a)
    m = a.value.max(axis=axis, keepdims=True)
    shifted = np.exp(a.value - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out = (np.log(total) + m).squeeze(axis)
    soft = shifted / total

    def vjp(g):
        return (np.expand_dims(g, axis) * soft,)

    return _node(out, (a,), vjp)


def log_softmax(a, axis=-1):
    a = wrap(a)
    lse = logsumexp(a, axis=axis)
    return a - expand_dims(lse, axis)


def expand_dims(a, axis):
    a = wrap(a)
    return _node(
        np.expand_dims(a.value, axis), (a,), lambda g: (g.squeeze(axis),)
    )


def getitem(a, index):
    a = wrap(a)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.value[index], (a,), vjp)


def take_cols(a, cols):
    """Column gather ``a[:, cols]`` for 2-D ``a``."""
    a = wrap(a)
    cols = np.asarray(cols)

    def vjp(g):
        out = np.zeros_like(a.value)
        out[:, cols] = g
        return (out,)

    return _node(a.value[:, cols], (a,), vjp)


def merge_cols(a, cols_a, b, cols_b):
    """Inverse of two ``take_cols``: place columns of ``a`` and ``b``."""
    a, b = wrap(a), wrap(b)
    n = a.shape[0]
    out = np.empty((n, len(cols_a) + len(cols_b)))
    out[:, cols_a] = a.value
    out[:, cols_b] = b.value
    return _node(out, (a, b), lambda g: (g[:, cols_a], g[:, cols_b]))


def concat_rows(parts):
    parts = [wrap(p) for p in parts]
    sizes = np.cumsum([p.shape[0] for p in parts])[:-1]
    return _node(
        np.concatenate([p.value for p in parts], axis=0),
        tuple(parts),
        lambda g: tuple(np.split(g, sizes, axis=0)),
    )


def inv(a):
    a = wrap(a)
    out = np.linalg.inv(a.value)
    return _node(out, (a,), lambda g: (-out.T @ g @ out.T,))


def backward(root: Var, seed=None):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if not root.requires_grad:
        return
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(root): np.ones_like(root.value) if seed is None else np.asarray(seed, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
