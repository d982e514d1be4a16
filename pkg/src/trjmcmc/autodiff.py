"""Array-level reverse-mode automatic differentiation on top of numpy.

Every function here accepts plain ndarrays or :class:`Tensor` nodes. When no
argument is a ``Tensor`` the numpy result is returned directly, so the same
flow code serves fast evaluation and gradient-tracked training.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "value_of",
    "exp",
    "log",
    "tanh",
    "sqrt",
    "softplus",
    "softmax",
    "cumsum",
    "concatenate",
    "take_along_axis",
    "sum",
    "mean",
    "where",
    "grad",
]


class Tensor:
    __slots__ = ("value", "parents", "grad")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=float)
        self.parents = parents  # tuple of (Tensor, vjp: upstream grad -> grad for parent)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"

    # arithmetic
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
        return Tensor(-self.value, ((self, lambda g: -g),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        out = self.value[idx]
        shape = self.value.shape

        def vjp(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            return full

        return Tensor(out, ((self, vjp),))

    def reshape(self, *shape):
        old = self.value.shape
        return Tensor(self.value.reshape(*shape), ((self, lambda g: g.reshape(old)),))

    def backward(self, seed=None):
        """Accumulate d(self)/d(node) into ``node.grad`` for every ancestor."""
        order = _toposort(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value) if seed is None else np.asarray(seed, float)
        for node in reversed(order):
            if node.grad is None:
                continue
            for parent, vjp in node.parents:
                contrib = vjp(node.grad)
                parent.grad = contrib if parent.grad is None else parent.grad + contrib


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def value_of(x):
    return x.value if isinstance(x, Tensor) else x


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(a, b, out, da, db):
    parents = []
    if isinstance(a, Tensor):
        sa = a.value.shape
        parents.append((a, lambda g: _unbroadcast(da(g), sa)))
    if isinstance(b, Tensor):
        sb = b.value.shape
        parents.append((b, lambda g: _unbroadcast(db(g), sb)))
    return Tensor(out, tuple(parents))


def add(a, b):
    av, bv = value_of(a), value_of(b)
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return av + bv
    return _binary(a, b, av + bv, lambda g: g, lambda g: g)


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return av - bv
    return _binary(a, b, av - bv, lambda g: g, lambda g: -g)


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return av * bv
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def div(a, b):
    av, bv = value_of(a), value_of(b)
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return av / bv
    out = av / bv
    return _binary(a, b, out, lambda g: g / bv, lambda g: -g * out / bv)


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return out
    # only 2-D operands are needed by the conditioner networks
    parents = []
    if isinstance(a, Tensor):
        parents.append((a, lambda g: g @ bv.T))
    if isinstance(b, Tensor):
        parents.append((b, lambda g: av.T @ g))
    return Tensor(out, tuple(parents))


def _unary(x, fn, dfn):
    if not isinstance(x, Tensor):
        return fn(x)
    out = fn(x.value)
    return Tensor(out, ((x, lambda g: g * dfn(x.value, out)),))


def exp(x):
    return _unary(x, np.exp, lambda v, out: out)


def log(x):
    return _unary(x, np.log, lambda v, out: 1.0 / v)


def tanh(x):
    return _unary(x, np.tanh, lambda v, out: 1.0 - out * out)


def sqrt(x):
    return _unary(x, np.sqrt, lambda v, out: 0.5 / out)


def _softplus(v):
    return np.logaddexp(0.0, v)


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def softplus(x):
    return _unary(x, _softplus, lambda v, out: _sigmoid(v))


def softmax(x, axis=-1):
    def fn(v):
        e = np.exp(v - v.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)

    if not isinstance(x, Tensor):
        return fn(x)
    s = fn(x.value)
    return Tensor(s, ((x, lambda g: s * (g - (g * s).sum(axis=axis, keepdims=True))),))


def cumsum(x, axis=-1):
    if not isinstance(x, Tensor):
        return np.cumsum(x, axis=axis)

    def vjp(g):
        return np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)

    return Tensor(np.cumsum(x.value, axis=axis), ((x, vjp),))


def concatenate(parts, axis=-1):
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    if not any(isinstance(p, Tensor) for p in parts):
        return out
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in values])
    parents = []
    for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
        if isinstance(p, Tensor):
            sl = [slice(None)] * out.ndim
            sl[ax] = slice(lo, hi)
            sl = tuple(sl)
            parents.append((p, lambda g, sl=sl: g[sl]))
    return Tensor(out, tuple(parents))


def take_along_axis(x, idx, axis=-1):
    if not isinstance(x, Tensor):
        return np.take_along_axis(x, idx, axis=axis)
    shape = x.value.shape

    def vjp(g):
        full = np.zeros(shape)
        # indices may repeat along axis, so scatter-add explicitly
        grids = np.indices(idx.shape, sparse=True)
        ax = axis % len(shape)
        index = tuple(idx if i == ax else grids[i] for i in range(len(shape)))
        np.add.at(full, index, g)
        return full

    return Tensor(np.take_along_axis(x.value, idx, axis=axis), ((x, vjp),))


def sum(x, axis=None):  # noqa: A001 - mirrors numpy
    if not isinstance(x, Tensor):
        return np.sum(x, axis=axis)
    shape = x.value.shape

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

    return Tensor(np.sum(x.value, axis=axis), ((x, vjp),))


def mean(x, axis=None):
    if not isinstance(x, Tensor):
        return np.mean(x, axis=axis)
    count = x.value.size if axis is None else x.value.shape[axis]
    return div(sum(x, axis=axis), float(count))


def where(cond, a, b):
    """Select elementwise; ``cond`` is a constant boolean array."""
    av, bv = value_of(a), value_of(b)
    out = np.where(cond, av, bv)
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return out
    return _binary(a, b, out, lambda g: np.where(cond, g, 0.0), lambda g: np.where(cond, 0.0, g))


def grad(fn, arrays):
    """Value and gradients of scalar ``fn(*tensors)`` with respect to ``arrays``."""
    leaves = [Tensor(a) for a in arrays]
    out = fn(*leaves)
    out.backward()
    grads = [np.zeros_like(leaf.value) if leaf.grad is None else leaf.grad for leaf in leaves]
    return float(out.value), grads
