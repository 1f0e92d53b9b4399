"""Tape-based reverse-mode autodiff over numpy arrays.

A ``Tensor`` records its parents and a closure that maps the upstream gradient
to parent gradients. Graphs are built eagerly by the ops below; ``backward``
walks them in reverse topological order. When no input requires a gradient
the closure is never created, so inference pays only for the numpy work.
"""
from __future__ import annotations

import numpy as np

from . import kernels

EPS = 1e-8


class ShapeError(ValueError):
    """Raised by an op whose operand shapes are inconsistent; names the node."""

    def __init__(self, node, message):
        super().__init__(f"[{node}] {message}")
        self.node = node


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- conveniences -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return add(self, neg(as_tensor(o, self)))

    def __rsub__(self, o):
        return add(as_tensor(o, self), neg(self))

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Tensor):
            return mul(self, reciprocal(o))
        return mul(self, 1.0 / o)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    # -- reverse pass -----------------------------------------------------
    def backward(self, upstream=None):
        backward(self, upstream)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None and arr.dtype.kind != "f":
        arr = arr.astype(like.data.dtype)
    elif like is not None and arr.ndim == 0:
        arr = arr.astype(like.data.dtype)
    return Tensor(arr)


def _make(data, parents, fn, name=None):
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, name, parents, fn)
    return Tensor(data, False, name)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(root, upstream=None):
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if upstream is None:
        if root.data.size != 1:
            raise ShapeError("backward", f"non-scalar output {root.shape} needs an upstream seed")
        upstream = np.ones_like(root.data)
    else:
        upstream = np.asarray(upstream, dtype=root.data.dtype)
        if upstream.shape != root.shape:
            raise ShapeError("backward", f"upstream {upstream.shape} != output {root.shape}")
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(root): upstream}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = pg if k not in grads else grads[k] + pg


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError("add", f"{a.shape} vs {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError("mul", f"{a.shape} vs {b.shape}") from exc
    ad, bd = a.data, b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def reciprocal(a):
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def gelu(a):
    x = a.data
    return _make(kernels.gelu_fwd(x), (a,), lambda g: (kernels.gelu_bwd(g, x),))


def square(a):
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,))


def sum_(a, axis=None, keepdims=False):
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), fn)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape):
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", f"cannot reshape {old} to {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, i, j):
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def index(a, idx):
    shape, dt = a.shape, a.data.dtype

    def fn(g):
        full = np.zeros(shape, dtype=dt)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), fn)


def concat(ts, axis=0):
    ts = [as_tensor(t) for t in ts]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", f"shapes {[t.shape for t in ts]} on axis {axis}") from exc
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, tuple(ts), lambda g: tuple(np.split(g, splits, axis=axis)))


def matmul(a, b, node="matmul"):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(node, f"{a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(node, f"{a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(out, (a, b), fn)


# ---------------------------------------------------------------------------
# fused kernels


def softmax(a):
    y = kernels.softmax_fwd(a.data)
    return _make(y, (a,), lambda g: (kernels.softmax_bwd(g, y),))


def layernorm(a, eps=EPS):
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    xhat, rstd = kernels.layernorm_fwd(a.data, eps)
    return _make(xhat, (a,), lambda g: (kernels.layernorm_bwd(g, xhat, rstd),))


def rope(a, cos, sin):
    """Rotary rotation of the last axis; positions index the second-to-last."""
    if a.shape[-1] % 2:
        raise ShapeError("rope", f"odd rotary dimension {a.shape[-1]}")
    out = kernels.rope_fwd(a.data, cos, sin)
    # rotation is orthogonal, so the adjoint is the inverse rotation
    return _make(out, (a,), lambda g: (kernels.rope_inv(g, cos, sin),))
