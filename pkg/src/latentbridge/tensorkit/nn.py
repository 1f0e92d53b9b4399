"""Layer-level building blocks composed from autograd ops."""
import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor

NEG_INF = -1e9


def linear(x, w, b=None, node="linear", lora=None):
    """``x @ w + b``; ``lora=(A, B, scale)`` adds the low-rank path ``x @ A @ B``."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(node, f"input width {x.shape[-1]} != weight rows {w.shape[0]}")
    y = ag.matmul(x, w, node=node)
    if lora is not None:
        a, bb, scale = lora
        y = y + ag.matmul(ag.matmul(x, a, node=node + ".lora_a"), bb, node=node + ".lora_b") * scale
    if b is not None:
        y = y + b
    return y


def split_heads(x, n_heads):
    """(..., S, H*d) -> (..., H, S, d)."""
    *lead, s, width = x.shape
    if width % n_heads:
        raise ShapeError("split_heads", f"width {width} not divisible by {n_heads} heads")
    y = x.reshape(tuple(lead) + (s, n_heads, width // n_heads))
    nd = y.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return y.transpose(*axes)


def merge_heads(x):
    """(..., H, S, d) -> (..., S, H*d)."""
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    y = x.transpose(*axes)
    *lead, s, h, d = y.shape
    return y.reshape(tuple(lead) + (s, h * d))


def attention(q, k, v, mask=None, node="attention"):
    """Scaled dot-product attention on the last two axes.

    ``mask`` is a boolean array broadcastable to the score matrix; ``False``
    entries are excluded.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(node, f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(node, f"{k.shape[-2]} keys vs {v.shape[-2]} values")
    kt = ag.swapaxes(k, -1, -2)
    scores = ag.matmul(q, kt, node=node + ".scores") * (1.0 / np.sqrt(q.shape[-1]))
    if mask is not None:
        scores = scores + np.where(mask, 0.0, NEG_INF).astype(scores.data.dtype)
    p = ag.softmax(scores)
    return ag.matmul(p, v, node=node + ".mix")


def modulate(x, shift, scale):
    """AdaLN: ``LN(x) * (1 + scale) + shift`` with per-sample shift/scale."""
    return ag.layernorm(x) * (scale + 1.0) + shift


def row_cosine(a, b, eps=ag.EPS):
    """Cosine between matching rows (last axis) of two tensors.

    ``eps`` only enters rows whose norm product is below it, so well-scaled
    identical rows give exactly 1 up to rounding.
    """
    dot = (a * b).sum(axis=-1)
    na = ag.sqrt((a * a).sum(axis=-1))
    nb = ag.sqrt((b * b).sum(axis=-1))
    denom = na * nb
    return dot / (denom + np.where(denom.data < eps, eps, 0.0))


def init_normal(rng, shape, std, dtype=np.float64):
    return (rng.standard_normal(shape) * std).astype(dtype)


def glorot(rng, fan_in, fan_out, dtype=np.float64):
    return init_normal(rng, (fan_in, fan_out), np.sqrt(2.0 / (fan_in + fan_out)), dtype)


def np_row_cosine(a, b, eps=ag.EPS):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    return (a * b).sum(-1) / (denom + np.where(denom < eps, eps, 0.0))


__all__ = ["Tensor", "linear", "attention", "split_heads", "merge_heads", "modulate",
           "row_cosine", "np_row_cosine", "init_normal", "glorot"]
