"""Reference numpy kernels.

Every function works on the last axis of an arbitrary-rank array and returns
new arrays; inputs are never modified.
"""
import numpy as np

NAME = "python"

_GELU_C = np.sqrt(2.0 / np.pi)


def layernorm_fwd(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd


def layernorm_bwd(g, xhat, rstd):
    gm = g.mean(axis=-1, keepdims=True)
    gxm = (g * xhat).mean(axis=-1, keepdims=True)
    return rstd * (g - gm - xhat * gxm)


def softmax_fwd(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(g, y):
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def gelu_fwd(x):
    u = _GELU_C * (x + 0.044715 * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_bwd(g, x):
    u = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _rotate_half(x):
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def rope_fwd(x, cos, sin):
    """x: (..., S, d); cos/sin: (S, d) in rotate-half layout."""
    return x * cos + _rotate_half(x) * sin


def rope_inv(x, cos, sin):
    return x * cos - _rotate_half(x) * sin
