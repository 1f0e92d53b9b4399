# cython: cdivision=True
"""Fused row kernels.

Bounds/wraparound checks are disabled only on the typed loops; the Python
helpers index shapes with negative indices.

Same contracts as ``_pykernels``; each call does one pass over C-contiguous
memory instead of a chain of numpy temporaries.
"""
cimport cython
import numpy as np
from libc.math cimport sqrt


NAME = "native"

ctypedef fused real:
    float
    double

cdef double GELU_C = 0.7978845608028654  # sqrt(2/pi)


def _rows(a):
    a = np.ascontiguousarray(a)
    return a.reshape(-1, a.shape[-1]), a.shape


@cython.boundscheck(False)
@cython.wraparound(False)
@cython.initializedcheck(False)
def _ln_fwd(real[:, ::1] x, real[:, ::1] out, real[:, ::1] rstd, double eps):
    cdef Py_ssize_t i, j, n = x.shape[0], d = x.shape[1]
    cdef double mu, var, r, c
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        r = 1.0 / sqrt(var + eps)
        rstd[i, 0] = <real>r
        for j in range(d):
            out[i, j] = <real>((x[i, j] - mu) * r)


def layernorm_fwd(x, eps):
    x2, shape = _rows(x)
    out = np.empty_like(x2)
    rstd = np.empty((x2.shape[0], 1), dtype=x2.dtype)
    _ln_fwd(x2, out, rstd, eps)
    return out.reshape(shape), rstd.reshape(shape[:-1] + (1,))


@cython.boundscheck(False)
@cython.wraparound(False)
@cython.initializedcheck(False)
def _ln_bwd(real[:, ::1] g, real[:, ::1] xh, real[:, ::1] rstd, real[:, ::1] out):
    cdef Py_ssize_t i, j, n = g.shape[0], d = g.shape[1]
    cdef double gm, gxm
    for i in range(n):
        gm = 0.0
        gxm = 0.0
        for j in range(d):
            gm += g[i, j]
            gxm += g[i, j] * xh[i, j]
        gm /= d
        gxm /= d
        for j in range(d):
            out[i, j] = <real>(rstd[i, 0] * (g[i, j] - gm - xh[i, j] * gxm))


def layernorm_bwd(g, xhat, rstd):
    g2, shape = _rows(g)
    xh2, _ = _rows(xhat.astype(g2.dtype, copy=False))
    r2 = np.ascontiguousarray(rstd, dtype=g2.dtype).reshape(-1, 1)
    out = np.empty_like(g2)
    _ln_bwd(g2, xh2, r2, out)
    return out.reshape(shape)


@cython.boundscheck(False)
@cython.wraparound(False)
@cython.initializedcheck(False)
def _sm_shift(real[:, ::1] x, real[:, ::1] out):
    cdef Py_ssize_t i, j, n = x.shape[0], d = x.shape[1]
    cdef double m
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        for j in range(d):
            out[i, j] = <real>(x[i, j] - m)


@cython.boundscheck(False)
@cython.wraparound(False)
@cython.initializedcheck(False)
def _sm_norm(real[:, ::1] e):
    cdef Py_ssize_t i, j, n = e.shape[0], d = e.shape[1]
    cdef double s
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += e[i, j]
        for j in range(d):
            e[i, j] = <real>(e[i, j] / s)


def softmax_fwd(x):
    # exp goes through numpy for the same reason as tanh below
    x2, shape = _rows(x)
    out = np.empty_like(x2)
    _sm_shift(x2, out)
    np.exp(out, out=out)
    _sm_norm(out)
    return out.reshape(shape)


@cython.boundscheck(False)
@cython.wraparound(False)
@cython.initializedcheck(False)
def _sm_bwd(real[:, ::1] g, real[:, ::1] y, real[:, ::1] out):
    cdef Py_ssize_t i, j, n = g.shape[0], d = g.shape[1]
    cdef double s
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += g[i, j] * y[i, j]
        for j in range(d):
            out[i, j] = <real>(y[i, j] * (g[i, j] - s))


def softmax_bwd(g, y):
    g2, shape = _rows(g)
    y2, _ = _rows(y.astype(g2.dtype, copy=False))
    out = np.empty_like(g2)
    _sm_bwd(g2, y2, out)
    return out.reshape(shape)


# libm tanh and exp are scalar and several times slower than numpy's vectorised
# ones, so the fused loops build the argument and consume numpy's result.

@cython.boundscheck(False)
@cython.wraparound(False)
@cython.initializedcheck(False)
def _gelu_arg(real[:, ::1] x, real[:, ::1] out):
    cdef Py_ssize_t i, j, n = x.shape[0], d = x.shape[1]
    cdef double v
    for i in range(n):
        for j in range(d):
            v = x[i, j]
            out[i, j] = <real>(GELU_C * (v + 0.044715 * v * v * v))


@cython.boundscheck(False)
@cython.wraparound(False)
@cython.initializedcheck(False)
def _gelu_f(real[:, ::1] x, real[:, ::1] t):
    cdef Py_ssize_t i, j, n = x.shape[0], d = x.shape[1]
    for i in range(n):
        for j in range(d):
            t[i, j] = <real>(0.5 * x[i, j] * (1.0 + t[i, j]))


def _tanh_arg(x2):
    u = np.empty_like(x2)
    _gelu_arg(x2, u)
    return np.tanh(u, out=u)


def gelu_fwd(x):
    x2, shape = _rows(x)
    t = _tanh_arg(x2)
    _gelu_f(x2, t)
    return t.reshape(shape)


@cython.boundscheck(False)
@cython.wraparound(False)
@cython.initializedcheck(False)
def _gelu_b(real[:, ::1] g, real[:, ::1] x, real[:, ::1] t):
    cdef Py_ssize_t i, j, n = x.shape[0], d = x.shape[1]
    cdef double v, tv
    for i in range(n):
        for j in range(d):
            v = x[i, j]
            tv = t[i, j]
            t[i, j] = <real>(g[i, j] * (0.5 * (1.0 + tv)
                      + 0.5 * v * (1.0 - tv * tv) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v)))


def gelu_bwd(g, x):
    g2, shape = _rows(g)
    x2, _ = _rows(x.astype(g2.dtype, copy=False))
    t = _tanh_arg(x2)
    _gelu_b(g2, x2, t)
    return t.reshape(shape)


@cython.boundscheck(False)
@cython.wraparound(False)
@cython.initializedcheck(False)
def _rope(real[:, :, ::1] x, real[:, ::1] cos, real[:, ::1] sin,
          real[:, :, ::1] out, double sign):
    cdef Py_ssize_t b, s, j, nb = x.shape[0], ns = x.shape[1], d = x.shape[2]
    cdef Py_ssize_t h = d // 2
    for b in range(nb):
        for s in range(ns):
            for j in range(h):
                out[b, s, j] = <real>(x[b, s, j] * cos[s, j] - sign * x[b, s, j + h] * sin[s, j])
                out[b, s, j + h] = <real>(x[b, s, j + h] * cos[s, j + h]
                                         + sign * x[b, s, j] * sin[s, j + h])


def _rope_call(x, cos, sin, sign):
    x = np.ascontiguousarray(x)
    shape = x.shape
    x3 = x.reshape(-1, shape[-2], shape[-1])
    c = np.ascontiguousarray(cos, dtype=x.dtype)
    s = np.ascontiguousarray(sin, dtype=x.dtype)
    out = np.empty_like(x3)
    _rope(x3, c, s, out, sign)
    return out.reshape(shape)


def rope_fwd(x, cos, sin):
    return _rope_call(x, cos, sin, 1.0)


def rope_inv(x, cos, sin):
    return _rope_call(x, cos, sin, -1.0)
