"""Hot row kernels with a compiled core and a numpy fallback.

The compiled extension is preferred when importable. ``use_backend`` switches
explicitly, e.g. for tests that check both paths agree.
"""
import importlib

from . import _pykernels

_FUNCS = ("layernorm_fwd", "layernorm_bwd", "softmax_fwd", "softmax_bwd",
          "gelu_fwd", "gelu_bwd", "rope_fwd", "rope_inv")

try:
    _native = importlib.import_module(f"{__name__}._ckernels")
except ImportError:
    _native = None

_active = _native if _native is not None else _pykernels


def available_backends():
    return ["native", "python"] if _native is not None else ["python"]


def backend_name():
    return _active.NAME


def use_backend(name):
    """Select ``"native"`` or ``"python"``; returns the previous backend name."""
    global _active
    prev = _active.NAME
    if name == "python":
        _active = _pykernels
    elif name == "native":
        if _native is None:
            raise RuntimeError("native kernels are not built; reinstall with a C compiler")
        _active = _native
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    return prev


def layernorm_fwd(x, eps):
    return _active.layernorm_fwd(x, eps)


def layernorm_bwd(g, xhat, rstd):
    return _active.layernorm_bwd(g, xhat, rstd)


def softmax_fwd(x):
    return _active.softmax_fwd(x)


def softmax_bwd(g, y):
    return _active.softmax_bwd(g, y)


def gelu_fwd(x):
    return _active.gelu_fwd(x)


def gelu_bwd(g, x):
    return _active.gelu_bwd(g, x)


def rope_fwd(x, cos, sin):
    return _active.rope_fwd(x, cos, sin)


def rope_inv(x, cos, sin):
    return _active.rope_inv(x, cos, sin)
