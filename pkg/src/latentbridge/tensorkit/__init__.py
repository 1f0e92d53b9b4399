"""Minimal differentiable-computation kernel used by every trainable model."""
import numpy as np

from . import kernels, nn, rng
from .autograd import EPS, ShapeError, Tensor, backward
from .checkpoint import CheckpointError
from .optim import (NumericError, ParamStore, TrainHyper, adamw_step, clip_grad_norm,
                    cosine_lr, global_norm)


def grad(loss_fn, store, *args, **kwargs):
    """Evaluate ``loss_fn(tensors, *args)`` and return ``(loss_value, grads)``."""
    params = store.tensors(requires_grad=True)
    loss = loss_fn(params, *args, **kwargs)
    backward(loss)
    grads = {}
    for k in store.trainable():
        g = params[k].grad
        grads[k] = g if g is not None else np.zeros_like(store[k])
    return float(loss.data), grads


__all__ = ["Tensor", "ShapeError", "NumericError", "ParamStore", "TrainHyper", "adamw_step",
           "clip_grad_norm", "cosine_lr", "global_norm", "grad", "backward", "kernels", "nn",
           "rng", "EPS", "CheckpointError"]
