"""Parameter store, AdamW, cosine schedule and global-norm clipping."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor


class NumericError(FloatingPointError):
    """Non-finite values reached the optimizer or a loss."""


@dataclass(frozen=True)
class TrainHyper:
    lr0: float = 3e-4
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    t_max: int = 50
    batch_size: int = 64
    epochs: int = 50

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.t_max < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("t_max and batch_size must be >= 1, epochs >= 0")


class ParamStore:
    """Named parameter arrays plus per-parameter AdamW moments."""

    def __init__(self, params=None, frozen=()):
        self.params = {}
        self.frozen = set(frozen)
        self.m = {}
        self.v = {}
        self.step_count = 0
        for k, val in (params or {}).items():
            self.add(k, val)

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        self.params[name] = np.array(value)
        self.m[name] = np.zeros_like(self.params[name])
        self.v[name] = np.zeros_like(self.params[name])

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def trainable(self):
        return [k for k in self.params if k not in self.frozen]

    def tensors(self, requires_grad=False):
        """Wrap arrays as graph leaves; frozen names never require grad."""
        return {k: Tensor(v, requires_grad and k not in self.frozen, name=k)
                for k, v in self.params.items()}

    def copy(self):
        out = ParamStore()
        out.params = {k: v.copy() for k, v in self.params.items()}
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        out.frozen = set(self.frozen)
        out.step_count = self.step_count
        return out

    def astype(self, dtype):
        out = self.copy()
        for d in (out.params, out.m, out.v):
            for k in d:
                d[k] = d[k].astype(dtype)
        return out

    def reset_optimizer(self):
        for k in self.params:
            self.m[k] = np.zeros_like(self.params[k])
            self.v[k] = np.zeros_like(self.params[k])
        self.step_count = 0

    def global_norm(self):
        return math.sqrt(sum(float((v.astype(np.float64) ** 2).sum()) for v in self.params.values()))


def cosine_lr(step, t_max, lr0):
    step = min(max(step, 0), t_max)
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / t_max))


def global_norm(grads):
    return math.sqrt(sum(float((np.asarray(g, dtype=np.float64) ** 2).sum()) for g in grads.values()))


def clip_grad_norm(grads, max_norm):
    """Rescale so the joint L2 norm is at most ``max_norm``; returns (grads, norm)."""
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / (norm + 1e-12)
    return {k: g * scale for k, g in grads.items()}, norm


def adamw_step(store, grads, hyper, step, lr=None, betas=(0.9, 0.999), eps=1e-8):
    """One decoupled-weight-decay Adam update, in place on ``store``."""
    if step < 1:
        raise ValueError("step must be >= 1")
    lr = hyper.lr0 if lr is None else lr
    b1, b2 = betas
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k!r}")
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for k, g in grads.items():
        if k in store.frozen:
            continue
        p = store.params[k]
        g = g.astype(p.dtype, copy=False)
        m = store.m[k] = b1 * store.m[k] + (1.0 - b1) * g
        v = store.v[k] = b2 * store.v[k] + (1.0 - b2) * g * g
        p *= 1.0 - lr * hyper.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    store.step_count = step
    return store
