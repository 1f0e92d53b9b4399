"""Shared test utilities: finite differences and tiny trained policies."""
import numpy as np

from latentbridge import env as envmod
from latentbridge.tensorkit.autograd import backward


def fd_check(loss_fn, store, h=1e-6, max_entries=12, seed=0):
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn(P)`` returns a scalar Tensor given ``P = store.tensors(...)``.
    Each trainable parameter is checked on up to ``max_entries`` entries, and
    the error is ``|a - n| / (|a| + |n|)`` over that sampled vector.
    """
    g = np.random.default_rng(seed)
    T = store.tensors(requires_grad=True)
    backward(loss_fn(T))
    worst = {}
    for name in store.trainable():
        p = store.params[name]
        analytic = T[name].grad if T[name].grad is not None else np.zeros_like(p)
        flat = p.reshape(-1)
        idx = g.choice(flat.size, size=min(max_entries, flat.size), replace=False)
        a, n = [], []
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = float(loss_fn(store.tensors()).data)
            flat[i] = old - h
            down = float(loss_fn(store.tensors()).data)
            flat[i] = old
            a.append(analytic.reshape(-1)[i])
            n.append((up - down) / (2 * h))
        a, n = np.array(a), np.array(n)
        denom = np.linalg.norm(a) + np.linalg.norm(n)
        worst[name] = 0.0 if denom < 1e-12 else float(np.linalg.norm(a - n) / denom)
    return worst


def tasks():
    return [envmod.preset("base"), envmod.preset("switch")]
