"""Feature-space bridge: predict one-step deltas of the image-token features.

The trunk is a stack of AdaLN-Zero blocks (self-attention over image rows,
cross-attention to the stable context, MLP). Block gates and the output
projection start at zero, so a fresh bridge returns an exactly-zero delta and
the bridged policy reduces to feature caching.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .tensorkit import autograd as ag
from .tensorkit import nn as tnn
from .tensorkit import rng as rngmod
from .tensorkit.autograd import ShapeError, Tensor
from .tensorkit.optim import ParamStore

STAGES = ("init", "R0", "R1")


@dataclass(frozen=True)
class BridgeConfig:
    n_img: int = 8
    n_tokens: int = 10
    width: int = 32           # backbone feature width D
    d_b: int = 32
    n_blocks: int = 2
    n_heads: int = 4
    q_dim: int = 4
    action_dim: int = 2
    cond_width: int = 64
    alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.d_b % self.n_heads:
            raise ValueError("d_b must be divisible by n_heads")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


class BridgeParams:
    """Parameter store plus the config and training stage that produced it."""

    def __init__(self, cfg: BridgeConfig, store=None, stage="init"):
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        self.cfg = cfg
        self.store = store if store is not None else init_trunk(cfg, cfg.width, cfg.n_img)
        self.stage = stage

    def copy(self, stage=None):
        return BridgeParams(self.cfg, self.store.copy(), stage or self.stage)

    def manifest(self):
        c = self.cfg
        return {"variant": "feature", "N_img": c.n_img, "D": c.width, "d_b": c.d_b,
                "B": c.n_blocks, "alpha": c.alpha, "stage": self.stage, "config": asdict(c)}

    def is_zero(self):
        return not np.any(self.store["out.w"]) and not np.any(self.store["out.b"])


def init_trunk(cfg, d_in, n_rows, d_out=None, g=None):
    """Shared trunk parameters; also used by the KV bridge with its own widths."""
    g = g or rngmod.stream(cfg.seed, "bridge-init")
    d, dc = cfg.d_b, cfg.cond_width
    d_out = d_in if d_out is None else d_out
    p = {"in.w": tnn.glorot(g, d_in, d), "in.b": np.zeros(d),
         "pos": g.standard_normal((n_rows, d)) * 0.02,
         "cond.w1": tnn.glorot(g, cfg.q_dim + cfg.action_dim, dc), "cond.b1": np.zeros(dc),
         # AdaLN-Zero: shift/scale/gate for 3 sublayers per block, all zero at start
         "cond.w2": np.zeros((dc, cfg.n_blocks * 9 * d)),
         "cond.b2": np.zeros(cfg.n_blocks * 9 * d)}
    for j in range(cfg.n_blocks):
        for part in ("sa", "ca"):
            for m in ("wq", "wk", "wv", "wo"):
                p[f"b{j}.{part}.{m}"] = tnn.glorot(g, d, d)
        p[f"b{j}.mlp.w1"] = tnn.glorot(g, d, 2 * d)
        p[f"b{j}.mlp.b1"] = np.zeros(2 * d)
        p[f"b{j}.mlp.w2"] = tnn.glorot(g, 2 * d, d)
        p[f"b{j}.mlp.b2"] = np.zeros(d)
    p["out.w"] = np.zeros((d, d_out))
    p["out.b"] = np.zeros(d_out)
    return ParamStore(p)


def _mha(P, prefix, x, ctx, n_heads):
    q = tnn.split_heads(tnn.linear(x, P[prefix + ".wq"], node=prefix + ".wq"), n_heads)
    k = tnn.split_heads(tnn.linear(ctx, P[prefix + ".wk"], node=prefix + ".wk"), n_heads)
    v = tnn.split_heads(tnn.linear(ctx, P[prefix + ".wv"], node=prefix + ".wv"), n_heads)
    att = tnn.merge_heads(tnn.attention(q, k, v, node=prefix))
    return tnn.linear(att, P[prefix + ".wo"], node=prefix + ".wo")


def trunk(P, cfg, h, ctx, cond):
    """AdaLN-Zero blocks over rows ``h`` (B, R, d_b) with context ``ctx`` (B, C, d_b)."""
    d = cfg.d_b
    c = ag.gelu(tnn.linear(cond, P["cond.w1"], P["cond.b1"], node="cond.w1"))
    mods = tnn.linear(c, P["cond.w2"], P["cond.b2"], node="cond.w2")
    mods = mods.reshape(mods.shape[0], 1, cfg.n_blocks * 9 * d)

    def piece(j, i):
        lo = (9 * j + i) * d
        return mods[:, :, lo:lo + d]

    for j in range(cfg.n_blocks):
        x = tnn.modulate(h, piece(j, 0), piece(j, 1))
        h = h + piece(j, 2) * _mha(P, f"b{j}.sa", x, x, cfg.n_heads)
        x = tnn.modulate(h, piece(j, 3), piece(j, 4))
        h = h + piece(j, 5) * _mha(P, f"b{j}.ca", x, ctx, cfg.n_heads)
        x = tnn.modulate(h, piece(j, 6), piece(j, 7))
        m = ag.gelu(tnn.linear(x, P[f"b{j}.mlp.w1"], P[f"b{j}.mlp.b1"], node=f"b{j}.mlp.w1"))
        h = h + piece(j, 8) * tnn.linear(m, P[f"b{j}.mlp.w2"], P[f"b{j}.mlp.b2"], node=f"b{j}.mlp.w2")
    return h


def _check(cfg, z_hat, s, q, a_prev):
    if z_hat.shape[-2:] != (cfg.n_img, cfg.width):
        raise ShapeError("bridge.z_hat", f"expected (..., {cfg.n_img}, {cfg.width}), got {z_hat.shape}")
    if s.shape[-2:] != (cfg.n_tokens, cfg.width):
        raise ShapeError("bridge.s", f"expected (..., {cfg.n_tokens}, {cfg.width}), got {s.shape}")
    if q.shape[-1] != cfg.q_dim or a_prev.shape[-1] != cfg.action_dim:
        raise ShapeError("bridge.cond", f"q/a_prev widths {q.shape[-1]}/{a_prev.shape[-1]} "
                         f"!= {cfg.q_dim}/{cfg.action_dim}")


def bridge_graph(P, cfg, z_hat, s, q, a_prev):
    """Batched delta graph: z_hat (B, N_img, D), s (B, N, D), q (B, q), a_prev (B, a)."""
    z_hat, s = np.asarray(z_hat), np.asarray(s)
    q, a_prev = np.asarray(q, dtype=np.float64), np.asarray(a_prev, dtype=np.float64)
    _check(cfg, z_hat, s, q, a_prev)
    h = tnn.linear(Tensor(z_hat), P["in.w"], P["in.b"], node="in") + P["pos"]
    ctx = tnn.linear(Tensor(s), P["in.w"], P["in.b"], node="ctx")
    cond = Tensor(np.concatenate([q, a_prev], axis=-1))
    h = trunk(P, cfg, h, ctx, cond)
    return tnn.linear(ag.layernorm(h), P["out.w"], P["out.b"], node="out")


def bridge_forward(params, z_hat, s, q, a_prev):
    """Delta for the image rows of one step (N_img x D); exactly zero when untrained."""
    P = params.store.tensors()
    return bridge_graph(P, params.cfg, np.asarray(z_hat)[None], np.asarray(s)[None],
                        np.asarray(q)[None], np.asarray(a_prev)[None]).data[0]


def apply_delta(z_hat_prev_full, delta, text_cache, image_mask):
    """Image rows advance by ``delta``; text rows are copied from ``text_cache``."""
    out = np.array(z_hat_prev_full, dtype=np.float64, copy=True)
    image_mask = np.asarray(image_mask, dtype=bool)
    out[image_mask] = out[image_mask] + delta
    out[~image_mask] = text_cache
    return out


def bridge_loss(pred_full, target_full, image_mask, alpha):
    """Mean squared error over masked entries plus ``alpha`` times mean (1 - cos) over masked rows.

    Works on arrays or Tensors with leading batch axes; rows outside the mask
    never enter the graph, so their gradient is exactly zero.
    """
    image_mask = np.asarray(image_mask, dtype=bool)
    if not image_mask.any():
        raise ValueError("image_mask selects no rows")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    rows = np.flatnonzero(image_mask)
    pred = ag.as_tensor(pred_full)
    target = ag.as_tensor(target_full).data
    p = pred[..., rows, :]
    t = target[..., rows, :]
    mse = ag.square(p - t).mean()
    if alpha == 0:
        return mse
    cos = tnn.row_cosine(p, Tensor(t))
    return mse + (1.0 - cos).mean() * alpha
