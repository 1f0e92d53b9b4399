"""KV-cache bridge: predict pre-RoPE per-layer key/value deltas.

Input rows are the prefix tokens; each row concatenates every layer's
``[K_pre | V]`` for that token. The cheap-vision delta ``e_t - e_{t-1}`` is
projected and added to the image rows; the current embedding ``e_t`` is the
cross-attention context. Each layer has its own LayerNorm + Linear output
head, zero-initialized, so a fresh bridge returns the copy baseline.

Keys are stored post-RoPE in the deployed cache. Deltas are always added in
pre-RoPE space and the result is rotated back before use.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import bridge as fb
from .teacher import KVCacheSnapshot, RotaryTable  # noqa: F401  (re-exported)
from .tensorkit import autograd as ag
from .tensorkit import kernels
from .tensorkit import nn as tnn
from .tensorkit import rng as rngmod
from .tensorkit.autograd import ShapeError, Tensor


class RopeStateError(ValueError):
    pass


@dataclass(frozen=True)
class KVBridgeConfig:
    n_layers: int = 4
    n_tokens: int = 10         # S
    n_img: int = 8
    d_k: int = 8
    d_v: int = 8
    d_embed: int = 16          # D_e
    d_b: int = 32
    n_blocks: int = 2
    n_heads: int = 4
    q_dim: int = 4
    action_dim: int = 2
    cond_width: int = 64
    alpha: float = 1.0
    rope_base: float = 10000.0
    seed: int = 0

    def __post_init__(self):
        if self.d_k % 2:
            raise ValueError(f"rotary key dimension must be even, got {self.d_k}")
        if self.d_b % self.n_heads:
            raise ValueError("d_b must be divisible by n_heads")

    @property
    def row_width(self):
        return self.n_layers * (self.d_k + self.d_v)


class KVBridgeParams:
    def __init__(self, cfg: KVBridgeConfig, store=None, stage="init"):
        if stage not in fb.STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        self.cfg = cfg
        self.store = store if store is not None else init_params(cfg)
        self.stage = stage

    def copy(self, stage=None):
        return KVBridgeParams(self.cfg, self.store.copy(), stage or self.stage)

    def manifest(self):
        c = self.cfg
        return {"variant": "kv", "L": c.n_layers, "S": c.n_tokens, "d_k": c.d_k, "d_v": c.d_v,
                "rotary_base": c.rope_base, "alpha": c.alpha, "stage": self.stage,
                "config": asdict(c)}

    def is_zero(self):
        return all(not np.any(self.store[f"head{l}.{p}"])
                   for l in range(self.cfg.n_layers) for p in ("w", "b"))


def init_params(cfg):
    g = rngmod.stream(cfg.seed, "kvbridge-init")
    store = fb.init_trunk(cfg, cfg.row_width, cfg.n_tokens, d_out=1, g=g)
    for name in ("out.w", "out.b"):
        del store.params[name], store.m[name], store.v[name]
    store.add("de.w", tnn.glorot(g, cfg.d_embed, cfg.d_b))
    store.add("ctx.w", tnn.glorot(g, cfg.d_embed, cfg.d_b))
    store.add("ctx.b", np.zeros(cfg.d_b))
    for l in range(cfg.n_layers):
        store.add(f"head{l}.w", np.zeros((cfg.d_b, cfg.d_k + cfg.d_v)))
        store.add(f"head{l}.b", np.zeros(cfg.d_k + cfg.d_v))
    return store


# ---------------------------------------------------------------------------
# rotary helpers


def rope_apply(k_pre, positions, table):
    cos, sin = table.rows(positions)
    return kernels.rope_fwd(np.asarray(k_pre), cos, sin)


def rope_invert(k_post, positions, table):
    """``k_post * cos - rotate_half(k_post) * sin``: the exact inverse rotation."""
    cos, sin = table.rows(positions)
    return kernels.rope_inv(np.asarray(k_post), cos, sin)


def to_pre(snapshot, table):
    """Pre-RoPE copy of a snapshot (no-op when already pre)."""
    if snapshot.rope_state == "pre":
        return snapshot
    if table is None:
        raise RopeStateError("post-RoPE snapshot but no rotary table")
    pos = np.arange(snapshot.keys[0].shape[-2])
    return KVCacheSnapshot([rope_invert(k, pos, table) for k in snapshot.keys],
                           [np.array(v) for v in snapshot.values], "pre")


def to_post(snapshot, table):
    """Rotated copy for the head; a model without RoPE (``table=None``) keeps it as is."""
    if snapshot.rope_state == "post" or table is None:
        return snapshot
    pos = np.arange(snapshot.keys[0].shape[-2])
    return KVCacheSnapshot([rope_apply(k, pos, table) for k in snapshot.keys],
                           [np.array(v) for v in snapshot.values], "post")


# ---------------------------------------------------------------------------
# forward / apply / loss


def flatten(snapshot):
    """(S, L*(d_k+d_v)) row matrix from a snapshot."""
    return np.concatenate([np.concatenate([k, v], axis=-1)
                           for k, v in zip(snapshot.keys, snapshot.values)], axis=-1)


def unflatten(rows, cfg, rope_state="pre"):
    w = cfg.d_k + cfg.d_v
    keys = [rows[..., l * w:l * w + cfg.d_k] for l in range(cfg.n_layers)]
    vals = [rows[..., l * w + cfg.d_k:(l + 1) * w] for l in range(cfg.n_layers)]
    return KVCacheSnapshot(keys, vals, rope_state)


def kv_bridge_graph(P, cfg, rows, e, delta_e, q, a_prev):
    """Batched: rows (B, S, L*(dk+dv)), e/delta_e (B, N_img, D_e). Returns per-layer (B, S, dk+dv)."""
    rows, e, delta_e = np.asarray(rows), np.asarray(e), np.asarray(delta_e)
    if rows.shape[-2:] != (cfg.n_tokens, cfg.row_width):
        raise ShapeError("kvbridge.rows", f"expected (..., {cfg.n_tokens}, {cfg.row_width}), "
                         f"got {rows.shape}")
    if e.shape[-2:] != (cfg.n_img, cfg.d_embed) or delta_e.shape != e.shape:
        raise ShapeError("kvbridge.embed", f"embedding shapes {e.shape} / {delta_e.shape}")
    h = tnn.linear(Tensor(rows), P["in.w"], P["in.b"], node="in") + P["pos"]
    de = tnn.linear(Tensor(delta_e), P["de.w"], node="de")
    pad = np.zeros(de.shape[:-2] + (cfg.n_tokens - cfg.n_img, cfg.d_b))
    h = h + ag.concat([de, Tensor(pad)], axis=-2)
    ctx = tnn.linear(Tensor(e), P["ctx.w"], P["ctx.b"], node="ctx")
    cond = Tensor(np.concatenate([np.asarray(q, dtype=np.float64),
                                  np.asarray(a_prev, dtype=np.float64)], axis=-1))
    h = fb.trunk(P, cfg, h, ctx, cond)
    return [tnn.linear(ag.layernorm(h), P[f"head{l}.w"], P[f"head{l}.b"], node=f"head{l}")
            for l in range(cfg.n_layers)]


def kv_bridge_forward(params, e, delta_e, kv_prev_pre, q, a_prev):
    """Per-layer ``(dK_l, dV_l)`` deltas; all zero for a fresh bridge."""
    if kv_prev_pre.rope_state != "pre":
        raise RopeStateError("kv_bridge_forward needs a pre-RoPE snapshot; call rope_invert first")
    cfg = params.cfg
    if kv_prev_pre.n_layers != cfg.n_layers:
        raise ShapeError("kvbridge.layers", f"{kv_prev_pre.n_layers} layers != {cfg.n_layers}")
    out = kv_bridge_graph(params.store.tensors(), cfg, flatten(kv_prev_pre)[None],
                          np.asarray(e)[None], np.asarray(delta_e)[None],
                          np.asarray(q)[None], np.asarray(a_prev)[None])
    dk = [o.data[0, :, :cfg.d_k] for o in out]
    dv = [o.data[0, :, cfg.d_k:] for o in out]
    return dk, dv


def add_kv_delta(kv_prev_pre, deltas):
    """Pre-RoPE sum ``K + dK``, ``V + dV``; refuses post-RoPE input."""
    if kv_prev_pre.rope_state != "pre":
        raise RopeStateError("deltas may only be added to pre-RoPE keys")
    dk, dv = deltas
    if len(dk) != kv_prev_pre.n_layers or len(dv) != kv_prev_pre.n_layers:
        raise ShapeError("kvbridge.apply", "delta layer count mismatch")
    return KVCacheSnapshot([k + d for k, d in zip(kv_prev_pre.keys, dk)],
                           [v + d for v, d in zip(kv_prev_pre.values, dv)], "pre")


def apply_kv_delta(kv_prev_pre, deltas, table):
    """Updated cache, re-rotated for use by the head (flagged post)."""
    return to_post(add_kv_delta(kv_prev_pre, deltas), table)


def kv_bridge_loss(pred_pre, target_pre, alpha):
    """Mean over layers of the feature loss on that layer's ``[K | V]`` rows.

    ``pred_pre`` / ``target_pre`` are per-layer sequences of (..., S, dk+dv)
    arrays or Tensors. Every row is supervised.
    """
    if len(pred_pre) != len(target_pre):
        raise ShapeError("kv_bridge_loss", f"{len(pred_pre)} predicted layers vs "
                         f"{len(target_pre)} targets")
    if not pred_pre:
        raise ShapeError("kv_bridge_loss", "no layers")
    mask = np.ones(ag.as_tensor(pred_pre[0]).shape[-2], dtype=bool)
    total = None
    for p, t in zip(pred_pre, target_pre):
        term = fb.bridge_loss(p, t, mask, alpha)
        total = term if total is None else total + term
    return total * (1.0 / len(pred_pre))
