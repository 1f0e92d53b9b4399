"""Synthetic dual-system policy: frozen random backbone plus a trainable head.

The backbone is a pre-norm transformer over ``[image tokens | text tokens]``
with multi-query attention (several query heads, one shared key/value head),
so each layer's KV cache is a pair of ``S x d_k`` matrices. Text positions
attend only to text, so instruction rows are independent of the scene.

Two read-out styles: ``feature`` heads consume the final hidden states of the
image tokens; ``kv`` heads cross-attend to the per-layer KV cache.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import env as envmod
from .tensorkit import autograd as ag
from .tensorkit import checkpoint, kernels
from .tensorkit import nn as tnn
from .tensorkit import rng as rngmod
from .tensorkit.optim import NumericError, ParamStore, TrainHyper, adamw_step, clip_grad_norm, cosine_lr


class GateError(RuntimeError):
    def __init__(self, message, metrics):
        super().__init__(message)
        self.metrics = metrics


# ---------------------------------------------------------------------------
# rotary tables (shared with kvbridge)


@dataclass(frozen=True)
class RotaryTable:
    cos: np.ndarray
    sin: np.ndarray
    base: float

    @classmethod
    def build(cls, n_pos, dim, base=10000.0):
        if dim % 2:
            raise ValueError(f"rotary dimension must be even, got {dim}")
        inv = 1.0 / base ** (np.arange(0, dim, 2) / dim)
        ang = np.outer(np.arange(n_pos), inv)
        ang = np.concatenate([ang, ang], axis=1)
        return cls(np.cos(ang), np.sin(ang), base)

    def rows(self, positions):
        positions = np.asarray(positions)
        if positions.min() < 0 or positions.max() >= self.cos.shape[0]:
            raise IndexError("rotary position outside table")
        return self.cos[positions], self.sin[positions]


# ---------------------------------------------------------------------------
# backbone


@dataclass(frozen=True)
class BackboneConfig:
    n_layers: int = 4
    width: int = 32
    n_heads: int = 4
    head_dim: int = 8
    mlp_width: int = 64
    n_img: int = 8
    n_txt: int = 2
    d_obs: int = 16
    d_embed: int = 16
    stable_layer_index: int = 2
    rope_enabled: bool = False
    rope_base: float = 10000.0
    seed: int = 0

    @property
    def n_tokens(self):
        return self.n_img + self.n_txt

    def image_mask(self):
        return np.arange(self.n_tokens) < self.n_img


@dataclass
class StepOutput:
    z: np.ndarray            # (N, D) final hidden states
    s: np.ndarray            # (N, D) hidden states after ``stable_layer_index`` blocks
    kv: "KVCacheSnapshot"
    e: np.ndarray            # (N_img, D_e) cheap-vision embedding


@dataclass
class KVCacheSnapshot:
    keys: list               # per layer (S, d_k)
    values: list             # per layer (S, d_v)
    rope_state: str = "pre"

    def __post_init__(self):
        if self.rope_state not in ("pre", "post"):
            raise ValueError(f"rope_state must be 'pre' or 'post', got {self.rope_state!r}")
        if len(self.keys) != len(self.values):
            raise ValueError("keys/values layer count mismatch")

    @property
    def n_layers(self):
        return len(self.keys)

    def stacked(self):
        """(L, S, d_k + d_v) float array."""
        return np.stack([np.concatenate([k, v], axis=-1) for k, v in zip(self.keys, self.values)])

    @classmethod
    def from_stacked(cls, arr, d_k, rope_state):
        return cls([a[..., :d_k] for a in arr], [a[..., d_k:] for a in arr], rope_state)


# Residual-branch gain per layer: later blocks write more into the residual
# stream, so early hidden states stay closer to the (slowly varying) input.
_LAYER_GAINS = (0.3, 0.3, 0.5, 0.5, 0.6, 0.7, 0.8, 0.9)


class Backbone:
    """Frozen random transformer; parameters never change after construction."""

    def __init__(self, cfg: BackboneConfig):
        self.cfg = cfg
        g = rngmod.stream(cfg.seed, "backbone")
        D, hd, H = cfg.width, cfg.head_dim, cfg.n_heads
        p = {"w_in": g.standard_normal((cfg.d_obs, D)) / np.sqrt(cfg.d_obs) * 1.5,
             "pos": g.standard_normal((cfg.n_tokens, D)) * 0.3,
             "w_embed": g.standard_normal((cfg.d_obs, cfg.d_embed)) / np.sqrt(cfg.d_obs)}
        for l in range(cfg.n_layers):
            gain = _LAYER_GAINS[min(l, len(_LAYER_GAINS) - 1)]
            p[f"l{l}.wq"] = g.standard_normal((D, H * hd)) / np.sqrt(D) * 1.5
            p[f"l{l}.wk"] = g.standard_normal((D, hd)) / np.sqrt(D) * 1.5
            p[f"l{l}.wv"] = g.standard_normal((D, hd)) / np.sqrt(D)
            p[f"l{l}.wo"] = g.standard_normal((H * hd, D)) / np.sqrt(H * hd) * gain
            p[f"l{l}.w1"] = g.standard_normal((D, cfg.mlp_width)) / np.sqrt(D) * 2.0
            p[f"l{l}.w2"] = g.standard_normal((cfg.mlp_width, D)) / np.sqrt(cfg.mlp_width) * gain
        self.store = ParamStore({k: v.astype(np.float32) for k, v in p.items()}, frozen=p.keys())
        for arr in self.store.params.values():
            arr.setflags(write=False)
        n = cfg.n_tokens
        img = cfg.image_mask()
        # text queries see text keys only; image queries see everything
        self.attn_mask = np.where(img[:, None], True, ~img[None, :])
        self.rotary = RotaryTable.build(n + 1, hd, cfg.rope_base) if cfg.rope_enabled else None

    # checkpoint of the frozen parameters; used for frozenness/lineage checks
    def digest(self):
        return hashlib.sha256(checkpoint.encode(self.store, "backbone", self.cfg.seed)).hexdigest()

    def embed(self, obs):
        tokens = np.concatenate([obs.scene_tokens, obs.instruction_tokens], axis=-2)
        if tokens.shape[-2:] != (self.cfg.n_tokens, self.cfg.d_obs):
            raise ag.ShapeError("backbone.embed", f"tokens {tokens.shape[-2:]} != "
                                f"{(self.cfg.n_tokens, self.cfg.d_obs)}")
        return tokens @ self.store["w_in"] + self.store["pos"]

    def cheap_embedding(self, obs):
        """Frozen linear projection of scene tokens (stand-in for a vision encoder)."""
        return np.asarray(obs.scene_tokens) @ self.store["w_embed"]

    def _attend(self, q, k, v):
        # q: (..., H, S, d); k, v: (..., S, d) shared across heads
        scores = q @ np.swapaxes(k, -1, -2)[..., None, :, :] / np.sqrt(q.shape[-1])
        scores = scores + np.where(self.attn_mask, 0.0, tnn.NEG_INF)
        return kernels.softmax_fwd(scores) @ v[..., None, :, :]

    def forward(self, obs, kv_override=None):
        """Run every layer; ``kv_override`` substitutes a snapshot's per-layer K/V."""
        cfg, P = self.cfg, self.store
        h = self.embed(obs)
        H, hd = cfg.n_heads, cfg.head_dim
        keys, values, s = [], [], None
        for l in range(cfg.n_layers):
            if l == cfg.stable_layer_index:
                s = h.copy()
            x, _ = kernels.layernorm_fwd(h, ag.EPS)
            q = x @ P[f"l{l}.wq"]
            q = q.reshape(q.shape[:-1] + (H, hd))
            q = np.swapaxes(q, -2, -3)
            k = x @ P[f"l{l}.wk"]
            v = x @ P[f"l{l}.wv"]
            if self.rotary is not None:
                cos, sin = self.rotary.rows(np.arange(cfg.n_tokens))
                q = kernels.rope_fwd(q, cos, sin)
                k = kernels.rope_fwd(k, cos, sin)
            if kv_override is not None:
                k, v = kv_override.keys[l], kv_override.values[l]
            keys.append(k)
            values.append(v)
            a = self._attend(q, k, v)
            a = np.swapaxes(a, -2, -3)
            a = a.reshape(a.shape[:-2] + (H * hd,))
            h = h + a @ P[f"l{l}.wo"]
            x, _ = kernels.layernorm_fwd(h, ag.EPS)
            h = h + kernels.gelu_fwd(x @ P[f"l{l}.w1"]) @ P[f"l{l}.w2"]
        if s is None:
            s = h.copy()
        state = "post" if self.rotary is not None else "pre"
        return StepOutput(h, s, KVCacheSnapshot(keys, values, state), self.cheap_embedding(obs))


# ---------------------------------------------------------------------------
# heads


@dataclass(frozen=True)
class HeadConfig:
    kind: str = "regression"        # regression | flow
    readout: str = "feature"        # feature | kv
    width: int = 64
    n_pool: int = 4
    q_dim: int = 4
    action_dim: int = 2
    denoise_steps: int = 1
    beta_a: float = 1.5
    beta_b: float = 1.0
    n_heads: int = 4
    seed: int = 1

    def __post_init__(self):
        if self.kind not in ("regression", "flow"):
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.readout not in ("feature", "kv"):
            raise ValueError(f"unknown readout {self.readout!r}")
        if self.denoise_steps < 1:
            raise ValueError("denoise_steps must be >= 1")


def _time_features(tau):
    tau = np.asarray(tau, dtype=np.float64).reshape(-1, 1)
    k = np.arange(1, 4)
    return np.concatenate([tau, np.sin(np.pi * k * tau), np.cos(np.pi * k * tau)], axis=-1)


N_TIME_FEATS = 7
LORA_TARGETS = ("mlp.w1", "mlp.w2", "mlp.w3")


class Head:
    """Action head over backbone features or the KV cache.

    Feature read-out: learned-query attention pooling over the image rows of
    ``z`` (text rows never enter), then an MLP on ``pooled ⊕ q``.
    KV read-out: one query token built from ``q`` cross-attends, over two
    residual layers, to the per-layer KV cache (layers split evenly between
    the two), with the query rotated to the first suffix position.

    ``lora`` optionally holds low-rank factors ``<name>.A`` / ``<name>.B``
    for the MLP maps; they add ``x @ A @ B`` to the frozen base output.
    """

    def __init__(self, cfg: HeadConfig, backbone_cfg: BackboneConfig, params=None, trained=None):
        self.cfg = cfg
        self.bcfg = backbone_cfg
        self.trained = (params is not None) if trained is None else trained
        self.params = params if params is not None else self.init_params()
        self.lora = None
        self.rotary = None
        if cfg.readout == "kv" and backbone_cfg.rope_enabled:
            self.rotary = RotaryTable.build(backbone_cfg.n_tokens + 1, backbone_cfg.head_dim,
                                            backbone_cfg.rope_base)

    def _in_dim(self):
        extra = 0 if self.cfg.kind == "regression" else self.cfg.action_dim + N_TIME_FEATS
        return self.cfg.q_dim + extra

    def init_params(self):
        c, b = self.cfg, self.bcfg
        g = rngmod.stream(c.seed, f"head-{c.readout}-{c.kind}")
        W, D = c.width, b.width
        p = {}
        if c.readout == "feature":
            p["pool.query"] = g.standard_normal((c.n_pool, D)) * 0.5
            p["pool.wk"] = tnn.glorot(g, D, D)
            p["pool.wv"] = tnn.glorot(g, D, D)
            d_in = c.n_pool * D + self._in_dim()
        else:
            hd, H = b.head_dim, c.n_heads
            p["q.w_in"] = tnn.glorot(g, self._in_dim(), D)
            p["q.base"] = g.standard_normal((1, D)) * 0.1
            for j in range(2):
                p[f"x{j}.wq"] = tnn.glorot(g, D, H * hd)
                p[f"x{j}.wo"] = tnn.glorot(g, H * hd, D)
                p[f"x{j}.w1"] = tnn.glorot(g, D, 2 * D)
                p[f"x{j}.w2"] = tnn.glorot(g, 2 * D, D) * 0.5
            d_in = D + self._in_dim()
        p["mlp.w1"] = tnn.glorot(g, d_in, W)
        p["mlp.b1"] = np.zeros(W)
        p["mlp.w2"] = tnn.glorot(g, W, W)
        p["mlp.b2"] = np.zeros(W)
        p["mlp.w3"] = tnn.glorot(g, W, c.action_dim) * 0.1
        p["mlp.b3"] = np.zeros(c.action_dim)
        return ParamStore(p)

    # -- graph ------------------------------------------------------------
    def _lin(self, P, L, x, name, bias=None):
        lora = (L[name + ".A"], L[name + ".B"], 1.0) if L is not None and name + ".A" in L else None
        return tnn.linear(x, P[name], P[bias] if bias else None, node=name, lora=lora)

    def _pool(self, P, rep):
        z = ag.layernorm(rep[..., : self.bcfg.n_img, :])  # image rows only
        k = tnn.linear(z, P["pool.wk"], node="pool.wk")
        v = tnn.linear(z, P["pool.wv"], node="pool.wv")
        pooled = tnn.attention(P["pool.query"], k, v, node="pool")  # (B, n_pool, D)
        return pooled.reshape(pooled.shape[0], -1)

    def _kv_context(self, P, kv, tok):
        c, b = self.cfg, self.bcfg
        if kv.ndim != 4 or kv.shape[-1] != 2 * b.head_dim:
            raise ag.ShapeError("head.kv", f"expected (B, L, S, {2 * b.head_dim}), got {kv.shape}")
        hd, H = b.head_dim, c.n_heads
        groups = np.array_split(np.arange(kv.shape[1]), 2)
        h = tok  # (B, 1, D)
        for j, layers in enumerate(groups):
            keys = kv[:, layers, :, :hd].reshape(kv.shape[0], -1, hd)
            vals = kv[:, layers, :, hd:].reshape(kv.shape[0], -1, hd)
            x = ag.layernorm(h)
            qh = tnn.split_heads(tnn.linear(x, P[f"x{j}.wq"], node=f"x{j}.wq"), H)  # (B,H,1,hd)
            if self.rotary is not None:
                cos, sin = self.rotary.rows([b.n_tokens])
                qh = ag.rope(qh, cos, sin)
            att = tnn.attention(qh, ag.Tensor(keys[:, None]), ag.Tensor(vals[:, None]),
                                node=f"x{j}.attn")
            h = h + tnn.linear(tnn.merge_heads(att), P[f"x{j}.wo"], node=f"x{j}.wo")
            x = ag.layernorm(h)
            h = h + tnn.linear(ag.gelu(tnn.linear(x, P[f"x{j}.w1"])), P[f"x{j}.w2"])
        return h.reshape(h.shape[0], -1)

    def graph(self, P, rep, q, x_tau=None, tau=None, L=None):
        """Batched head graph. ``rep``: (B, N, D) features or (B, L, S, dk+dv) KV."""
        c = self.cfg
        rep = np.asarray(rep)
        q = np.asarray(q, dtype=np.float64).reshape(rep.shape[0], -1)
        if q.shape[-1] != c.q_dim:
            raise ag.ShapeError("head.q", f"proprio width {q.shape[-1]} != {c.q_dim}")
        cond_in = [q]
        if c.kind == "flow":
            cond_in += [np.asarray(x_tau, dtype=np.float64).reshape(rep.shape[0], -1),
                        _time_features(tau)]
        extra = ag.Tensor(np.concatenate(cond_in, axis=-1))
        if c.readout == "feature":
            if rep.shape[-2:] != (self.bcfg.n_tokens, self.bcfg.width):
                raise ag.ShapeError("head.z", f"expected (B, {self.bcfg.n_tokens}, "
                                    f"{self.bcfg.width}), got {rep.shape}")
            ctx = self._pool(P, ag.Tensor(rep))
        else:
            tok = tnn.linear(extra, P["q.w_in"], node="q.w_in") + P["q.base"]
            ctx = self._kv_context(P, rep, tok.reshape(rep.shape[0], 1, -1))
        x = ag.concat([ctx, extra], axis=-1)
        x = ag.gelu(self._lin(P, L, x, "mlp.w1", "mlp.b1"))
        x = ag.gelu(self._lin(P, L, x, "mlp.w2", "mlp.b2"))
        return self._lin(P, L, x, "mlp.w3", "mlp.b3")

    # -- inference ----------------------------------------------------------
    def predict(self, rep, q, x_tau=None, tau=None):
        L = self.lora.tensors() if self.lora is not None else None
        return self.graph(self.params.tensors(), np.asarray(rep)[None], np.asarray(q)[None],
                          None if x_tau is None else np.asarray(x_tau)[None],
                          None if tau is None else np.asarray([tau]), L=L).data[0]

    def predict_batch(self, rep, q):
        """Single-step actions for a batch (flow heads integrate from zero noise)."""
        L = self.lora.tensors() if self.lora is not None else None
        P = self.params.tensors()
        if self.cfg.kind == "regression":
            return self.graph(P, rep, q, L=L).data
        x0 = np.zeros((np.asarray(rep).shape[0], self.cfg.action_dim))
        return x0 + self.graph(P, rep, q, x0, np.zeros(x0.shape[0]), L=L).data

    def act(self, rep, q, noise=None, steps=None):
        """Action for one step; flow heads Euler-integrate from ``noise``."""
        if self.cfg.kind == "regression":
            return self.predict(rep, q)
        if noise is None:
            noise = np.zeros(self.cfg.action_dim)
        return flow_denoise(self, rep, q, self.cfg.denoise_steps if steps is None else steps, noise)


def head_forward_regression(head, z, q):
    return head.predict(z, q)


def flow_sample_time(g, size=None, a=1.5, b=1.0):
    """Draw τ ~ Beta(a, b); for b = 1 by inverting the CDF τ^a."""
    if b != 1.0:
        return g.beta(a, b, size)
    return g.uniform(size=size) ** (1.0 / a)


def flow_denoise(head, rep, q, steps, noise, velocity=None):
    """Euler-integrate the velocity field from ``noise`` over ``steps`` intervals."""
    if steps < 1:
        raise ValueError("denoise steps must be >= 1")
    x = np.array(noise, dtype=np.float64)
    vel = velocity if velocity is not None else (lambda x_, t_: head.predict(rep, q, x_, t_))
    dt = 1.0 / steps
    for i in range(steps):
        x = x + dt * vel(x, i * dt)
    return x


def noise_for(seed, episode_seed, t, dim):
    return rngmod.stream(seed, f"flow-noise-{episode_seed}", t).standard_normal(dim)


# ---------------------------------------------------------------------------
# policy bundle


class Policy:
    """Frozen backbone + action head, with the BC gate record."""

    def __init__(self, backbone, head, gate=None, noise_seed=0):
        self.backbone = backbone
        self.head = head
        self.gate = gate or {}
        self.noise_seed = noise_seed

    @property
    def readout(self):
        return self.head.cfg.readout

    @property
    def gate_passed(self):
        return bool(self.gate.get("passed", False))

    def representation(self, out):
        return out.z if self.readout == "feature" else out.kv.stacked()

    def act(self, rep, q, episode_seed=0, t=0, steps=None):
        noise = None
        if self.head.cfg.kind == "flow":
            noise = noise_for(self.noise_seed, episode_seed, t, self.head.cfg.action_dim)
        return self.head.act(rep, q, noise, steps)

    def manifest(self):
        return {"backbone": asdict(self.backbone.cfg), "backbone_seed": self.backbone.cfg.seed,
                "backbone_digest": self.backbone.digest(), "head": asdict(self.head.cfg),
                "head_digest": hashlib.sha256(checkpoint.encode(self.head.params, "head")).hexdigest(),
                "image_mask": self.backbone.cfg.image_mask().astype(int).tolist(),
                "gate": self.gate, "noise_seed": self.noise_seed,
                "lora_digest": (hashlib.sha256(checkpoint.encode(self.head.lora, "lora")).hexdigest()
                                if self.head.lora is not None else None)}

    def manifest_hash(self):
        return manifest_hash(self.manifest())

    def save(self, directory):
        import os
        os.makedirs(directory, exist_ok=True)
        checkpoint.save(os.path.join(directory, "backbone.ckpt"), self.backbone.store, "backbone",
                        self.backbone.cfg.seed)
        checkpoint.save(os.path.join(directory, "head.ckpt"), self.head.params, "head",
                        self.head.cfg.seed, {"trained": self.head.trained})
        if self.head.lora is not None:
            checkpoint.save(os.path.join(directory, "lora.ckpt"), self.head.lora, "lora")
        man = self.manifest()
        man["hash"] = manifest_hash(man)
        with open(os.path.join(directory, "policy.json"), "w") as fh:
            json.dump(man, fh, indent=2, sort_keys=True)
        return man["hash"]

    @classmethod
    def load(cls, directory):
        import os
        with open(os.path.join(directory, "policy.json")) as fh:
            man = json.load(fh)
        backbone = Backbone(BackboneConfig(**man["backbone"]))
        if backbone.digest() != man["backbone_digest"]:
            raise checkpoint.CheckpointError("backbone digest does not match the policy manifest")
        params, header = checkpoint.load(os.path.join(directory, "head.ckpt"), "head")
        head = Head(HeadConfig(**man["head"]), backbone.cfg, params,
                    trained=header["meta"].get("trained", True))
        if man.get("lora_digest"):
            head.lora, _ = checkpoint.load(os.path.join(directory, "lora.ckpt"), "lora")
        policy = cls(backbone, head, man.get("gate"), man.get("noise_seed", 0))
        if "hash" in man and policy.manifest_hash() != man["hash"]:
            raise checkpoint.CheckpointError(f"policy manifest hash {man['hash']} does not match "
                                             f"the checkpoints ({policy.manifest_hash()})")
        return policy


def manifest_hash(manifest):
    man = {k: v for k, v in manifest.items() if k != "hash"}
    blob = json.dumps(man, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def sync_episode(policy, task, seed, steps=None):
    """Backbone every step; returns ``(success, length)``."""
    state, obs = envmod.reset(task, seed)
    while not state.done:
        out = policy.backbone.forward(obs)
        a = policy.act(policy.representation(out), obs.q, seed, state.step_index, steps)
        state, obs, _, _ = envmod.step(task, state, a)
    return state.success, state.step_index


def gate_check(policy, task, n_episodes=200, seed=0, threshold=0.9, steps=None):
    seeds = [rngmod.derive_seed(seed, "gate-episode", i) for i in range(n_episodes)]
    results = [sync_episode(policy, task, s, steps) for s in seeds]
    sr = float(np.mean([r[0] for r in results])) if results else 0.0
    return {"sr": sr, "threshold": threshold, "n": n_episodes, "task": task.name,
            "passed": bool(policy.head.trained and sr >= threshold)}


# ---------------------------------------------------------------------------
# behavior cloning


def collect_expert(backbone, readout, tasks, n_episodes, seed, noise_std=0.3):
    """(rep, q, expert action) triples; executed actions carry exploration noise.

    ``tasks`` may be one TaskSpec or a sequence, cycled over episodes. Every
    fourth episode runs noise-free so clean trajectories are covered too.
    """
    tasks = [tasks] if isinstance(tasks, envmod.TaskSpec) else list(tasks)
    reps, qs, acts, eps = [], [], [], []
    for i in range(n_episodes):
        ep_seed = rngmod.derive_seed(seed, "bc-episode", i)
        task = tasks[i % len(tasks)]
        traj, _ = envmod.rollout_expert(task, ep_seed, noise_std=noise_std if i % 4 else 0.0)
        for state, obs, label in traj:
            out = backbone.forward(obs)
            reps.append(out.z if readout == "feature" else out.kv.stacked())
            qs.append(obs.q)
            acts.append(label)
            eps.append(i)
    return {"rep": np.array(reps), "q": np.array(qs), "action": np.array(acts)}, np.array(eps)


def _head_loss(head, P, batch, g, L=None):
    if head.cfg.kind == "regression":
        pred = head.graph(P, batch["rep"], batch["q"], L=L)
        return ag.square(pred - batch["action"]).mean()
    a = batch["action"]
    tau = flow_sample_time(g, a.shape[0], head.cfg.beta_a, head.cfg.beta_b)
    x0 = g.standard_normal(a.shape)
    x_tau = (1 - tau[:, None]) * x0 + tau[:, None] * a
    v = head.graph(P, batch["rep"], batch["q"], x_tau, tau, L=L)
    return ag.square(v - (a - x0)).mean()


def train_head(head, data, hyper, seed, lora=None, log=None, q_noise=None, rep_noise=None):
    """Minibatch AdamW on the head objective, in place.

    With ``lora`` only the adapter store is trained and the base stays frozen.
    ``q_noise`` (per-component std) perturbs the proprio input of each batch,
    which pushes the head to read state from the features; ``rep_noise`` is a
    scalar std for Gaussian feature augmentation.
    """
    store = lora if lora is not None else head.params
    n = data["rep"].shape[0]
    g = rngmod.stream(seed, "head-train")
    history, step = [], 0
    for epoch in range(hyper.epochs):
        lr = cosine_lr(epoch, hyper.t_max, hyper.lr0)
        order = g.permutation(n)
        total = 0.0
        for lo in range(0, n, hyper.batch_size):
            idx = np.sort(order[lo:lo + hyper.batch_size])
            batch = {k: v[idx] for k, v in data.items()}
            if q_noise is not None:
                batch["q"] = batch["q"] + g.standard_normal(batch["q"].shape) * np.asarray(q_noise)
            if rep_noise:
                batch["rep"] = batch["rep"] + g.standard_normal(batch["rep"].shape) * rep_noise
            T = store.tensors(requires_grad=True)
            if lora is not None:
                loss = _head_loss(head, head.params.tensors(), batch, g, L=T)
            else:
                loss = _head_loss(head, T, batch, g)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite head loss at epoch {epoch}")
            loss.backward()
            grads = {k: (T[k].grad if T[k].grad is not None else np.zeros_like(store[k]))
                     for k in store.trainable()}
            grads, _ = clip_grad_norm(grads, hyper.clip_norm)
            step += 1
            adamw_step(store, grads, hyper, step, lr=lr)
            total += float(loss.data) * len(idx)
        history.append(total / max(n, 1))
        if log:
            log(f"head epoch {epoch} loss {history[-1]:.5f}")
    return history


def action_mse(head, data, batch=256):
    """Per-component action MSE of the single-step output on a dataset."""
    errs = []
    for i in range(0, data["rep"].shape[0], batch):
        pred = head.predict_batch(data["rep"][i:i + batch], data["q"][i:i + batch])
        errs.append(((pred - data["action"][i:i + batch]) ** 2).mean(-1))
    return float(np.concatenate(errs).mean()) if errs else float("nan")


def bc_train(backbone, head_cfg, tasks, hyper, n_episodes=800, seed=0, noise_std=0.3,
             q_noise=(1.0, 1.0, 0.0, 0.0), gate_task=None, gate_episodes=200,
             gate_threshold=0.9, strict=True, log=None):
    """Fit a head by behavior cloning on expert data and run the sync gate.

    Returns ``(policy, metrics)``; raises GateError (carrying the metrics)
    when ``strict`` and sync success on held-out seeds misses the threshold.
    """
    data, eps = collect_expert(backbone, head_cfg.readout, tasks, n_episodes, seed, noise_std)
    val_eps = episode_split(np.unique(eps), seed)
    is_val = np.isin(eps, val_eps)
    train = {k: v[~is_val] for k, v in data.items()}
    val = {k: v[is_val] for k, v in data.items()}
    head = Head(head_cfg, backbone.cfg, trained=False)
    history = train_head(head, train, hyper, seed, log=log, q_noise=q_noise)
    head.params = head.params.astype(np.float32)
    head.params.reset_optimizer()
    head.trained = hyper.epochs > 0
    policy = Policy(backbone, head, noise_seed=seed)
    if gate_task is None:
        gate_task = tasks if isinstance(tasks, envmod.TaskSpec) else list(tasks)[0]
    gate = gate_check(policy, gate_task, gate_episodes, seed, gate_threshold)
    policy.gate = gate
    metrics = {"train_loss": history, "val_mse": action_mse(head, val),
               "n_samples": int(data["rep"].shape[0]), "gate": gate}
    if strict and not gate["passed"]:
        raise GateError(f"BC gate failed: sync SR {gate['sr']:.3f} < {gate_threshold}", metrics)
    return policy, metrics


def episode_split(episodes, seed, frac=0.1):
    """Held-out episode ids (at least one), drawn deterministically."""
    episodes = np.asarray(sorted(set(int(e) for e in episodes)))
    if len(episodes) < 2:
        return episodes[:0]
    n_val = max(1, int(round(frac * len(episodes))))
    perm = rngmod.stream(seed, "val-split").permutation(len(episodes))
    return np.sort(episodes[perm[:n_val]])
