"""Training pipeline: sync collection, R0, DAgger collection, R1, head adaptation.

Dataset files are one JSON header line followed by length-prefixed records:

    <u4 payload length> <i4 episode> <i4 step> <i4 offset> <f4 field values...>

Fields and their shapes are listed in the header, in record order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import bridge as fb
from . import kvbridge as kb
from . import scheduler as sch
from .env import Observation
from .teacher import GateError, Head, Policy, episode_split, train_head, action_mse
from .tensorkit import nn as tnn
from .tensorkit import rng as rngmod
from .tensorkit.optim import (NumericError, ParamStore, TrainHyper, adamw_step, clip_grad_norm,
                              cosine_lr)

SCHEMA_VERSION = 1
R0_HYPER = {"feature": TrainHyper(epochs=50, t_max=50), "kv": TrainHyper(epochs=25, t_max=25)}
R1_LR, R1_LR_LONG, R1_T_MAX = 3e-4, 3e-5, 16
LORA_TARGETS = ("mlp.w1", "mlp.w2")   # the hidden maps; the 2-wide output map is left alone


class DatasetError(ValueError):
    pass


class LineageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# dataset container and file format


def field_shapes(policy):
    b = policy.backbone.cfg
    n, d = b.n_tokens, b.width
    common = [("q", (4,)), ("a_prev", (2,)), ("expert", (2,)), ("src_obs", (n, b.d_obs))]
    if policy.readout == "feature":
        return [("input", (n, d)), ("target", (n, d)), ("s", (n, d))] + common
    w = b.n_layers * 2 * b.head_dim
    return ([("input", (n, w)), ("target", (n, w)), ("e", (b.n_img, b.d_embed)),
             ("de", (b.n_img, b.d_embed))] + common)


@dataclass
class Dataset:
    header: dict
    meta: np.ndarray          # (n, 3) int: episode, step, offset
    arrays: dict              # name -> float32 array (n, *shape)

    def __len__(self):
        return int(self.meta.shape[0])

    @property
    def variant(self):
        return self.header["variant"]

    @property
    def offsets(self):
        return self.meta[:, 2]

    @property
    def episodes(self):
        return self.meta[:, 0]

    def counts_by_offset(self):
        off, cnt = np.unique(self.offsets, return_counts=True)
        return {str(int(o)): int(c) for o, c in zip(off, cnt)}

    def subset(self, keep):
        keep = np.asarray(keep)
        if keep.dtype != bool:
            keep = keep.astype(np.intp)
        return Dataset(dict(self.header), self.meta[keep], {k: v[keep] for k, v in self.arrays.items()})

    def batch(self, idx):
        return {k: v[idx].astype(np.float64) for k, v in self.arrays.items()}

    def obs(self, i, n_img):
        tokens = self.arrays["src_obs"][i].astype(np.float64)
        return Observation(tokens[:n_img], tokens[n_img:], self.arrays["q"][i].astype(np.float64))


def empty_dataset(header, fields):
    return Dataset(header, np.zeros((0, 3), dtype=np.int32),
                   {k: np.zeros((0,) + tuple(s), np.float32) for k, s in fields})


def concat(a, b):
    if a.variant != b.variant or a.header["fields"] != b.header["fields"]:
        raise DatasetError("datasets are not variant-compatible")
    if a.header["manifest_hash"] != b.header["manifest_hash"]:
        raise DatasetError("datasets were collected with different policies")
    # episode ids are namespaced so validation splits stay by episode
    meta_b = b.meta.copy()
    meta_b[:, 0] += (int(a.meta[:, 0].max()) + 1) if len(a) else 0
    return Dataset(dict(a.header, kind="mixed"), np.concatenate([a.meta, meta_b]),
                   {k: np.concatenate([a.arrays[k], b.arrays[k]]) for k in a.arrays})


def write_dataset(path, ds):
    header = dict(ds.header, schema=SCHEMA_VERSION, n_records=len(ds),
                  counts=ds.counts_by_offset(), n_episodes=int(len(np.unique(ds.episodes))))
    fields = [(k, tuple(s)) for k, s in header["fields"]]
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for i in range(len(ds)):
            body = ds.meta[i].astype("<i4").tobytes() + b"".join(
                np.ascontiguousarray(ds.arrays[k][i], dtype="<f4").tobytes() for k, _ in fields)
            fh.write(np.uint32(len(body)).astype("<u4").tobytes() + body)
    ds.header = header
    return header


def read_dataset(path, manifest_hash=None):
    with open(path, "rb") as fh:
        blob = fh.read()
    nl = blob.find(b"\n")
    if nl < 0:
        raise DatasetError(f"{path}: missing header line")
    try:
        header = json.loads(blob[:nl])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: bad header ({exc})") from exc
    if header.get("schema") != SCHEMA_VERSION:
        raise DatasetError(f"{path}: unsupported schema {header.get('schema')}")
    if manifest_hash is not None and header.get("manifest_hash") != manifest_hash:
        raise DatasetError(f"{path}: policy manifest hash {header.get('manifest_hash')} "
                           f"!= expected {manifest_hash}")
    fields = [(k, tuple(s)) for k, s in header["fields"]]
    sizes = [int(np.prod(s)) for _, s in fields]
    expect = 12 + 4 * sum(sizes)
    metas, cols, off, n = [], {k: [] for k, _ in fields}, nl + 1, 0
    while off < len(blob):
        if off + 4 > len(blob):
            raise DatasetError(f"{path}: truncated length prefix at byte {off}")
        length = int(np.frombuffer(blob, "<u4", 1, off)[0])
        if length != expect:
            raise DatasetError(f"{path}: record {n} has length {length}, schema implies {expect}")
        if off + 4 + length > len(blob):
            raise DatasetError(f"{path}: record {n} runs past end of file")
        p = off + 4
        metas.append(np.frombuffer(blob, "<i4", 3, p))
        p += 12
        for (k, shape), size in zip(fields, sizes):
            cols[k].append(np.frombuffer(blob, "<f4", size, p).reshape(shape))
            p += 4 * size
        off, n = p, n + 1
    if n != header.get("n_records"):
        raise DatasetError(f"{path}: header says {header.get('n_records')} records, found {n}")
    meta = np.array(metas, dtype=np.int32).reshape(-1, 3)
    arrays = {k: (np.array(v, dtype=np.float32) if v else np.zeros((0,) + s, np.float32))
              for (k, s), v in zip(fields, cols.values())}
    ds = Dataset(header, meta, arrays)
    if ds.counts_by_offset() != header.get("counts"):
        raise DatasetError(f"{path}: per-offset counts disagree with the header")
    return ds


# ---------------------------------------------------------------------------
# collection


def _bridge_space(policy, table, rep):
    """Feature matrix, or a pre-RoPE snapshot / StepOutput flattened for the KV bridge."""
    if policy.readout == "feature":
        return rep
    return kb.flatten(kb.to_pre(rep, table))


class _Recorder:
    def __init__(self, policy, table, fields):
        self.policy, self.table = policy, table
        self.fields = [k for k, _ in fields]
        self.meta, self.rows = [], {k: [] for k in self.fields}

    def add(self, ep, step, offset, values):
        self.meta.append((ep, step, offset))
        for k in self.fields:
            self.rows[k].append(np.asarray(values[k], dtype=np.float32))

    def dataset(self, header, fields):
        if not self.meta:
            return empty_dataset(header, fields)
        return Dataset(header, np.array(self.meta, dtype=np.int32),
                       {k: np.array(v, dtype=np.float32) for k, v in self.rows.items()})


def _tokens(obs):
    return np.concatenate([obs.scene_tokens, obs.instruction_tokens])


def _task_list(tasks):
    return [tasks] if not isinstance(tasks, (list, tuple)) else list(tasks)


def collect_sync(policy, tasks, n_episodes, seed, cost=None):
    """Run the policy with the backbone every step; one sample per adjacent step pair."""
    if not policy.gate_passed:
        raise GateError("policy has not passed the BC gate", policy.gate)
    tasks = _task_list(tasks)
    bundle = sch.PolicyBundle(policy, None, cost)
    fields = field_shapes(policy)
    rec = _Recorder(policy, bundle.table, fields)
    seeds = []
    for i in range(n_episodes):
        ep_seed = rngmod.derive_seed(seed, "sync-episode", i)
        seeds.append(ep_seed)
        prev = []

        def sink(p, i=i, prev=prev):
            if prev:
                a = prev[0]
                vals = {"input": _bridge_space(policy, bundle.table,
                                               a["out"].z if policy.readout == "feature" else a["out"].kv),
                        "target": _bridge_space(policy, bundle.table,
                                                p["out"].z if policy.readout == "feature" else p["out"].kv),
                        "s": a["out"].s, "q": p["q"], "a_prev": p["a_prev"], "expert": p["expert"],
                        "src_obs": _tokens(a["obs"]), "e": p["e"], "de": p["de"]}
                rec.add(i, p["t"], 1, vals)
            prev[:] = [p]

        sch.run_episode(bundle, sch.SchedulePolicy.sync(), tasks[i % len(tasks)], ep_seed, sink=sink)
    header = {"kind": "sync", "variant": policy.readout, "fields": [[k, list(s)] for k, s in fields],
              "manifest_hash": policy.manifest_hash(), "f": 1, "seed": seed,
              "episode_seeds": [str(s) for s in seeds], "tasks": [t.name for t in tasks],
              "dims": _dims(policy), "bridge_parent": None}
    return rec.dataset(header, fields)


def collect_dagger(bridge, policy, tasks, f, n_episodes, seed, cost=None):
    """Roll out the bridged policy at period ``f``; the backbone labels every bridge step.

    Offsets run 1..f-1; the offset-1 input is the fresh backbone output of the
    period's VLM step. The oracle never influences the actions taken.
    """
    if f < 2:
        raise ValueError("DAgger collection needs f >= 2 (no bridge steps otherwise)")
    if bridge.stage not in ("R0", "R1"):
        raise LineageError(f"DAgger collection expects a trained bridge, got stage {bridge.stage!r}")
    tasks = _task_list(tasks)
    bundle = sch.PolicyBundle(policy, bridge, cost)
    fields = field_shapes(policy)
    rec = _Recorder(policy, bundle.table, fields)
    seeds, logs = [], []
    sched = sch.SchedulePolicy("fixed", f)
    for i in range(n_episodes):
        ep_seed = rngmod.derive_seed(seed, "dagger-episode", i)
        seeds.append(ep_seed)

        def sink(p, i=i):
            if p["kind"] != sch.VLM:
                tgt = p["out"].z if policy.readout == "feature" else p["out"].kv
                vals = {"input": p["input"] if policy.readout == "feature" else kb.flatten(p["input"]),
                        "target": _bridge_space(policy, bundle.table, tgt),
                        "s": p["s"], "q": p["q"], "a_prev": p["a_prev"], "expert": p["expert"],
                        "src_obs": _tokens(p["src_obs"]), "e": p["e"], "de": p["de"]}
                rec.add(i, p["t"], p["offset"], vals)

        logs.append(sch.run_episode(bundle, sched, tasks[i % len(tasks)], ep_seed, sink=sink))
    header = {"kind": "dagger", "variant": policy.readout,
              "fields": [[k, list(s)] for k, s in fields], "manifest_hash": policy.manifest_hash(),
              "f": f, "seed": seed, "episode_seeds": [str(s) for s in seeds],
              "tasks": [t.name for t in tasks], "dims": _dims(policy),
              "bridge_parent": bridge_hash(bridge)}
    return rec.dataset(header, fields), logs


def _dims(policy):
    b = policy.backbone.cfg
    return {"N": b.n_tokens, "N_img": b.n_img, "D": b.width, "L": b.n_layers, "d_k": b.head_dim,
            "D_e": b.d_embed}


def bridge_hash(bridge):
    from .tensorkit import checkpoint
    import hashlib
    return hashlib.sha256(checkpoint.encode(bridge.store, "bridge")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# bridge training


def expected_dagger_counts(lengths, f):
    """Per-offset sample counts for episodes of the given lengths under fixed(f)."""
    counts = {}
    for T in lengths:
        for t in range(T):
            o = t % f
            if o:
                counts[str(o)] = counts.get(str(o), 0) + 1
    return counts


def new_bridge(policy, variant=None, seed=0, alpha=1.0, **dims):
    b = policy.backbone.cfg
    variant = variant or policy.readout
    if variant != policy.readout:
        raise sch.ManifestError(f"{variant} bridge cannot serve a {policy.readout} read-out policy")
    if variant == "feature":
        return fb.BridgeParams(fb.BridgeConfig(n_img=b.n_img, n_tokens=b.n_tokens, width=b.width,
                                               alpha=alpha, seed=seed, **dims))
    return kb.KVBridgeParams(kb.KVBridgeConfig(n_layers=b.n_layers, n_tokens=b.n_tokens,
                                               n_img=b.n_img, d_k=b.head_dim, d_v=b.head_dim,
                                               d_embed=b.d_embed, rope_base=b.rope_base,
                                               alpha=alpha, seed=seed, **dims))


class _Objective:
    """Per-variant prediction, loss and validation cosine over dataset batches."""

    def __init__(self, bridge, image_mask):
        self.bridge = bridge
        self.kv = isinstance(bridge, kb.KVBridgeParams)
        self.mask = np.asarray(image_mask, dtype=bool)

    def _split(self, x):
        c = self.bridge.cfg
        w = c.d_k + c.d_v
        return [x[..., l * w:(l + 1) * w] for l in range(c.n_layers)]

    def predict(self, P, b):
        cfg = self.bridge.cfg
        if self.kv:
            d = kb.kv_bridge_graph(P, cfg, b["input"], b["e"], b["de"], b["q"], b["a_prev"])
            return [o + x for o, x in zip(d, self._split(b["input"]))]
        zin = b["input"][:, self.mask]
        return fb.bridge_graph(P, cfg, zin, b["s"], b["q"], b["a_prev"]) + zin

    def loss(self, P, b):
        pred = self.predict(P, b)
        alpha = self.bridge.cfg.alpha
        if self.kv:
            return kb.kv_bridge_loss(pred, self._split(b["target"]), alpha)
        rows = np.ones(int(self.mask.sum()), dtype=bool)
        return fb.bridge_loss(pred, b["target"][:, self.mask], rows, alpha)

    def _rows(self, x):
        if self.kv:
            c = self.bridge.cfg
            return x.reshape(x.shape[0], x.shape[1], c.n_layers, c.d_k + c.d_v)
        return x[:, self.mask]

    def cosine(self, P, b):
        """(bridge, copy) mean per-row cosine on a batch."""
        pred = self.predict(P, b)
        pred = np.concatenate([p.data for p in pred], -1) if self.kv else \
            _embed_rows(b["input"], pred.data, self.mask)
        tgt = self._rows(b["target"])
        return (float(tnn.np_row_cosine(self._rows(pred), tgt).mean()),
                float(tnn.np_row_cosine(self._rows(b["input"]), tgt).mean()))


def _embed_rows(full, img, mask):
    out = full.copy()
    out[:, mask] = img
    return out


def train_bridge(bridge, train_ds, val_ds, hyper, seed, stage, lr=None, log=None):
    """AdamW on the bridge loss; returns (best-by-val-cosine params, metrics)."""
    obj = _Objective(bridge, _mask_for(train_ds))
    store = bridge.store.astype(np.float64)
    store.reset_optimizer()
    lr0 = hyper.lr0 if lr is None else lr
    g = rngmod.stream(seed, f"bridge-train-{stage}")
    val = val_ds.batch(np.arange(len(val_ds))) if len(val_ds) else None
    history = {"train_loss": [], "val_cos": [], "lr": []}
    copy_cos = obj.cosine(store.tensors(), val)[1] if val is not None else None
    best, best_cos, best_epoch, step = store.copy(), -np.inf, -1, 0
    n = len(train_ds)
    for epoch in range(hyper.epochs):
        lr_e = cosine_lr(epoch, hyper.t_max, lr0)
        order = g.permutation(n)
        total = 0.0
        for lo in range(0, n, hyper.batch_size):
            idx = np.sort(order[lo:lo + hyper.batch_size])
            T = store.tensors(requires_grad=True)
            loss = obj.loss(T, train_ds.batch(idx))
            if not np.isfinite(loss.data):
                raise NumericError(f"{stage}: non-finite loss at epoch {epoch}, batch {lo // hyper.batch_size}")
            loss.backward()
            grads = {k: (T[k].grad if T[k].grad is not None else np.zeros_like(store[k]))
                     for k in store.trainable()}
            grads, _ = clip_grad_norm(grads, hyper.clip_norm)
            step += 1
            adamw_step(store, grads, hyper, step, lr=lr_e)
            total += float(loss.data) * len(idx)
        history["train_loss"].append(total / max(n, 1))
        history["lr"].append(lr_e)
        if val is not None:
            vc = obj.cosine(store.tensors(), val)[0]
            history["val_cos"].append(vc)
            if vc > best_cos:
                best, best_cos, best_epoch = store.copy(), vc, epoch
        else:
            best, best_epoch = store.copy(), epoch
        if log:
            log(f"{stage} epoch {epoch} loss {history['train_loss'][-1]:.6f} "
                f"val_cos {history['val_cos'][-1] if history['val_cos'] else float('nan'):.6f}")
    out = type(bridge)(bridge.cfg, best.astype(np.float32), stage)
    out.store.reset_optimizer()
    final = obj.cosine(out.store.tensors(), val)[0] if val is not None else None
    metrics = dict(history, best_epoch=best_epoch, best_val_cos=final, copy_val_cos=copy_cos,
                   n_train=n, n_val=len(val_ds), stage=stage)
    return out, metrics


def _mask_for(ds):
    d = ds.header["dims"]
    return np.arange(d["N"]) < d["N_img"]


def split_by_episode(ds, seed, frac=0.1):
    val_eps = episode_split(np.unique(ds.episodes), seed, frac)
    is_val = np.isin(ds.episodes, val_eps)
    return ds.subset(~is_val), ds.subset(is_val)


def train_r0(bridge, sync_ds, hyper, seed=0, log=None):
    if sync_ds.variant != ("kv" if isinstance(bridge, kb.KVBridgeParams) else "feature"):
        raise DatasetError(f"{sync_ds.variant} dataset cannot train this bridge")
    tr, va = split_by_episode(sync_ds, seed)
    return train_bridge(bridge, tr, va, hyper, seed, "R0", log=log)


def r1_hyper(long_horizon=False, epochs=R1_T_MAX, base=None):
    base = base or TrainHyper()
    lr = R1_LR_LONG if long_horizon else R1_LR
    return TrainHyper(lr, base.weight_decay, base.clip_norm, R1_T_MAX, base.batch_size, epochs)


def train_r1(bridge_r0, sync_ds, dagger_ds, hyper, seed=0, log=None):
    """Resume from R0 on sync + DAgger pairs at natural sizes; best-by-val reset."""
    if bridge_r0.stage != "R0":
        raise LineageError(f"R1 must resume from an R0 bridge, got stage {bridge_r0.stage!r}")
    parts = []
    for ds in (sync_ds, dagger_ds):
        if ds is not None and len(ds):
            parts.append(split_by_episode(ds, seed))
    if not parts:
        raise DatasetError("no training data for R1")
    tr, va = parts[0]
    for t2, v2 in parts[1:]:
        tr, va = concat(tr, t2), concat(va, v2)
    out, m = train_bridge(bridge_r0, tr, va, hyper, seed, "R1", log=log)
    m["parent"] = bridge_hash(bridge_r0)
    m["val_offsets"] = va.counts_by_offset()
    return out, m


def ablation(bridge_r0, sync_ds, dagger_ds, hyper, seed=0, evaluate=None):
    """R1 variants trained on sync-only, DAgger-only and mixed data.

    ``evaluate(bridge) -> dict`` optionally adds closed-loop numbers per row.
    """
    rows = []
    for name, s, d in (("sync-only", sync_ds, None), ("dagger-only", None, dagger_ds),
                       ("mixed", sync_ds, dagger_ds)):
        br, m = train_r1(bridge_r0, s, d, hyper, seed)
        row = {"data": name, "n_train": m["n_train"], "val_cos": m["best_val_cos"]}
        if evaluate is not None:
            row.update(evaluate(br))
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# head adaptation


def _head_inputs(policy, bridge, ds, table, batch=256):
    """(clean, bridged) head-space features for every record."""
    mask = policy.backbone.cfg.image_mask()
    obj = _Objective(bridge, mask)
    P = bridge.store.tensors()
    clean, bridged = [], []
    for lo in range(0, len(ds), batch):
        b = ds.batch(np.arange(lo, min(lo + batch, len(ds))))
        if policy.readout == "feature":
            clean.append(b["target"])
            bridged.append(_embed_rows(b["input"], obj.predict(P, b).data, mask))
        else:
            pred = np.concatenate([p.data for p in obj.predict(P, b)], -1)
            for rows_c, rows_b in zip(b["target"], pred):
                clean.append(_kv_head_space(rows_c, bridge.cfg, table)[None])
                bridged.append(_kv_head_space(rows_b, bridge.cfg, table)[None])
    return np.concatenate(clean), np.concatenate(bridged)


def _kv_head_space(rows, cfg, table):
    return kb.to_post(kb.unflatten(rows, cfg, "pre"), table).stacked()


def lora_adapt(policy, bridge, sync_ds, dagger_ds, rank=4, noise_std=0.05, hyper=None, seed=0,
               log=None):
    """Train low-rank adapters on the head's hidden MLP maps; the base head stays frozen.

    The training set pairs every record's clean features and bridge-predicted
    features (a 50/50 mix), both perturbed by Gaussian noise of
    ``noise_std * std(clean features)``; targets are the expert actions.
    """
    head = policy.head
    if not head.trained:
        raise GateError("head adaptation needs a trained head", policy.gate)
    targets = [k for k in LORA_TARGETS if k in head.params]
    for k in targets:
        if rank < 1 or rank >= min(head.params[k].shape):
            raise ValueError(f"rank {rank} invalid for {k} with shape {head.params[k].shape}")
    hyper = hyper or TrainHyper(lr0=1e-3, epochs=10, t_max=10)
    ds = sync_ds if dagger_ds is None or not len(dagger_ds) else concat(sync_ds, dagger_ds)
    bundle = sch.PolicyBundle(policy, bridge)
    clean, bridged = _head_inputs(policy, bridge, ds, bundle.table)
    q = ds.arrays["q"].astype(np.float64)
    expert = ds.arrays["expert"].astype(np.float64)
    data = {"rep": np.concatenate([clean, bridged]), "q": np.concatenate([q, q]),
            "action": np.concatenate([expert, expert])}
    g = rngmod.stream(seed, "lora-init")
    lora = ParamStore()
    for k in targets:
        fan_in, fan_out = head.params[k].shape
        lora.add(k + ".A", g.standard_normal((fan_in, rank)) / np.sqrt(fan_in))
        lora.add(k + ".B", np.zeros((rank, fan_out)))
    adapted = Head(head.cfg, head.bcfg, head.params, trained=True)
    adapted.lora = lora
    on_bridge = {"rep": bridged, "q": q, "action": expert}
    before = action_mse(head, on_bridge)
    history = train_head(adapted, data, hyper, seed, lora=lora, log=log,
                         rep_noise=noise_std * float(clean.std()))
    adapted.lora = lora.astype(np.float32)
    adapted.lora.reset_optimizer()
    after = action_mse(adapted, on_bridge)
    metrics = {"rank": rank, "noise_std": noise_std, "train_loss": history,
               "mse_bridge_before": before, "mse_bridge_after": after,
               "mse_clean_after": action_mse(adapted, {"rep": clean, "q": q, "action": expert}),
               "bridge_stage": bridge.stage, "n_records": len(ds)}
    return Policy(policy.backbone, adapted, policy.gate, policy.noise_seed), metrics


# ---------------------------------------------------------------------------
# bridge persistence


def save_bridge(directory, bridge, meta=None):
    """Write ``bridge.ckpt`` and ``bridge.json``; returns the content hash."""
    import os
    from .tensorkit import checkpoint
    os.makedirs(directory, exist_ok=True)
    checkpoint.save(os.path.join(directory, "bridge.ckpt"), bridge.store, "bridge",
                    bridge.cfg.seed, {"stage": bridge.stage})
    man = dict(bridge.manifest(), hash=bridge_hash(bridge), **(meta or {}))
    with open(os.path.join(directory, "bridge.json"), "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
    return man["hash"]


def load_bridge(directory):
    """(bridge, manifest); the stored hash must match the checkpoint."""
    import os
    from .tensorkit import checkpoint
    with open(os.path.join(directory, "bridge.json")) as fh:
        man = json.load(fh)
    store, header = checkpoint.load(os.path.join(directory, "bridge.ckpt"), "bridge")
    if man["variant"] == "feature":
        br = fb.BridgeParams(fb.BridgeConfig(**man["config"]), store, header["meta"]["stage"])
    else:
        br = kb.KVBridgeParams(kb.KVBridgeConfig(**man["config"]), store, header["meta"]["stage"])
    if bridge_hash(br) != man["hash"]:
        raise LineageError(f"bridge checkpoint hash {bridge_hash(br)} != manifest {man['hash']}")
    return br, man
