"""Closed-loop inference: backbone steps, bridge steps and their bookkeeping.

A period starts with a backbone (VLM) step that refreshes every cache; the
following steps are served by the bridge, which chains on its own previous
prediction. ``cache:f`` walks the same code path with the delta forced to
zero, so an untrained bridge and feature caching produce identical logs.
"""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import bridge as fb
from . import env as envmod
from . import kvbridge as kb
from . import metrics
from .teacher import RotaryTable
from .tensorkit import nn as tnn
from .tensorkit import rng as rngmod

VLM, BRIDGE = "VLM", "BRIDGE"
KINDS = ("sync", "fixed", "cache", "phase_aware")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SchedulePolicy:
    kind: str
    f: int = 1
    tau_nav: float = 0.5
    tau_manip: float = 0.15
    f_map: tuple = (2, 3, 4)   # high / medium / low motion

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; choose from {KINDS}")
        if self.f < 1:
            raise ValueError("call period f must be >= 1")
        if not self.tau_nav > self.tau_manip > 0:
            raise ValueError("thresholds must satisfy tau_nav > tau_manip > 0")
        if self.kind == "sync" and self.f != 1:
            raise ValueError("sync has f = 1")

    @classmethod
    def sync(cls):
        return cls("sync", 1)

    @classmethod
    def parse(cls, text, a_max=1.0, tau_nav=None, tau_manip=None):
        """``sync``, ``fixed:F``, ``cache:F`` or ``phase_aware``.

        Phase thresholds default to 0.5 and 0.15 of ``a_max``.
        """
        kind, _, arg = text.strip().partition(":")
        kind = {"phase": "phase_aware", "bridge": "fixed"}.get(kind, kind)
        nav = 0.5 * a_max if tau_nav is None else tau_nav
        manip = 0.15 * a_max if tau_manip is None else tau_manip
        if kind == "sync":
            return cls.sync()
        if kind == "phase_aware":
            return cls(kind, 1, nav, manip)
        if kind not in KINDS or not arg.isdigit():
            raise ValueError(f"bad schedule {text!r}; expected sync, fixed:F, cache:F or phase_aware")
        f = int(arg)
        if f == 1:
            return cls.sync()
        return cls(kind, f, nav, manip)

    @property
    def name(self):
        if self.kind in ("sync", "phase_aware"):
            return self.kind
        return f"{self.kind}:{self.f}"

    @property
    def uses_bridge(self):
        return self.kind in ("fixed", "phase_aware")

    def period_for(self, a_prev):
        if self.kind != "phase_aware":
            return self.f
        m = float(np.linalg.norm(np.asarray(a_prev)[:2]))
        high, med, low = self.f_map
        if m > self.tau_nav:
            return high
        return med if m > self.tau_manip else low

    def describe(self):
        d = {"name": self.name, "kind": self.kind, "f": self.f}
        if self.kind == "phase_aware":
            d.update(tau_nav=self.tau_nav, tau_manip=self.tau_manip, f_map=list(self.f_map),
                     update="per-period")
        return d


def decide(policy, t, a_prev=None, offset_prev=0, f_current=None):
    """``(kind, f)`` for step ``t``; ``offset_prev`` counts bridge steps since the last VLM.

    A new period (and, for phase-aware scheduling, a new f) only starts when
    the current one is exhausted; the first step is always a VLM step.
    """
    if policy.kind == "sync":
        return VLM, 1
    if t == 0 or f_current is None or offset_prev + 1 >= f_current:
        a = np.zeros(2) if a_prev is None else a_prev
        return VLM, policy.period_for(a)
    return BRIDGE, f_current


def step_pattern(policy, n_steps, actions=None):
    """Step kinds for ``n_steps`` steps (actions feed phase-aware decisions)."""
    kinds, off, f = [], 0, None
    for t in range(n_steps):
        a_prev = None if actions is None or t == 0 else actions[t - 1]
        k, f_new = decide(policy, t, a_prev, off, f)
        if k == VLM:
            off, f = 0, f_new
        else:
            off += 1
        kinds.append(k)
    return kinds


# ---------------------------------------------------------------------------
# runtime state


def digest(a):
    return hashlib.blake2b(np.ascontiguousarray(a, dtype=np.float64).tobytes(),
                           digest_size=8).hexdigest()


def _frozen(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


class RuntimeCache:
    """Outputs of the most recent backbone call plus the chained representation.

    ``s``, the text rows and the fresh snapshot are read-only arrays; only a
    backbone step (which builds a new cache) replaces them.
    """

    def __init__(self, out, variant, image_mask, table, obs):
        self.variant = variant
        self.s = _frozen(out.s)
        self.text_rows = _frozen(out.z[~image_mask])
        self.obs = obs
        if variant == "feature":
            self.fresh = _frozen(out.z)
            self.current = self.fresh
        else:
            pre = kb.to_pre(out.kv, table)
            self.fresh = kb.KVCacheSnapshot([_frozen(k) for k in pre.keys],
                                            [_frozen(v) for v in pre.values], pre.rope_state)
            self.current = self.fresh

    def bridge_space(self, rep):
        """Flat array of a representation as the bridge sees it."""
        return rep if self.variant == "feature" else kb.flatten(rep)


@dataclass
class EpisodeLog:
    header: dict
    steps: list = field(default_factory=list)
    success: bool = False
    length: int = 0

    @property
    def calls(self):
        return sum(1 for r in self.steps if r["kind"] == VLM)

    @property
    def actions(self):
        return [r["action"] for r in self.steps]

    def step_lines(self):
        """JSONL body (per-step records plus the terminal record)."""
        lines = [json.dumps(r, sort_keys=True) for r in self.steps]
        lines.append(json.dumps({"terminal": True, "success": self.success,
                                 "length": self.length}, sort_keys=True))
        return lines

    def to_jsonl(self):
        return "\n".join([json.dumps({"header": self.header}, sort_keys=True)] + self.step_lines()) + "\n"

    @classmethod
    def from_jsonl(cls, text):
        lines = [json.loads(l) for l in text.splitlines() if l.strip()]
        if not lines or "header" not in lines[0] or not lines[-1].get("terminal"):
            raise ValueError("malformed episode log")
        return cls(lines[0]["header"], lines[1:-1], lines[-1]["success"], lines[-1]["length"])


def write_logs(path, logs):
    with open(path, "w") as fh:
        for log in logs:
            fh.write(log.to_jsonl())


def read_logs(path):
    """Split a concatenated JSONL file back into EpisodeLogs."""
    logs, chunk = [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            chunk.append(line)
            if json.loads(line).get("terminal"):
                logs.append(EpisodeLog.from_jsonl("".join(chunk)))
                chunk = []
    if chunk:
        raise ValueError(f"{path}: trailing records without a terminal line")
    return logs


# ---------------------------------------------------------------------------
# bundle


class PolicyBundle:
    """Policy, optional bridge and cost model, validated against each other."""

    def __init__(self, policy, bridge=None, cost=None):
        self.policy = policy
        self.bridge = bridge
        self.cost = cost or metrics.profile("groot" if policy.readout == "feature" else "pi05")
        bcfg = policy.backbone.cfg
        self.variant = policy.readout
        self.image_mask = bcfg.image_mask()
        self.table = RotaryTable.build(bcfg.n_tokens, bcfg.head_dim, bcfg.rope_base) \
            if bcfg.rope_enabled else None
        if bridge is not None:
            self._check(bridge)

    def _check(self, br):
        b = self.policy.backbone.cfg
        if isinstance(br, fb.BridgeParams):
            c = br.cfg
            if self.variant != "feature":
                raise ManifestError("feature bridge paired with a KV read-out policy")
            if (c.n_img, c.n_tokens, c.width) != (b.n_img, b.n_tokens, b.width):
                raise ManifestError(f"bridge dims {(c.n_img, c.n_tokens, c.width)} != policy "
                                    f"{(b.n_img, b.n_tokens, b.width)}")
        elif isinstance(br, kb.KVBridgeParams):
            c = br.cfg
            if self.variant != "kv":
                raise ManifestError("KV bridge paired with a feature read-out policy")
            if (c.n_layers, c.n_tokens, c.d_k, c.d_v, c.d_embed) != \
                    (b.n_layers, b.n_tokens, b.head_dim, b.head_dim, b.d_embed):
                raise ManifestError("KV bridge geometry does not match the policy backbone")
            if b.rope_enabled and c.rope_base != b.rope_base:
                raise ManifestError("rotary base mismatch")
        else:
            raise ManifestError(f"unsupported bridge type {type(br).__name__}")


def _fidelity(bundle, cache, rep_bridge, oracle_out):
    """(deployed cosine, copy-baseline cosine) against the oracle representation."""
    if bundle.variant == "feature":
        m = bundle.image_mask
        target = oracle_out.z[m]
        return (float(tnn.np_row_cosine(rep_bridge[m], target).mean()),
                float(tnn.np_row_cosine(cache.fresh[m], target).mean()))
    target = kb.flatten(kb.to_pre(oracle_out.kv, bundle.table))
    w = cache.fresh.keys[0].shape[-1] + cache.fresh.values[0].shape[-1]

    def layer_rows(x):
        return x.reshape(x.shape[0], -1, w)

    def cos(x):
        return float(tnn.np_row_cosine(layer_rows(kb.flatten(x)), layer_rows(target)).mean())

    return cos(rep_bridge), cos(cache.fresh)


def run_episode(bundle, schedule, task, seed, oracle=False, sink=None, denoise_steps=None):
    """Roll out one episode; returns an EpisodeLog.

    ``oracle`` runs the backbone on bridge steps purely to score fidelity.
    ``sink`` (if given) receives a dict per step with everything a dataset
    record needs; it never alters the rollout.
    """
    policy, backbone = bundle.policy, bundle.policy.backbone
    if schedule.uses_bridge and bundle.bridge is None:
        raise ManifestError(f"schedule {schedule.name} needs a bridge")
    variant, mask, table = bundle.variant, bundle.image_mask, bundle.table
    state, obs = envmod.reset(task, seed)
    a_dim = task.action_dim
    a_prev = np.zeros(a_dim)
    offset, f, cache, e_prev = 0, None, None, None
    log = EpisodeLog({"schedule": schedule.describe(), "seed": int(seed), "task": task.name,
                      "variant": variant, "oracle": bool(oracle),
                      "bridge_stage": getattr(bundle.bridge, "stage", None),
                      "head_trained": bool(policy.head.trained)})
    while not state.done:
        t = state.step_index
        kind, f_new = decide(schedule, t, a_prev, offset, f)
        e = backbone.cheap_embedding(obs) if variant == "kv" else None
        de = None if e is None else e - (e if e_prev is None else e_prev)
        rec = {"t": t, "kind": kind}
        payload = None
        if kind == VLM:
            out = backbone.forward(obs)
            f, offset = f_new, 0
            cache = RuntimeCache(out, variant, mask, table, obs)
            rep = policy.representation(out)
            rec["digest"] = digest(cache.bridge_space(cache.fresh))
            if oracle:
                rec["cos"], rec["copy_cos"] = 1.0, 1.0
            if sink is not None:
                payload = {"out": out, "input": None}
        else:
            offset += 1
            prev = cache.current
            rec["digest"] = digest(cache.bridge_space(prev))
            if variant == "feature":
                if schedule.uses_bridge:
                    delta = fb.bridge_forward(bundle.bridge, prev[mask], cache.s, obs.q, a_prev)
                else:
                    delta = np.zeros((int(mask.sum()), prev.shape[-1]))
                nxt = fb.apply_delta(prev, delta, cache.text_rows, mask)
                rep = nxt
            else:
                if schedule.uses_bridge:
                    deltas = kb.kv_bridge_forward(bundle.bridge, e, de, prev, obs.q, a_prev)
                else:
                    deltas = ([np.zeros_like(k) for k in prev.keys],
                              [np.zeros_like(v) for v in prev.values])
                nxt = kb.add_kv_delta(prev, deltas)
                rep = kb.to_post(nxt, table).stacked()
            cache.current = nxt
            oracle_out = None
            if oracle or sink is not None:
                oracle_out = backbone.forward(obs)
            if oracle:
                rec["cos"], rec["copy_cos"] = _fidelity(bundle, cache, nxt, oracle_out)
            if sink is not None:
                payload = {"out": oracle_out, "input": prev}
        action = envmod.clamp_action(task, policy.act(rep, obs.q, seed, t, denoise_steps))
        rec.update(offset=offset, f=f, action=action.tolist(), q=obs.q.tolist(),
                   cost=bundle.cost.step_cost(kind))
        if sink is not None:
            payload.update(t=t, kind=kind, offset=offset, f=f, s=cache.s, q=obs.q,
                           a_prev=a_prev, e=e, de=de, src_obs=cache.obs, obs=obs,
                           expert=envmod.expert_action(task, state), action=action,
                           episode_seed=seed)
            sink(payload)
        log.steps.append(rec)
        state, obs, _, _ = envmod.step(task, state, action)
        a_prev = action
        e_prev = e
    log.success, log.length = bool(state.success), int(state.step_index)
    return log


# ---------------------------------------------------------------------------
# evaluation


def episode_seeds(seed, n):
    return [rngmod.derive_seed(seed, "eval-episode", i) for i in range(n)]


def _worker(args):
    bundle, schedule, task, seeds, oracle, steps = args
    return [run_episode(bundle, schedule, task, s, oracle, None, steps) for s in seeds]


def evaluate(bundle, schedule, task, n_episodes, seed=0, oracle=False, jobs=1, denoise_steps=None):
    """Success rate, lengths, backbone calls and (with ``oracle``) cosine by offset."""
    seeds = episode_seeds(seed, n_episodes)
    if jobs > 1 and n_episodes > 1:
        chunks = [seeds[i::jobs] for i in range(jobs)]
        with ProcessPoolExecutor(jobs) as ex:
            parts = list(ex.map(_worker, [(bundle, schedule, task, c, oracle, denoise_steps)
                                          for c in chunks]))
        by_seed = {l.header["seed"]: l for p in parts for l in p}
        logs = [by_seed[s] for s in seeds]
    else:
        logs = _worker((bundle, schedule, task, seeds, oracle, denoise_steps))
    res = metrics.summarize(logs)
    res.update(schedule=schedule.describe(), task=task.name, seed=seed, logs=logs, warnings=[])
    if not bundle.policy.head.trained:
        res["warnings"].append("action head is untrained")
    if oracle and logs:
        res["cosine_by_offset"] = metrics.chained_cosine_by_offset(logs)
    return res
