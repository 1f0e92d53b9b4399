"""Golden-value checks that need no training (run by ``latentbridge selftest``)."""
from __future__ import annotations

import time

import numpy as np

from . import env as envmod
from . import kvbridge as kb
from . import metrics
from . import scheduler as sch
from .teacher import Backbone, BackboneConfig, Head, HeadConfig, Policy, RotaryTable

TABLE7 = {("groot", 3): 148 / 3, ("groot", 4): 44.25, ("pi05", 3): 148 / 3, ("pi05", 4): 46.0,
          ("groot", 1): 90.0, ("pi05", 1): 76.0}
SAVINGS_PCT = {2: 50, 3: 67, 4: 75, 5: 80, 6: 83, 8: 88, 12: 92}


def _table7(profiles):
    bad = []
    for (name, f), want in TABLE7.items():
        got = metrics.avg_step_cost(profiles[name], f)
        if abs(got - want) > 1e-9:
            bad.append(f"avg_step_cost({name}, f={f}) = {got!r}, expected {want!r}")
    return bad


def _amdahl():
    bad = []
    got = metrics.amdahl_ceiling(0.70, 1.5)
    if abs(got - 1.3043) > 1e-3:
        bad.append(f"amdahl_ceiling(0.70, 1.5) = {got}")
    grid = np.linspace(0.0, 1.0, 100)
    vals = [metrics.amdahl_ceiling(p, 1.5) for p in grid]
    if any(b < a for a, b in zip(vals, vals[1:])):
        bad.append("amdahl_ceiling not monotone in p")
    return bad


def _savings():
    return [f"vlm_savings({f}) rounds to {metrics.paper_round(100 * metrics.vlm_savings(f))}"
            for f, pct in SAVINGS_PCT.items()
            if metrics.paper_round(100 * metrics.vlm_savings(f)) != pct]


def _rope(n=1000, seed=0):
    g = np.random.default_rng(seed)
    table = RotaryTable.build(64, 8)
    pos = g.integers(0, 64, n)
    k = g.standard_normal((n, 8))
    bad = []
    fwd = kb.rope_apply(kb.rope_invert(k, pos, table), pos, table)
    inv = kb.rope_invert(kb.rope_apply(k, pos, table), pos, table)
    for name, x in (("apply.invert", fwd), ("invert.apply", inv)):
        err = np.abs(x - k).max() / np.abs(k).max()
        if err >= 1e-12:
            bad.append(f"rope {name} relative error {err:.3g}")
    norm = np.abs(np.linalg.norm(kb.rope_apply(k, pos, table), axis=-1) - np.linalg.norm(k, axis=-1))
    if norm.max() >= 1e-12:
        bad.append(f"rope changes norms by {norm.max():.3g}")
    return bad


def _zero_init(seeds=(0, 1)):
    from .pipeline import new_bridge
    bad = []
    backbone = Backbone(BackboneConfig())
    task = envmod.preset("switch")
    for readout in ("feature", "kv"):
        head = Head(HeadConfig(readout=readout), backbone.cfg)
        policy = Policy(backbone, head)
        bundle = sch.PolicyBundle(policy, new_bridge(policy))
        for f in (2, 3):
            for s in seeds:
                a = sch.run_episode(bundle, sch.SchedulePolicy("fixed", f), task, s)
                b = sch.run_episode(bundle, sch.SchedulePolicy("cache", f), task, s)
                if a.step_lines() != b.step_lines():
                    bad.append(f"untrained {readout} bridge differs from cache at f={f}, seed {s}")
    return bad


def run(profiles=None):
    """List of ``(name, failures, seconds)``; empty failures means the check passed."""
    profiles = profiles or metrics.PROFILES
    checks = [("table7-cost", lambda: _table7(profiles)), ("amdahl", _amdahl),
              ("savings", _savings), ("rope-round-trip", _rope), ("zero-init", _zero_init)]
    out = []
    for name, fn in checks:
        t0 = time.perf_counter()
        out.append((name, fn(), time.perf_counter() - t0))
    return out
