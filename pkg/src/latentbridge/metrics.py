"""Cost accounting and diagnostics.

Costs are abstract per-component values (milliseconds by convention). Every
report here is computed from episode logs plus a cost model, so it can be
recomputed offline from persisted logs.
"""
from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import asdict, dataclass

SWEEP_COLUMNS = ("f", "sr", "retention", "avg_cost", "savings", "calls")


@dataclass(frozen=True)
class CostModel:
    c_backbone: float
    c_head: float
    c_bridge: float
    c_vision_bridge: float = 0.0
    name: str = "custom"

    def __post_init__(self):
        for k in ("c_backbone", "c_head", "c_bridge", "c_vision_bridge"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")
        if self.bridge_total >= self.backbone_total:
            raise ValueError("a bridge step must cost less than a backbone step")

    @property
    def backbone_total(self):
        return self.c_backbone + self.c_head

    @property
    def bridge_total(self):
        return self.c_bridge + self.c_vision_bridge + self.c_head

    def step_cost(self, kind):
        return self.backbone_total if kind == "VLM" else self.bridge_total

    def to_dict(self):
        return asdict(self)


PROFILES = {
    "groot": CostModel(63.0, 27.0, 2.0, 0.0, "groot"),
    "pi05": CostModel(46.0, 30.0, 1.0, 5.0, "pi05"),
}


def profile(name):
    try:
        return PROFILES[name]
    except KeyError:
        raise KeyError(f"unknown cost profile {name!r}; choose from {sorted(PROFILES)}") from None


def avg_step_cost(cost, f):
    if f < 1:
        raise ValueError(f"call period must be >= 1, got {f}")
    return (cost.backbone_total + (f - 1) * cost.bridge_total) / f


def vlm_savings(f):
    if f < 1:
        raise ValueError(f"call period must be >= 1, got {f}")
    return (f - 1) / f


def amdahl_ceiling(p, s_local):
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if s_local <= 0:
        raise ValueError("local speedup must be positive")
    return 1.0 / ((1.0 - p) + p / s_local)


def net_speedup(sync_step_cost, sync_ep_len, sched_step_cost, sched_ep_len):
    if sync_ep_len <= 0 or sched_ep_len <= 0:
        raise ValueError("episode lengths must be positive")
    if sync_step_cost <= 0 or sched_step_cost <= 0:
        raise ValueError("step costs must be positive")
    return (sync_step_cost * sync_ep_len) / (sched_step_cost * sched_ep_len)


def retention(sr_method, sr_sync):
    """``sr_method / sr_sync``; None when the sync rate is zero or undefined."""
    if sr_sync is None or sr_method is None or sr_sync <= 0:
        return None
    return sr_method / sr_sync


def binomial_se(p, n):
    if not n or p is None:
        return None
    return math.sqrt(max(p * (1 - p), 0.0) / n)


def paper_round(x, digits=0):
    """Half-up rounding for display columns (``round`` is banker's rounding)."""
    scale = 10 ** digits
    return math.floor(x * scale + 0.5) / scale


# ---------------------------------------------------------------------------
# reductions over episode logs


def episode_cost(log, cost):
    return sum(cost.step_cost(r["kind"]) for r in log.steps)


def latency_report(logs, cost):
    """Average per-step cost, per-episode cost and backbone-call fraction."""
    steps = sum(len(l.steps) for l in logs)
    calls = sum(l.calls for l in logs)
    total = sum(episode_cost(l, cost) for l in logs)
    return {"avg_step_cost": total / steps if steps else None,
            "episode_cost": total / len(logs) if logs else None,
            "call_fraction": calls / steps if steps else None,
            "steps": steps, "calls": calls, "cost_model": cost.to_dict()}


class NoOracleError(ValueError):
    pass


def chained_cosine_by_offset(logs):
    """Mean deployed and copy-baseline cosine per offset (offset 0 = backbone step)."""
    acc = defaultdict(lambda: [0.0, 0.0, 0])
    for log in logs:
        for r in log.steps:
            if r.get("cos") is None:
                continue
            a = acc[r["offset"]]
            a[0] += r["cos"]
            a[1] += r["copy_cos"]
            a[2] += 1
    if not acc:
        raise NoOracleError("no oracle cosine records in these logs")
    return {k: {"bridge": v[0] / v[2], "copy": v[1] / v[2], "n": v[2]}
            for k, v in sorted(acc.items())}


def copy_nonincreasing(table, eps=0.005):
    offs = sorted(k for k in table if k >= 1)
    return all(table[b]["copy"] <= table[a]["copy"] + eps for a, b in zip(offs, offs[1:]))


def bridge_dominates_copy(table):
    return all(v["bridge"] >= v["copy"] for k, v in table.items() if k >= 1)


def summarize(logs):
    """Success rate, lengths, backbone calls; order-independent."""
    n = len(logs)
    if n == 0:
        return {"n": 0, "sr": None, "sr_undefined": True, "mean_len": None,
                "mean_success_len": None, "calls": 0, "steps": 0}
    succ = [l for l in logs if l.success]
    return {"n": n, "sr": len(succ) / n, "sr_undefined": False,
            "sr_se": binomial_se(len(succ) / n, n),
            "mean_len": sum(l.length for l in logs) / n,
            "mean_success_len": (sum(l.length for l in succ) / len(succ)) if succ else None,
            "calls": sum(l.calls for l in logs), "steps": sum(l.length for l in logs)}


# ---------------------------------------------------------------------------
# frequency sweep


def sweep_rows(results_by_f, cost, sr_sync=None):
    """Rows of the sweep table from per-f log lists (``f -> logs``)."""
    if not results_by_f:
        raise ValueError("empty f list")
    if sr_sync is None:
        if 1 not in results_by_f:
            raise ValueError("sync SR needed: include f=1 or pass sr_sync")
        sr_sync = summarize(results_by_f[1])["sr"]
    rows = []
    for f in sorted(results_by_f):
        s = summarize(results_by_f[f])
        ret = 1.0 if f == 1 else retention(s["sr"], sr_sync)
        rows.append({"f": f, "sr": s["sr"], "retention": ret, "avg_cost": avg_step_cost(cost, f),
                     "savings": vlm_savings(f), "calls": s["calls"]})
    return rows


def frequency_sweep(bundle, f_list, task, n_episodes, cost, seed=0, kind="fixed", jobs=1):
    """Evaluate ``kind:f`` for each f (1 is sync) and tabulate the sweep."""
    from . import scheduler

    f_list = sorted(set(int(f) for f in f_list))
    if not f_list:
        raise ValueError("f_list must be non-empty")
    logs = {}
    for f in f_list:
        sched = scheduler.SchedulePolicy.sync() if f == 1 else scheduler.SchedulePolicy(kind, f)
        logs[f] = scheduler.evaluate(bundle, sched, task, n_episodes, seed, jobs=jobs)["logs"]
    sr_sync = None
    if 1 not in logs:
        sr_sync = summarize(scheduler.evaluate(bundle, scheduler.SchedulePolicy.sync(), task,
                                               n_episodes, seed, jobs=jobs)["logs"])["sr"]
    return sweep_rows(logs, cost, sr_sync), logs


def rows_to_csv(rows, columns=SWEEP_COLUMNS):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else repr(r[k]) if isinstance(r[k], float) else r[k])
                    for k in columns})
    return buf.getvalue()
