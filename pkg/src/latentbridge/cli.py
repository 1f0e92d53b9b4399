"""Command-line entry point: ``latentbridge <command> [options]``.

Every command writes into its ``--out`` directory: the effective config
(``config.cfg``), a ``manifest.json`` naming the stage, its content hash, its
inputs and the command line that produced it, and a ``metrics.json``.

Exit codes: 0 success, 1 other failure, 2 usage/config error, 3 lineage
mismatch, 4 numeric failure, 5 BC gate failure.
"""
from __future__ import annotations

import argparse
import glob
import hashlib
import json
import os
import sys
import tempfile
import time

from . import config as cfgmod
from . import env as envmod
from . import metrics
from . import pipeline as pl
from . import scheduler as sch
from . import selftest as selftest_mod
from .teacher import Backbone, BackboneConfig, GateError, HeadConfig, Policy, bc_train
from .tensorkit import checkpoint
from .tensorkit.optim import NumericError, TrainHyper

EXIT_OK, EXIT_OTHER, EXIT_USAGE, EXIT_LINEAGE, EXIT_NUMERIC, EXIT_GATE = 0, 1, 2, 3, 4, 5
OUT_ENV = "LATENTBRIDGE_OUT"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# output directory helpers


def _json_default(o):
    import numpy as np
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise pl.LineageError(f"missing {path}") from None


def _sha(path):
    return checkpoint.file_hash(path)[:16]


class Output:
    """One command's output directory."""

    def __init__(self, path, cfg, stage, argv):
        if path is None:
            raise UsageError("--out is required (or set LATENTBRIDGE_OUT)")
        os.makedirs(path, exist_ok=True)
        self.path, self.cfg, self.stage, self.argv = path, cfg, stage, argv
        with open(self.file("config.cfg"), "w") as fh:
            fh.write(cfg.echo())

    def file(self, name):
        return os.path.join(self.path, name)

    def finish(self, artifacts, inputs=None, metrics_obj=None, extra=None):
        """Write metrics and the manifest; ``artifacts`` are file names hashed into it."""
        if metrics_obj is not None:
            _dump(self.file("metrics.json"), metrics_obj)
        hashes = {a: _sha(self.file(a)) for a in sorted(artifacts)}
        digest = hashlib.sha256(json.dumps(hashes, sort_keys=True).encode()).hexdigest()[:16]
        man = {"stage": self.stage, "hash": digest, "name": f"{self.stage}-{digest}",
               "artifacts": hashes, "inputs": inputs or {}, "argv": self.argv}
        man.update(extra or {})
        _dump(self.file("manifest.json"), man)
        return man


def _manifest(directory, stage=None):
    man = _load_json(os.path.join(directory, "manifest.json"))
    if stage is not None and man.get("stage") not in ((stage,) if isinstance(stage, str) else stage):
        raise pl.LineageError(f"{directory}: expected a {stage} output, found stage {man.get('stage')!r}")
    return man


def _expect(what, expected, found):
    if expected != found:
        raise pl.LineageError(f"{what}: expected hash {expected}, found {found}")


# ---------------------------------------------------------------------------
# builders


def _tasks(names):
    return [envmod.preset(n) for n in names]


def _cost(cfg):
    c = cfg["cost"]
    if c["profile"] == "custom":
        return metrics.CostModel(c["c_backbone"], c["c_head"], c["c_bridge"], c["c_vision_bridge"])
    return metrics.profile(c["profile"])


def _schedule(cfg, text=None):
    s = cfg["schedule"]
    try:
        return sch.SchedulePolicy.parse(text or s["policy"], s["a_max"], s["tau_nav"], s["tau_manip"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _load_policy(directory):
    policy = Policy.load(os.path.join(directory, "policy"))
    return policy, policy.manifest_hash()


def _base_policy(directory):
    man = _manifest(directory)
    return man.get("base_policy")


def _dataset(directory, policy_hash):
    man = _manifest(directory, ("sync", "dagger"))
    _expect(f"{directory} policy", policy_hash, man["inputs"]["policy"])
    return pl.read_dataset(os.path.join(directory, "dataset.bin"), policy_hash), man


def _bridge(directory, policy_hash, base_hash=None):
    # an adapted head keeps its base backbone, so bridges of the base policy still fit
    man = _manifest(directory, ("R0", "R1"))
    if base_hash is None or man["inputs"]["policy"] != base_hash:
        _expect(f"{directory} policy", policy_hash, man["inputs"]["policy"])
    br, bman = pl.load_bridge(os.path.join(directory, "bridge"))
    return br, bman


def _r0_hyper(cfg, variant):
    r = cfg["train_r0"]
    epochs = r["epochs"] if variant == "feature" else r["epochs_kv"]
    return TrainHyper(r["lr0"], r["weight_decay"], r["clip_norm"], max(epochs, 1), r["batch_size"], epochs)


def _r1_hyper(cfg):
    r0, r = cfg["train_r0"], cfg["train_r1"]
    lr = r["lr0"] or (pl.R1_LR_LONG if r["long_horizon"] else pl.R1_LR)
    return TrainHyper(lr, r0["weight_decay"], r0["clip_norm"], r["t_max"], r0["batch_size"], r["epochs"])


# ---------------------------------------------------------------------------
# commands


def cmd_train_teacher(args, cfg, out):
    t = cfg["teacher"]
    backbone = Backbone(BackboneConfig(rope_enabled=t["rope"]))
    head_cfg = HeadConfig(kind=t["head"], readout=t["readout"], denoise_steps=t["denoise_steps"])
    hyper = TrainHyper(lr0=t["bc_lr"], epochs=t["bc_epochs"], t_max=max(t["bc_epochs"], 1))
    tasks = _tasks(cfg["env"]["train_tasks"])
    try:
        policy, m = bc_train(backbone, head_cfg, tasks, hyper, t["bc_episodes"], cfg["run"]["seed"],
                             t["bc_noise"], gate_task=tasks[0], gate_episodes=t["gate_episodes"],
                             gate_threshold=t["gate_threshold"], strict=True, log=args.log)
    except GateError as exc:
        _dump(out.file("metrics.json"), exc.metrics)
        raise
    h = policy.save(out.file("policy"))
    return out.finish(["policy/backbone.ckpt", "policy/head.ckpt", "policy/policy.json"], {},
                      m, {"policy": h})


def cmd_collect_sync(args, cfg, out):
    policy, ph = _load_policy(args.policy)
    c = cfg["collect"]
    ds = pl.collect_sync(policy, _tasks(cfg["env"]["train_tasks"]), c["sync_episodes"],
                         cfg["run"]["seed"], _cost(cfg))
    header = pl.write_dataset(out.file("dataset.bin"), ds)
    return out.finish(["dataset.bin"], {"policy": ph},
                      {"n_records": header["n_records"], "counts": header["counts"],
                       "n_episodes": header["n_episodes"]})


def cmd_train_bridge(args, cfg, out):
    policy, ph = _load_policy(args.policy)
    variant = args.variant or cfg["bridge"]["variant"]
    ds, dman = _dataset(args.sync, ph)
    b = cfg["bridge"]
    bridge = pl.new_bridge(policy, variant, cfg["run"]["seed"], b["alpha"], d_b=b["d_b"],
                           n_blocks=b["blocks"])
    trained, m = pl.train_r0(bridge, ds, _r0_hyper(cfg, variant), cfg["run"]["seed"], log=args.log)
    inputs = {"policy": ph, "sync": dman["hash"]}
    h = pl.save_bridge(out.file("bridge"), trained, {"inputs": inputs})
    out.stage = "R0"
    return out.finish(["bridge/bridge.ckpt", "bridge/bridge.json"], inputs, m, {"bridge": h})


def cmd_collect_dagger(args, cfg, out):
    policy, ph = _load_policy(args.policy)
    br, bman = _bridge(args.bridge, ph)
    c = cfg["collect"]
    try:
        ds, logs = pl.collect_dagger(br, policy, _tasks(cfg["env"]["train_tasks"]), c["dagger_f"],
                                     c["dagger_episodes"], cfg["run"]["seed"], _cost(cfg))
    except ValueError as exc:
        if isinstance(exc, pl.LineageError):
            raise
        raise UsageError(str(exc)) from exc
    header = pl.write_dataset(out.file("dataset.bin"), ds)
    sch.write_logs(out.file("logs.jsonl"), logs)
    expected = pl.expected_dagger_counts([l.length for l in logs], c["dagger_f"])
    return out.finish(["dataset.bin", "logs.jsonl"], {"policy": ph, "bridge": bman["hash"]},
                      {"n_records": header["n_records"], "counts": header["counts"],
                       "expected_counts": expected, "f": c["dagger_f"]})


def cmd_refine(args, cfg, out):
    policy, ph = _load_policy(args.policy)
    if args.bridge is None:
        raise pl.LineageError("refine needs an R0 bridge (--bridge); none given")
    br, bman = _bridge(args.bridge, ph)
    if br.stage != "R0":
        raise pl.LineageError(f"refine needs an R0 checkpoint, {args.bridge} is {br.stage}")
    sync_ds, sman = _dataset(args.sync, ph)
    dagger_ds, dman = (None, None) if args.dagger is None else _dataset(args.dagger, ph)
    if dagger_ds is not None:
        _expect(f"{args.dagger} bridge parent", bman["hash"], dagger_ds.header["bridge_parent"])
    trained, m = pl.train_r1(br, sync_ds, dagger_ds, _r1_hyper(cfg), cfg["run"]["seed"], log=args.log)
    inputs = {"policy": ph, "parent": bman["hash"], "sync": sman["hash"],
              "dagger": dman["hash"] if dman else None}
    h = pl.save_bridge(out.file("bridge"), trained, {"inputs": inputs})
    out.stage = "R1"
    return out.finish(["bridge/bridge.ckpt", "bridge/bridge.json"], inputs, m, {"bridge": h})


def cmd_adapt_head(args, cfg, out):
    policy, ph = _load_policy(args.policy)
    br, bman = _bridge(args.bridge, ph)
    sync_ds, sman = _dataset(args.sync, ph)
    dagger_ds, dman = (None, None) if args.dagger is None else _dataset(args.dagger, ph)
    a = cfg["adapt"]
    hyper = TrainHyper(lr0=a["lr0"], epochs=a["epochs"], t_max=max(a["epochs"], 1))
    try:
        adapted, m = pl.lora_adapt(policy, br, sync_ds, dagger_ds, a["rank"], a["noise_std"], hyper,
                                   cfg["run"]["seed"], log=args.log)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    h = adapted.save(out.file("policy"))
    inputs = {"policy": ph, "bridge": bman["hash"], "bridge_stage": br.stage, "sync": sman["hash"],
              "dagger": dman["hash"] if dman else None}
    return out.finish(["policy/backbone.ckpt", "policy/head.ckpt", "policy/lora.ckpt",
                       "policy/policy.json"], inputs, m, {"policy": h, "base_policy": ph})


def build_eval_report(logs_by_task, cost, schedule, baseline=None):
    """Report from persisted logs only; ``logs_by_task[task][seed] -> logs``."""
    report = {"schedule": schedule, "cost_model": cost.to_dict(), "tasks": {}}
    for task, by_seed in sorted(logs_by_task.items()):
        per_seed = []
        all_logs = []
        for seed, logs in sorted(by_seed.items(), key=lambda kv: int(kv[0])):
            s = metrics.summarize(logs)
            per_seed.append({"seed": int(seed), **s})
            all_logs += logs
        srs = [p["sr"] for p in per_seed if p["sr"] is not None]
        entry = {"per_seed": per_seed, "mean_sr": sum(srs) / len(srs) if srs else None,
                 "pooled": metrics.summarize(all_logs), "latency": metrics.latency_report(all_logs, cost)}
        if any(r.get("cos") is not None for l in all_logs for r in l.steps):
            entry["cosine_by_offset"] = {str(k): v for k, v in
                                         metrics.chained_cosine_by_offset(all_logs).items()}
        if baseline is not None and task in baseline["tasks"]:
            entry["retention"] = metrics.retention(entry["mean_sr"], baseline["tasks"][task]["mean_sr"])
        report["tasks"][task] = entry
    if baseline is not None:
        report["baseline"] = {"schedule": baseline["schedule"], "hash": baseline.get("hash"),
                              "mean_sr": {t: e["mean_sr"] for t, e in baseline["tasks"].items()}}
    return report


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, default=_json_default)


def _eval_tasks(args, cfg):
    return [args.task] if getattr(args, "task", None) else list(cfg["env"]["eval_tasks"])


def cmd_eval(args, cfg, out):
    policy, ph = _load_policy(args.policy)
    schedule = _schedule(cfg, args.schedule)
    warnings = []
    bridge, bman = None, None
    if args.bridge is not None:
        if schedule.kind == "cache":
            warnings.append(f"bridge {args.bridge} ignored under {schedule.name}")
        elif schedule.uses_bridge:
            bridge, bman = _bridge(args.bridge, ph, _base_policy(args.policy))
    if schedule.uses_bridge and bridge is None:
        raise UsageError(f"schedule {schedule.name} needs --bridge")
    bundle = sch.PolicyBundle(policy, bridge, _cost(cfg))
    oracle = args.oracle or cfg["eval"]["oracle"]
    episodes = args.episodes or cfg["eval"]["episodes"]
    logs_by_task, artifacts = {}, []
    for task_name in _eval_tasks(args, cfg):
        task = envmod.preset(task_name)
        logs_by_task[task_name] = {}
        for seed in cfg["eval"]["seeds"]:
            res = sch.evaluate(bundle, schedule, task, episodes, seed, oracle, cfg["run"]["jobs"],
                               cfg["teacher"]["denoise_steps"] if args.denoise_steps is None
                               else args.denoise_steps)
            warnings += [w for w in res["warnings"] if w not in warnings]
            name = f"logs_{task_name}_seed{seed}.jsonl"
            sch.write_logs(out.file(name), res["logs"])
            artifacts.append(name)
            logs_by_task[task_name][seed] = res["logs"]
    baseline = None
    if args.baseline:
        baseline = _load_json(os.path.join(args.baseline, "report.json"))
        baseline["hash"] = _manifest(args.baseline, "eval")["hash"]
    report = build_eval_report(logs_by_task, bundle.cost, schedule.describe(), baseline)
    report["warnings"] = warnings
    _dump(out.file("report.json"), report)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    inputs = {"policy": ph, "bridge": bman["hash"] if bman else None,
              "baseline": baseline["hash"] if baseline else None}
    _print_eval(report)
    return out.finish(artifacts + ["report.json"], inputs)


def _print_eval(report):
    for task, e in report["tasks"].items():
        ret = e.get("retention")
        print(f"{report['schedule']['name']:>12s} {task:>8s} SR {e['mean_sr']:.3f}"
              + (f" retention {ret:.3f}" if ret is not None else ""))


def sweep_from_logs(logs_by_f, cost, sync_logs=None):
    sr_sync = metrics.summarize(sync_logs)["sr"] if sync_logs is not None else None
    return metrics.sweep_rows(logs_by_f, cost, sr_sync)


def cmd_sweep(args, cfg, out):
    policy, ph = _load_policy(args.policy)
    try:
        f_list = sorted({int(f) for f in args.f_list.split(",") if f.strip()}) \
            if args.f_list is not None else list(cfg["sweep"]["f_list"])
    except ValueError as exc:
        raise UsageError(f"bad --f-list: {exc}") from exc
    if not f_list or min(f_list) < 1:
        raise UsageError("--f-list must name at least one period >= 1")
    kind = cfg["sweep"]["kind"]
    bridge, bman = (None, None)
    if kind == "fixed" and max(f_list) > 1:
        if args.bridge is None:
            raise UsageError("a fixed-period sweep needs --bridge")
        bridge, bman = _bridge(args.bridge, ph, _base_policy(args.policy))
    bundle = sch.PolicyBundle(policy, bridge, _cost(cfg))
    task = envmod.preset(_eval_tasks(args, cfg)[0])
    n = args.episodes or cfg["eval"]["episodes"] * len(cfg["eval"]["seeds"])
    seed = cfg["run"]["seed"]
    logs_by_f, artifacts = {}, []
    for f in f_list:
        s = sch.SchedulePolicy.sync() if f == 1 else sch.SchedulePolicy(kind, f)
        logs_by_f[f] = sch.evaluate(bundle, s, task, n, seed, jobs=cfg["run"]["jobs"])["logs"]
        sch.write_logs(out.file(f"logs_f{f}.jsonl"), logs_by_f[f])
        artifacts.append(f"logs_f{f}.jsonl")
    sync_logs = None
    if 1 not in logs_by_f:
        sync_logs = sch.evaluate(bundle, sch.SchedulePolicy.sync(), task, n, seed,
                                 jobs=cfg["run"]["jobs"])["logs"]
        sch.write_logs(out.file("logs_sync.jsonl"), sync_logs)
        artifacts.append("logs_sync.jsonl")
    rows = sweep_from_logs(logs_by_f, bundle.cost, sync_logs)
    with open(out.file("sweep.csv"), "w") as fh:
        fh.write(metrics.rows_to_csv(rows))
    print(metrics.rows_to_csv(rows), end="")
    return out.finish(artifacts + ["sweep.csv"], {"policy": ph, "bridge": bman["hash"] if bman else None},
                      {"rows": rows, "task": task.name, "kind": kind, "episodes": n})


def cmd_selftest(args):
    t0 = time.perf_counter()
    results = selftest_mod.run()
    failed = [(n, f) for n, f, _ in results if f]
    for name, fails, dt in results:
        print(f"{'PASS' if not fails else 'FAIL'} {name} ({dt:.2f}s)")
        for msg in fails:
            print(f"    {msg}")
    print(f"selftest {'failed' if failed else 'passed'} in {time.perf_counter() - t0:.2f}s")
    return EXIT_OTHER if failed else EXIT_OK


def cmd_replay(args):
    """Recompute a report from persisted logs; with --rerun, re-execute and compare hashes."""
    d = args.dir
    man = _manifest(d)
    cfg = cfgmod.load(os.path.join(d, "config.cfg"))
    problems = []
    if man["stage"] == "eval":
        report = _load_json(os.path.join(d, "report.json"))
        logs_by_task = {}
        for path in sorted(glob.glob(os.path.join(d, "logs_*_seed*.jsonl"))):
            stem = os.path.basename(path)[len("logs_"):-len(".jsonl")]
            task, _, seed = stem.rpartition("_seed")
            logs_by_task.setdefault(task, {})[int(seed)] = sch.read_logs(path)
        base = report.get("baseline")
        baseline = None
        if base is not None:
            baseline = {"schedule": base["schedule"], "hash": base["hash"],
                        "tasks": {t: {"mean_sr": v} for t, v in base["mean_sr"].items()}}
        again = build_eval_report(logs_by_task, metrics.CostModel(**report["cost_model"]),
                                  report["schedule"], baseline)
        again["warnings"] = report["warnings"]
        if _canonical(again) != _canonical(report):
            problems.append("report.json differs when recomputed from logs")
    elif man["stage"] == "sweep":
        logs_by_f = {}
        for path in glob.glob(os.path.join(d, "logs_f*.jsonl")):
            logs_by_f[int(os.path.basename(path)[6:-6])] = sch.read_logs(path)
        sync_path = os.path.join(d, "logs_sync.jsonl")
        sync_logs = sch.read_logs(sync_path) if os.path.exists(sync_path) else None
        rows = sweep_from_logs(logs_by_f, _cost(cfg), sync_logs)
        with open(os.path.join(d, "sweep.csv")) as fh:
            if fh.read() != metrics.rows_to_csv(rows):
                problems.append("sweep.csv differs when recomputed from logs")
    for name, h in man["artifacts"].items():
        if _sha(os.path.join(d, name)) != h:
            problems.append(f"{name} content hash changed since it was written")
    if args.rerun:
        with tempfile.TemporaryDirectory() as tmp:
            argv = list(man["argv"])
            for flag, value in (("--out", tmp), ("--config", os.path.join(d, "config.cfg"))):
                if flag in argv:
                    argv[argv.index(flag) + 1] = value
                else:
                    argv += [flag, value]
            code = main(argv, quiet=True)
            if code != EXIT_OK:
                problems.append(f"re-run exited with {code}")
            else:
                fresh = _manifest(tmp)
                for name, h in man["artifacts"].items():
                    if fresh["artifacts"].get(name) != h:
                        problems.append(f"re-run produced a different {name}")
    for p in problems:
        print(f"MISMATCH {p}")
    print(f"replay {'ok' if not problems else 'failed'}: {d} ({man['stage']})")
    return EXIT_OTHER if problems else EXIT_OK


def cmd_run_all(args, cfg_path, overrides):
    """Every stage in order under ``--out``; returns the per-stage timing table."""
    root = args.out
    os.makedirs(root, exist_ok=True)
    common = (["--config", cfg_path] if cfg_path else []) + sum((["--set", o] for o in overrides), [])
    common += ["--jobs", str(args.jobs)] if args.jobs else []
    P = lambda *p: os.path.join(root, *p)  # noqa: E731
    steps = [
        ("teacher", ["train-teacher"]),
        ("sync", ["collect-sync", "--policy", P("teacher")]),
        ("r0", ["train-bridge", "--policy", P("teacher"), "--sync", P("sync")]),
        ("dagger", ["collect-dagger", "--policy", P("teacher"), "--bridge", P("r0")]),
        ("r1", ["refine", "--policy", P("teacher"), "--bridge", P("r0"), "--sync", P("sync"),
                "--dagger", P("dagger")]),
        ("adapted", ["adapt-head", "--policy", P("teacher"), "--bridge", P("r1"), "--sync", P("sync"),
                     "--dagger", P("dagger")]),
        ("eval_sync", ["eval", "--policy", P("teacher"), "--schedule", "sync"]),
        ("eval_cache", ["eval", "--policy", P("teacher"), "--schedule", "cache:3",
                        "--baseline", P("eval_sync")]),
        ("eval_r0", ["eval", "--policy", P("teacher"), "--bridge", P("r0"), "--schedule", "fixed:3",
                     "--baseline", P("eval_sync"), "--oracle"]),
        ("eval_r1", ["eval", "--policy", P("teacher"), "--bridge", P("r1"), "--schedule", "fixed:3",
                     "--baseline", P("eval_sync"), "--oracle"]),
        ("sweep", ["sweep", "--policy", P("teacher"), "--bridge", P("r1")]),
    ]
    timing = {}
    for name, argv in steps:
        t0 = time.perf_counter()
        code = main(argv + common + ["--out", P(name)])
        timing[name] = time.perf_counter() - t0
        if code != EXIT_OK:
            print(f"run-all stopped at {name} (exit {code})", file=sys.stderr)
            _dump(P("timing.json"), timing)
            return code
    timing["total"] = sum(timing.values())
    _dump(P("timing.json"), timing)
    print(f"run-all finished in {timing['total']:.1f}s")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    p = argparse.ArgumentParser(prog="latentbridge", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="run configuration file (defaults apply when omitted)")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
        sp.add_argument("--seed", type=int, help="shorthand for --set run.seed=N")
        sp.add_argument("--jobs", type=int, help="parallel episode workers")
        sp.add_argument("--verbose", action="store_true", help="print per-epoch training lines")
        if out:
            sp.add_argument("--out", default=os.environ.get(OUT_ENV), help="output directory")
        return sp

    common(sub.add_parser("train-teacher", help="behavior-clone the action head and run the gate"))
    s = common(sub.add_parser("collect-sync", help="record sync pairs"))
    s.add_argument("--policy", required=True)
    s = common(sub.add_parser("train-bridge", help="train an R0 bridge on sync pairs"))
    s.add_argument("--policy", required=True)
    s.add_argument("--sync", required=True)
    s.add_argument("--variant", choices=("feature", "kv"))
    s = common(sub.add_parser("collect-dagger", help="roll out the bridged policy with an oracle"))
    s.add_argument("--policy", required=True)
    s.add_argument("--bridge", required=True)
    s = common(sub.add_parser("refine", help="R1: resume from R0 on sync + DAgger pairs"))
    s.add_argument("--policy", required=True)
    s.add_argument("--bridge")
    s.add_argument("--sync", required=True)
    s.add_argument("--dagger")
    s = common(sub.add_parser("adapt-head", help="low-rank head adaptation on bridge features"))
    for k in ("--policy", "--bridge", "--sync"):
        s.add_argument(k, required=True)
    s.add_argument("--dagger")
    for name, helptext in (("eval", "closed-loop evaluation"), ("sweep", "call-period sweep")):
        s = common(sub.add_parser(name, help=helptext))
        s.add_argument("--policy", required=True)
        s.add_argument("--bridge")
        s.add_argument("--task", help="single task preset (default: env.eval_tasks)")
        s.add_argument("--episodes", type=int, help="episodes per seed")
    ev = sub.choices["eval"]
    ev.add_argument("--schedule", help="sync | fixed:F | cache:F | phase_aware")
    ev.add_argument("--oracle", action="store_true", help="score bridge steps against the backbone")
    ev.add_argument("--baseline", help="eval directory of a sync run, for retention")
    ev.add_argument("--denoise-steps", type=int, help="flow-head integration steps")
    sub.choices["sweep"].add_argument("--f-list", help="comma-separated call periods")
    sub.add_parser("selftest", help="golden-value checks, no training")
    r = sub.add_parser("replay", help="recompute a report from its logs and config")
    r.add_argument("dir")
    r.add_argument("--rerun", action="store_true", help="also re-execute and compare artifact hashes")
    common(sub.add_parser("run-all", help="every stage in order"))
    return p


COMMANDS = {"train-teacher": ("teacher", cmd_train_teacher), "collect-sync": ("sync", cmd_collect_sync),
            "train-bridge": ("R0", cmd_train_bridge), "collect-dagger": ("dagger", cmd_collect_dagger),
            "refine": ("R1", cmd_refine), "adapt-head": ("adapted", cmd_adapt_head),
            "eval": ("eval", cmd_eval), "sweep": ("sweep", cmd_sweep)}


def _stage_argv(argv):
    """Command line as recorded in manifests (absolute input paths)."""
    out, it = [], iter(argv)
    for a in it:
        out.append(a)
        if a in ("--policy", "--bridge", "--sync", "--dagger", "--baseline", "--config", "--out"):
            out.append(os.path.abspath(next(it, "")))
    return out


def main(argv=None, quiet=False):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    args.log = print if getattr(args, "verbose", False) and not quiet else None
    try:
        if args.command == "selftest":
            return cmd_selftest(args)
        if args.command == "replay":
            return cmd_replay(args)
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"run.seed={args.seed}")
        if args.jobs is not None:
            overrides.append(f"run.jobs={args.jobs}")
        cfg = cfgmod.load(args.config, overrides)
        if args.command == "run-all":
            if args.out is None:
                raise UsageError("--out is required (or set LATENTBRIDGE_OUT)")
            return cmd_run_all(args, args.config, list(args.set) +
                               ([f"run.seed={args.seed}"] if args.seed is not None else []))
        stage, fn = COMMANDS[args.command]
        out = Output(args.out, cfg, stage, _stage_argv(argv))
        fn(args, cfg, out)
        return EXIT_OK
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (pl.LineageError, sch.ManifestError, pl.DatasetError, checkpoint.CheckpointError) as exc:
        print(f"lineage error: {exc}", file=sys.stderr)
        return EXIT_LINEAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GateError as exc:
        print(f"gate failure: {exc}", file=sys.stderr)
        return EXIT_GATE
    except (OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
