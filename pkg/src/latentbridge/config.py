"""Sectioned ``key = value`` run configuration with includes.

Parsing is delegated to :mod:`configparser`; this module adds ``include``
lines (resolved relative to the including file, later values win), a typed
schema where every key has a default, and rejection of unknown keys.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass

DEFAULT_PATH = os.path.join(os.path.dirname(__file__), "configs", "default.cfg")


class ConfigError(ValueError):
    pass


def _ints(text):
    return tuple(int(x) for x in text.split(",") if x.strip())


def _words(text):
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _bool(text):
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    return None if text.strip().lower() in ("", "none") else float(text)


# section -> key -> (parser, default, doc)
SCHEMA = {
    "run": {
        "seed": (int, "0", "root seed; every other seed is derived from it by purpose tag"),
        "jobs": (int, "1", "parallel episode workers for evaluation"),
    },
    "env": {
        "train_tasks": (_words, "base,switch", "task presets cycled during BC and collection"),
        "eval_tasks": (_words, "base,switch", "task presets used by eval and the acceptance suite"),
    },
    "teacher": {
        "readout": (str, "feature", "feature | kv: what the action head reads"),
        "head": (str, "regression", "regression | flow"),
        "rope": (_bool, "true", "rotary position embedding in the backbone"),
        "denoise_steps": (int, "1", "flow-head integration steps at deployment"),
        "bc_episodes": (int, "800", "expert episodes for behavior cloning"),
        "bc_epochs": (int, "30", "BC epochs"),
        "bc_lr": (float, "3e-3", "BC peak learning rate"),
        "bc_noise": (float, "0.3", "exploration noise on executed expert actions"),
        "gate_episodes": (int, "200", "held-out sync episodes for the BC gate"),
        "gate_threshold": (float, "0.9", "minimum sync success rate"),
    },
    "bridge": {
        "variant": (str, "feature", "feature | kv; must match teacher.readout"),
        "d_b": (int, "32", "trunk width"),
        "blocks": (int, "2", "AdaLN-Zero blocks"),
        "alpha": (float, "1.0", "weight of the cosine term in the loss"),
    },
    "collect": {
        "sync_episodes": (int, "100", "sync episodes for R0 data"),
        "dagger_episodes": (int, "100", "DAgger episodes for R1 data"),
        "dagger_f": (int, "3", "call period during DAgger collection"),
    },
    "train_r0": {
        "epochs": (int, "50", "R0 epochs, feature variant"),
        "epochs_kv": (int, "25", "R0 epochs, KV variant"),
        "lr0": (float, "3e-4", "peak learning rate"),
        "weight_decay": (float, "1e-4", "AdamW decoupled weight decay"),
        "clip_norm": (float, "1.0", "global gradient-norm clip"),
        "batch_size": (int, "64", "minibatch size"),
    },
    "train_r1": {
        "epochs": (int, "16", "R1 epochs"),
        "t_max": (int, "16", "cosine schedule length"),
        "lr0": (_opt_float, "none", "peak learning rate; none picks 3e-4, or 3e-5 with long_horizon"),
        "long_horizon": (_bool, "false", "tasks with long horizons use the 10x lower rate"),
    },
    "adapt": {
        "rank": (int, "4", "adapter rank"),
        "noise_std": (float, "0.05", "feature noise as a fraction of the feature std"),
        "epochs": (int, "10", "adapter epochs"),
        "lr0": (float, "1e-3", "adapter learning rate"),
    },
    "schedule": {
        "policy": (str, "fixed:3", "sync | fixed:F | cache:F | phase_aware"),
        "a_max": (float, "1.0", "action bound used to scale the phase thresholds"),
        "tau_nav": (_opt_float, "none", "phase threshold (default 0.5 a_max)"),
        "tau_manip": (_opt_float, "none", "phase threshold (default 0.15 a_max)"),
    },
    "eval": {
        "episodes": (int, "20", "episodes per seed"),
        "seeds": (_ints, "0,1,2", "evaluation seeds"),
        "oracle": (_bool, "false", "score fidelity against the backbone on bridge steps"),
    },
    "cost": {
        "profile": (str, "groot", "groot | pi05 | custom"),
        "c_backbone": (float, "63", "custom profile: backbone cost"),
        "c_head": (float, "27", "custom profile: head cost"),
        "c_bridge": (float, "2", "custom profile: bridge cost"),
        "c_vision_bridge": (float, "0", "custom profile: cheap vision encoder cost"),
    },
    "sweep": {
        "f_list": (_ints, "1,2,3,4,6,8", "call periods to sweep"),
        "kind": (str, "fixed", "fixed | cache"),
    },
}


@dataclass
class RunConfig:
    values: dict      # section -> key -> parsed value
    raw: dict         # section -> key -> text, after includes
    sources: list     # files read, in order

    def __getitem__(self, section):
        return self.values[section]

    def echo(self):
        """Canonical text of the effective configuration (includes expanded)."""
        lines = [f"# effective configuration; sources: {', '.join(self.sources) or '(defaults)'}"]
        for section in SCHEMA:
            lines.append(f"[{section}]")
            for key in SCHEMA[section]:
                lines.append(f"{key} = {self.raw[section][key]}")
            lines.append("")
        return "\n".join(lines)


def _read(path, seen, raw, sources):
    path = os.path.abspath(path)
    if path in seen:
        raise ConfigError(f"include cycle through {path}")
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    seen = seen | {path}
    with open(path) as fh:
        text = fh.read()
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__",
                                       inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        # includes may appear before any section header
        parser.read_string("[__top__]\n" + text, source=path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for section in parser.sections():
        for key, value in parser.items(section):
            if key == "include":
                for inc in value.split(","):
                    _read(os.path.join(os.path.dirname(path), inc.strip()), seen, raw, sources)
                continue
            if section == "__top__":
                raise ConfigError(f"{path}: key {key!r} outside any section")
            if section not in SCHEMA:
                raise ConfigError(f"{path}: unknown section [{section}]")
            if key not in SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            raw[section][key] = value.strip()
    sources.append(path)


def load(path=None, overrides=()):
    """Defaults, then ``path`` (with includes), then ``section.key=value`` overrides."""
    raw = {s: {k: spec[1] for k, spec in keys.items()} for s, keys in SCHEMA.items()}
    sources = []
    if path is not None:
        _read(path, frozenset(), raw, sources)
    for item in overrides:
        name, sep, value = item.partition("=")
        section, _, key = name.strip().partition(".")
        if not sep or section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"bad override {item!r}; expected section.key=value")
        raw[section][key] = value.strip()
    values = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (parse, _, _) in keys.items():
            try:
                values[section][key] = parse(raw[section][key])
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key} = {raw[section][key]!r}: {exc}") from exc
    cfg = RunConfig(values, raw, sources)
    _validate(cfg)
    return cfg


def _validate(cfg):
    t, b = cfg["teacher"], cfg["bridge"]
    if t["readout"] not in ("feature", "kv"):
        raise ConfigError(f"teacher.readout must be feature or kv, got {t['readout']!r}")
    if t["head"] not in ("regression", "flow"):
        raise ConfigError(f"teacher.head must be regression or flow, got {t['head']!r}")
    if b["variant"] not in ("feature", "kv"):
        raise ConfigError(f"bridge.variant must be feature or kv, got {b['variant']!r}")
    if cfg["collect"]["dagger_f"] < 2:
        raise ConfigError("collect.dagger_f must be >= 2")
    if not cfg["sweep"]["f_list"]:
        raise ConfigError("sweep.f_list is empty")


def documented_defaults():
    """Commented example file text listing every key, its default and meaning."""
    out = ["# Latent-bridge run configuration. Every key is optional; shown values are defaults.",
           "# Other files can be pulled in with `include = relative/path.cfg`.", ""]
    for section, keys in SCHEMA.items():
        out.append(f"[{section}]")
        for key, (_, default, doc) in keys.items():
            out.append(f"# {doc}")
            out.append(f"{key} = {default}")
        out.append("")
    return "\n".join(out)
