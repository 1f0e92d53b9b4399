"""Point-mass reaching among distractors, with a scripted PD expert.

Each scene entity becomes one observation token laid out as

    [type one-hot (4) | absolute position (2) | position relative to agent (2) | tag (d_obs - 8)]

with types agent / target / distractor / padding. Values are rounded to the
fp32 grid. The instruction tokens carry
the target's tag plus a goal-version code, so they are constant within an
episode until a goal switch. All episode randomness (placement, switch step,
relocated target) is drawn at reset from the episode seed.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .tensorkit import rng as rngmod

TYPE_AGENT, TYPE_TARGET, TYPE_DISTRACTOR, TYPE_PAD = range(4)
_N_TYPES = 4


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    distractor_count: int = 3
    goal_switch_prob: float = 0.0
    max_steps: int = 60
    success_radius: float = 0.05
    dt: float = 0.1
    damping: float = 0.9
    a_max: float = 1.0
    n_img: int = 8
    n_txt: int = 2
    d_obs: int = 16
    action_dim: int = 2
    kp: float = 20.0
    kd: float = 1.0
    spawn_range: float = 0.9
    min_separation: float = 0.2
    switch_window: tuple = (4, 14)
    layout: str = "uniform"
    tag_seed: int = 0
    name: str = "base"

    def __post_init__(self):
        if not 0.0 <= self.goal_switch_prob <= 1.0:
            raise ValueError("goal_switch_prob must lie in [0, 1]")
        if not self.success_radius > 0:
            raise ValueError("success_radius must be positive")
        if self.max_steps < 1 or self.distractor_count < 0:
            raise ValueError("max_steps >= 1 and distractor_count >= 0 required")
        if self.d_obs < _N_TYPES + 4 + 1:
            raise ValueError(f"d_obs must be at least {_N_TYPES + 5}")
        if self.action_dim < 2:
            raise ValueError("action_dim must be >= 2 (first two axes drive the agent)")
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}; choose from {sorted(LAYOUTS)}")
        lo, hi = self.switch_window
        if not 0 < lo < hi:
            raise ValueError("switch_window must satisfy 0 < lo < hi")


# Placement boxes per layout: (agent box, object box), each (xlo, xhi, ylo, yhi)
# in units of spawn_range.
LAYOUTS = {
    "uniform": ((-1, 1, -1, 1), (-1, 1, -1, 1)),
    "split": ((-1, -0.2, -1, 1), (0.2, 1, -1, 1)),
    "ring": ((-0.3, 0.3, -0.3, 0.3), (-1, 1, -1, 1)),
}


def preset(name, **overrides):
    """Named task variants (the toy analogue of distinct task suites)."""
    table = {
        "base": {},
        "switch": {"goal_switch_prob": 0.3},
        "switch_always": {"goal_switch_prob": 1.0},
        "dense": {"distractor_count": 5},
        "split": {"layout": "split"},
        "ring": {"layout": "ring"},
    }
    if name not in table:
        raise KeyError(f"unknown task preset {name!r}; choose from {sorted(table)}")
    return TaskSpec(**{**table[name], "name": name, **overrides})


@dataclass
class EnvState:
    agent_pos: np.ndarray
    agent_vel: np.ndarray
    target_pos: np.ndarray
    distractor_pos: np.ndarray
    step_index: int = 0
    goal_switched: bool = False
    switch_step: int = -1
    switch_target: np.ndarray = field(default_factory=lambda: np.zeros(2))
    done: bool = False
    success: bool = False

    def copy(self):
        return replace(self, agent_pos=self.agent_pos.copy(), agent_vel=self.agent_vel.copy(),
                       target_pos=self.target_pos.copy(), distractor_pos=self.distractor_pos.copy(),
                       switch_target=self.switch_target.copy())


@dataclass(frozen=True)
class Observation:
    scene_tokens: np.ndarray
    instruction_tokens: np.ndarray
    q: np.ndarray


def _tags(task):
    """Fixed per-slot tag vectors and instruction codes (shared by all episodes)."""
    g = rngmod.stream(task.tag_seed, "env-tags")
    width = task.d_obs - _N_TYPES - 4
    ent = g.standard_normal((task.n_img, width)) * 0.5
    ent[task.distractor_count + 2:] = 0.0  # padding slots carry no tag
    instr = g.standard_normal((task.n_txt, task.d_obs)) * 0.5
    versions = g.standard_normal((2, task.d_obs)) * 0.5
    return ent, instr, versions


_TAG_CACHE = {}


def tags(task):
    key = (task.tag_seed, task.n_img, task.n_txt, task.d_obs, task.distractor_count)
    if key not in _TAG_CACHE:
        _TAG_CACHE[key] = _tags(task)
    return _TAG_CACHE[key]


def _check_feasible(task):
    if task.n_img < task.distractor_count + 2:
        raise EnvError(f"n_img={task.n_img} cannot hold agent, target and "
                       f"{task.distractor_count} distractors")
    # Objects must be mutually separated inside the object box; require that the
    # separation disks cover at most half of it.
    _, box = LAYOUTS[task.layout]
    area = (box[1] - box[0]) * (box[3] - box[2]) * task.spawn_range ** 2
    need = (task.distractor_count + 2) * math.pi * (task.min_separation / 2) ** 2
    if need > 0.5 * area:
        raise EnvError(f"{task.distractor_count} distractors do not fit the arena at "
                       f"min_separation={task.min_separation}")


def _uniform(g, box, s):
    return np.array([g.uniform(box[0] * s, box[1] * s), g.uniform(box[2] * s, box[3] * s)])


def reset(task, seed):
    _check_feasible(task)
    g = rngmod.stream(seed, "env-reset")
    abox, obox = LAYOUTS[task.layout]
    s = task.spawn_range
    agent = _uniform(g, abox, s)
    for _ in range(10_000):
        target = _uniform(g, obox, s)
        if np.linalg.norm(target - agent) >= 2 * task.success_radius:
            break
    else:
        raise EnvError("could not place target")
    distractors = []
    for _ in range(10_000):
        if len(distractors) == task.distractor_count:
            break
        c = _uniform(g, obox, s)
        others = [agent, target] + distractors
        if all(np.linalg.norm(c - o) >= task.min_separation for o in others):
            distractors.append(c)
    if len(distractors) != task.distractor_count:
        raise EnvError("could not place distractors; arena too crowded")
    switch_step, switch_target = -1, np.zeros(2)
    u = g.uniform()
    lo, hi = task.switch_window
    step_draw = int(g.integers(lo, hi))
    for _ in range(10_000):
        cand = _uniform(g, obox, s)
        if (np.linalg.norm(cand - target) >= 0.5
                and all(np.linalg.norm(cand - d) >= task.min_separation for d in distractors)):
            break
    if u < task.goal_switch_prob:
        switch_step, switch_target = min(step_draw, task.max_steps - 1), cand
    state = EnvState(agent_pos=agent, agent_vel=np.zeros(2), target_pos=target,
                     distractor_pos=np.array(distractors).reshape(-1, 2),
                     switch_step=switch_step, switch_target=switch_target)
    return state, observe(task, state)


def observe(task, state):
    ent_tags, instr, versions = tags(task)
    toks = np.zeros((task.n_img, task.d_obs))
    positions = [state.agent_pos, state.target_pos] + list(state.distractor_pos)
    kinds = [TYPE_AGENT, TYPE_TARGET] + [TYPE_DISTRACTOR] * len(state.distractor_pos)
    for i, (p, k) in enumerate(zip(positions, kinds)):
        toks[i, k] = 1.0
        toks[i, _N_TYPES:_N_TYPES + 2] = p
        toks[i, _N_TYPES + 2:_N_TYPES + 4] = p - state.agent_pos
        toks[i, _N_TYPES + 4:] = ent_tags[i]
    toks[len(positions):, TYPE_PAD] = 1.0
    text = instr.copy()
    text[0, _N_TYPES + 4:] += ent_tags[1]
    text[-1] += versions[int(state.goal_switched)]
    q = np.concatenate([state.agent_pos, state.agent_vel])
    # observations live on the fp32 grid so fp32 logs and datasets reproduce them exactly
    return Observation(_f32(toks), _f32(text), _f32(q))


def _f32(a):
    out = a.astype(np.float32).astype(np.float64)
    out.setflags(write=False)
    return out


def clamp_action(task, action):
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.shape[0] != task.action_dim:
        raise EnvError(f"action has {a.shape[0]} components, expected {task.action_dim}")
    return np.clip(a, -task.a_max, task.a_max)


def step(task, state, action):
    """Advance one control step; returns ``(state', obs, done, success)``."""
    if state.done:
        raise EnvError("step() called on a terminal state")
    a = clamp_action(task, action)[:2]
    new = state.copy()
    new.agent_vel = task.damping * state.agent_vel + task.dt * a
    new.agent_pos = np.clip(state.agent_pos + task.dt * new.agent_vel, -1.0, 1.0)
    new.step_index = state.step_index + 1
    if new.switch_step >= 0 and not new.goal_switched and new.step_index >= new.switch_step:
        new.target_pos = new.switch_target.copy()
        new.goal_switched = True
    new.success = bool(np.linalg.norm(new.agent_pos - new.target_pos) < task.success_radius)
    new.done = new.success or new.step_index >= task.max_steps
    return new, observe(task, new), new.done, new.success


def expert_action(task, state):
    a = task.kp * (state.target_pos - state.agent_pos) - task.kd * state.agent_vel
    out = np.zeros(task.action_dim)
    out[:2] = np.clip(a, -task.a_max, task.a_max)
    return out


def travel_distance(task, n, accel):
    """Closed-form distance covered after ``n`` steps of constant ``accel`` from rest."""
    d = task.damping
    return task.dt ** 2 * accel / (1 - d) * (n - d * (1 - d ** n) / (1 - d))


def rollout_expert(task, seed, noise_std=0.0, noise_seed=None):
    """Run the expert; optional executed-action noise broadens state coverage."""
    state, obs = reset(task, seed)
    g = rngmod.stream(seed if noise_seed is None else noise_seed, "expert-noise")
    traj = []
    while not state.done:
        label = expert_action(task, state)
        act = label + (g.normal(0.0, noise_std, task.action_dim) if noise_std > 0 else 0.0)
        traj.append((state, obs, label))
        state, obs, _, _ = step(task, state, act)
    return traj, state


def task_to_dict(task):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(task).items()}


def write_episode_log(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_episode_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
