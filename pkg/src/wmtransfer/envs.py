"""Deterministic 2-D reach / push / insert tasks with sparse success.

States are flat float64 vectors:

* reach:  ``[px, py, vx, vy, gx, gy]``
* push:   ``[px, py, vx, vy, cx, cy, gx, gy]``
* insert: ``[px, py, vx, vy, cx, cy]`` (slot fixed at ``(0, -0.9)``)

The learner only ever sees observations, which carry the pose bias of a
:class:`DomainGap` on the object coordinates (the goal for reach, the cube
otherwise). The action gain of the gap scales the transmitted action.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TASKS = ("reach", "push", "insert")
SLOT = np.array([0.0, -0.9])
WALL_Y = -0.7
SLOT_HALF_WIDTH = 0.05
APPROACH_OFFSET = 0.12
PUSH_GAIN = 0.7
INSERT_OVERSHOOT = np.array([0.0, -0.06])
INSERT_STAGING = np.array([0.0, -0.55])

_STATE_DIM = {"reach": 6, "push": 8, "insert": 6}
_SUCCESS_RADIUS = {"reach": 0.05, "push": 0.05, "insert": 0.03}


@dataclass(frozen=True)
class TaskSpec:
    task: str
    dt: float = 0.1
    contact_radius: float = 0.1
    success_radius: float = 0.05
    max_steps: int = 100

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.success_radius <= 0 or self.max_steps <= 0:
            raise ValueError("success radius and max steps must be positive")

    @classmethod
    def make(cls, task: str, **kw) -> "TaskSpec":
        kw.setdefault("success_radius", _SUCCESS_RADIUS.get(task, 0.05))
        return cls(task, **kw)

    @property
    def state_dim(self) -> int:
        return _STATE_DIM[self.task]

    @property
    def action_dim(self) -> int:
        return 2

    @property
    def object_slice(self) -> slice:
        return slice(4, 6)


@dataclass(frozen=True)
class DomainGap:
    pose_bias: tuple[float, float] = (0.0, 0.0)
    action_gain: float = 1.0

    def __post_init__(self):
        if not self.action_gain > 0:
            raise ValueError("action_gain must be positive")

    @property
    def is_identity(self) -> bool:
        return self.pose_bias == (0.0, 0.0) and self.action_gain == 1.0

    @classmethod
    def parse(cls, text: str) -> "DomainGap":
        """``none`` | ``pose`` | ``kin`` | ``bx,by,gain``."""
        text = text.strip().lower()
        if text in ("none", "identity", ""):
            return cls()
        if text == "pose":
            return cls((0.03, 0.03), 1.0)
        if text in ("kin", "kinematics"):
            return cls((0.03, 0.03), 0.85)
        parts = [float(p) for p in text.split(",")]
        if len(parts) != 3:
            raise ValueError(f"cannot parse domain gap {text!r}")
        return cls((parts[0], parts[1]), parts[2])

    def label(self) -> str:
        return f"{self.pose_bias[0]:g},{self.pose_bias[1]:g},{self.action_gain:g}"


IDENTITY_GAP = DomainGap()


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    success: bool
    episode_end: bool


@dataclass
class Episode:
    """Observed states ``[T+1, s]``, executed actions ``[T, a]`` and per-step flags."""

    task: str
    states: np.ndarray
    actions: np.ndarray
    success: np.ndarray
    episode_end: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.success = np.asarray(self.success, dtype=bool)
        if self.episode_end is None:
            self.episode_end = np.zeros(len(self.actions), dtype=bool)
            if len(self.actions):
                self.episode_end[-1] = True
        self.episode_end = np.asarray(self.episode_end, dtype=bool)

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def succeeded(self) -> bool:
        return bool(len(self.success) and self.success[-1])

    def transitions(self) -> list[Transition]:
        return [Transition(self.states[t], self.actions[t], self.states[t + 1],
                           bool(self.success[t]), bool(self.episode_end[t]))
                for t in range(len(self))]


def _clamp(x, lo=-1.0, hi=1.0):
    return np.clip(x, lo, hi)


def apply_domain_gap(true_obs: np.ndarray, gap: DomainGap, spec: TaskSpec | None = None) -> np.ndarray:
    """Shift the object coordinates by the pose bias; proprioception is untouched."""
    obs = np.array(true_obs, dtype=np.float64, copy=True)
    if gap.pose_bias != (0.0, 0.0):
        obs[..., 4:6] += np.asarray(gap.pose_bias)
    return obs


def _seed_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def env_reset_true(spec: TaskSpec, seed) -> np.ndarray:
    rng = _seed_rng(seed)
    p = rng.uniform(-0.8, 0.8, size=2)
    v = np.zeros(2)
    if spec.task == "reach":
        while True:
            g = rng.uniform(-0.8, 0.8, size=2)
            if np.linalg.norm(g - p) >= 0.3:
                break
        return np.concatenate([p, v, g])
    if spec.task == "push":
        c = rng.uniform(-0.5, 0.5, size=2)
        while True:
            g = rng.uniform(-0.8, 0.8, size=2)
            if np.linalg.norm(g - c) >= 0.3:
                break
        while np.linalg.norm(p - c) < 0.2:
            p = rng.uniform(-0.8, 0.8, size=2)
        return np.concatenate([p, v, c, g])
    c = np.array([rng.uniform(-0.8, 0.8), rng.uniform(0.0, 0.8)])
    while np.linalg.norm(p - c) < 0.2:
        p = rng.uniform(-0.8, 0.8, size=2)
    return np.concatenate([p, v, c])


def env_reset(spec: TaskSpec, gap: DomainGap, seed) -> np.ndarray:
    """Observed initial state."""
    return apply_domain_gap(env_reset_true(spec, seed), gap, spec)


def in_wall(cube: np.ndarray) -> bool:
    return bool(cube[1] < WALL_Y and abs(cube[0]) > SLOT_HALF_WIDTH)


def goal_of(state: np.ndarray, spec: TaskSpec) -> np.ndarray:
    if spec.task == "insert":
        return SLOT
    return state[-2:]


def is_success(state: np.ndarray, spec: TaskSpec) -> bool:
    if spec.task == "reach":
        return bool(np.linalg.norm(state[0:2] - state[4:6]) < spec.success_radius)
    cube = state[4:6]
    if spec.task == "insert" and in_wall(cube):
        return False
    return bool(np.linalg.norm(cube - goal_of(state, spec)) < spec.success_radius)


def env_step_true(state: np.ndarray, action: np.ndarray, spec: TaskSpec,
                  gap: DomainGap = IDENTITY_GAP) -> tuple[np.ndarray, bool]:
    """Advance the true state; returns ``(next_true_state, success)``."""
    a = _clamp(np.asarray(action, dtype=np.float64))
    p, v = state[0:2], state[2:4]
    v2 = _clamp(v + gap.action_gain * a * spec.dt)
    p2 = _clamp(p + v2 * spec.dt)
    nxt = state.copy()
    nxt[0:2] = p2
    nxt[2:4] = v2
    if spec.task != "reach":
        c = state[4:6]
        locked = spec.task == "insert" and in_wall(c)
        if not locked and np.linalg.norm(p2 - c) < spec.contact_radius:
            nxt[4:6] = _clamp(c + (p2 - p))
    return nxt, is_success(nxt, spec)


def env_step(state: np.ndarray, action: np.ndarray, spec: TaskSpec,
             gap: DomainGap = IDENTITY_GAP) -> tuple[np.ndarray, Transition, np.ndarray]:
    """One step from a true state.

    Returns the next observation, the observed :class:`Transition` and the
    next true state (needed to keep stepping).
    """
    a = _clamp(np.asarray(action, dtype=np.float64))
    nxt, success = env_step_true(state, a, spec, gap)
    obs, next_obs = apply_domain_gap(state, gap), apply_domain_gap(nxt, gap)
    return next_obs, Transition(obs, a, next_obs, success, success), nxt


class Env:
    """Stateful wrapper: tracks the true state and the step budget."""

    def __init__(self, spec: TaskSpec, gap: DomainGap = IDENTITY_GAP):
        self.spec = spec
        self.gap = gap
        self.state: np.ndarray | None = None
        self.t = 0

    def reset(self, seed, init_state: np.ndarray | None = None) -> np.ndarray:
        if init_state is not None:
            self.state = np.array(init_state, dtype=np.float64)
        else:
            self.state = env_reset_true(self.spec, seed)
        self.t = 0
        return apply_domain_gap(self.state, self.gap)

    def step(self, action) -> Transition:
        if self.state is None:
            raise RuntimeError("reset() before step()")
        _, tr, self.state = env_step(self.state, action, self.spec, self.gap)
        self.t += 1
        if self.t >= self.spec.max_steps:
            tr.episode_end = True
        return tr


# ----------------------------------------------------------- scripted expert


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x)
    return x / n if n > 1e-9 else np.zeros_like(x)


def _pd(w, p, v):
    return _clamp(4.0 * (w - p) - 2.0 * v)


def _rotate(x: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([c * x[0] - s * x[1], s * x[0] + c * x[1]])


def cube_target(state: np.ndarray, spec: TaskSpec) -> np.ndarray:
    """Where the expert currently wants the cube: the goal, or for insert a
    staging point above the slot until the cube is lined up with it."""
    if spec.task == "push":
        return state[6:8]
    c = state[4:6]
    if abs(c[0]) <= 0.03 and c[1] <= INSERT_STAGING[1] + 0.05:
        return SLOT + INSERT_OVERSHOOT
    return np.array([0.0, max(c[1] - 0.3, INSERT_STAGING[1])])


def expert_waypoint(state: np.ndarray, spec: TaskSpec) -> np.ndarray:
    p = state[0:2]
    if spec.task == "reach":
        return state[4:6]
    c = state[4:6]
    target = cube_target(state, spec)
    u = _unit(c - target)
    if not u.any():
        u = np.array([0.0, 1.0])
    rel = p - c
    dist = np.linalg.norm(rel)
    cos = float(np.dot(rel, u)) / max(dist, 1e-9)
    behind = c + APPROACH_OFFSET * u
    if (dist < spec.contact_radius + 0.015 and cos > 0.7) or np.linalg.norm(p - behind) < 0.05:
        # pushing from behind: steer so the cube lands on its target
        return p + PUSH_GAIN * (target - c)
    if cos > 0.7:
        return behind
    if dist < 0.15:
        return c + 0.25 * _unit(rel)
    # orbit toward the approach side at a safe radius
    cross = u[0] * rel[1] - u[1] * rel[0]
    step = -np.pi / 2 if cross > 0 else np.pi / 2
    return c + 0.22 * _rotate(_unit(rel), step)


def scripted_expert(true_state: np.ndarray, spec: TaskSpec, noise_sigma: float = 0.0,
                    seed=None) -> np.ndarray:
    """PD controller toward the current waypoint plus Gaussian action noise."""
    a = _pd(expert_waypoint(true_state, spec), true_state[0:2], true_state[2:4])
    if noise_sigma > 0:
        a = a + _seed_rng(seed).normal(0.0, noise_sigma, size=2)
    return _clamp(a)


class ExpertFailure(RuntimeError):
    pass


def rollout(env: Env, policy, seed, max_steps: int | None = None) -> Episode:
    """Run one episode; ``policy(obs, true_state, t) -> action``."""
    obs = env.reset(seed)
    states, actions, succ, ends = [obs], [], [], []
    limit = max_steps or env.spec.max_steps
    for t in range(limit):
        a = policy(obs, env.state, t)
        tr = env.step(a)
        actions.append(tr.action)
        states.append(tr.next_state)
        succ.append(tr.success)
        ends.append(tr.episode_end)
        obs = tr.next_state
        if tr.episode_end:
            break
    ends[-1] = True
    return Episode(env.spec.task, np.array(states), np.array(actions), np.array(succ), np.array(ends))


def generate_demos(spec: TaskSpec, gap: DomainGap, n_episodes: int, noise_sigma: float = 0.05,
                   seed: int = 0) -> list[Episode]:
    """Exactly ``n_episodes`` successful expert episodes; failures are resampled."""
    if n_episodes <= 0:
        raise ValueError("n_episodes must be positive")
    env = Env(spec, gap)
    ss = np.random.SeedSequence(seed)
    out: list[Episode] = []
    attempts = 0
    while len(out) < n_episodes:
        ep_ss, noise_ss = ss.spawn(2)
        noise_rng = np.random.default_rng(noise_ss)
        ep = rollout(env, lambda o, s, t: scripted_expert(s, spec, noise_sigma, noise_rng),
                     np.random.default_rng(ep_ss))
        attempts += 1
        if ep.succeeded:
            out.append(ep)
        if attempts == 100 and len(out) < 5:
            raise ExpertFailure(f"expert succeeded in only {len(out)}/100 probe episodes on {spec.task}")
    return out
