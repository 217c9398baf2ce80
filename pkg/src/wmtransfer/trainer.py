"""Online imitation pretraining, offline supervised finetuning and evaluation."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .buffers import BEHAVIORAL, EXPERT, ReplayBuffer, SegmentBatch, WarmingUp, sample_segments
from .envs import DomainGap, Env, Episode, TaskSpec
from .nn import Adam
from .planner import PlannerConfig, plan_action
from .policy import mean_action, mle_loss, policy_sample, segment_weights
from .world_model import (LossBreakdown, ModelConfig, NonFiniteLoss, WorldModel,
                          compute_model_losses, compute_policy_loss, ema_update, save_checkpoint)

log = logging.getLogger(__name__)


class TrainingHalted(RuntimeError):
    """A loss or gradient went non-finite; ``model`` holds the last good parameters."""

    def __init__(self, msg, model=None):
        super().__init__(msg)
        self.model = model


@dataclass
class TrainConfig:
    seed: int = 0
    task: str = "reach"
    # pretraining
    pretrain_env_steps: int = 20_000
    seed_steps: int = 1000
    updates_per_env_step: int = 1
    batch_size: int = 64
    horizon: int = 3
    expert_fraction: float = 0.5
    behavioral_capacity: int = 100_000
    lr_model: float = 3e-4
    lr_reward: float = 3e-4
    lr_policy: float = 3e-4
    grad_clip: float = 20.0
    # world model
    hidden: int = 64
    latent_dim: int = 16
    simnorm_group: int = 8
    embed_dim: int = 32
    num_targets: int = 5
    zeta: float = 0.6
    gamma: float = 0.99
    lam: float = 0.5
    beta: float = 1e-4
    tau: float = 0.01
    v_min: float = -10.0
    v_max: float = 10.0
    num_bins: int = 101
    value_transform: str = "identity"
    # acting
    act_mode: str = "planner"
    plan_samples: int = 64
    plan_pi_trajs: int = 8
    plan_horizon: int = 3
    plan_iterations: int = 4
    plan_elites: int = 8
    plan_temperature: float = 0.5
    # finetuning
    finetune_lr: float = 1e-5
    finetune_weight_decay: float = 1e-4
    finetune_batch: int = 256
    finetune_horizon: int = 3
    finetune_steps: int = 5000
    # behaviour cloning baseline
    bc_lr: float = 3e-4
    bc_steps: int = 5000
    bc_batch: int = 256
    # evaluation / logging
    eval_episodes: int = 50
    eval_mode: str = "planner"
    log_interval: int = 1000
    checkpoint_interval: int = 0
    # gap used by the gap-domain stages (finetune data, transfer eval)
    gap_bias_x: float = 0.03
    gap_bias_y: float = 0.03
    gap_gain: float = 1.0

    def __post_init__(self):
        for name in ("lr_model", "lr_reward", "lr_policy", "finetune_lr", "bc_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.act_mode not in ("planner", "policy"):
            raise ValueError("act_mode must be 'planner' or 'policy'")
        if self.eval_mode not in ("planner", "policy"):
            raise ValueError("eval_mode must be 'planner' or 'policy'")

    @property
    def spec(self) -> TaskSpec:
        return TaskSpec.make(self.task)

    @property
    def gap(self) -> DomainGap:
        return DomainGap((self.gap_bias_x, self.gap_bias_y), self.gap_gain)

    def model_config(self) -> ModelConfig:
        spec = self.spec
        return ModelConfig(
            s_dim=spec.state_dim, a_dim=spec.action_dim, hidden=self.hidden,
            latent_dim=self.latent_dim, simnorm_group=self.simnorm_group, embed_dim=self.embed_dim,
            num_targets=self.num_targets, zeta=self.zeta, gamma=self.gamma, lam=self.lam,
            beta=self.beta, tau=self.tau, v_min=self.v_min, v_max=self.v_max, num_bins=self.num_bins,
            value_transform=self.value_transform)

    def planner_config(self) -> PlannerConfig:
        return PlannerConfig(num_samples=self.plan_samples, num_pi_trajs=self.plan_pi_trajs,
                             horizon=self.plan_horizon, iterations=self.plan_iterations,
                             num_elites=self.plan_elites, temperature=self.plan_temperature)

    # -------------------------------------------------------------- config io

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {_fmt(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        """Parse flat ``key = value`` lines; unknown keys are rejected."""
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value'")
            key, val = (p.strip() for p in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _parse(val, types[key], key)
        return replace(base or cls(), **values)

    @classmethod
    def load(cls, path, base: "TrainConfig | None" = None) -> "TrainConfig":
        return cls.loads(Path(path).read_text(encoding="utf-8"), base)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    return repr(v)


def _parse(val: str, typ, key: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            if val not in ("true", "false"):
                raise ValueError(val)
            return val == "true"
        if typ == "int":
            return int(val.replace("_", ""))
        if typ == "float":
            return float(val)
        if typ == "str":
            return val.strip('"').strip("'")
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {val!r} as {typ}") from None
    raise ValueError(f"config key {key!r}: unsupported type {typ}")


# ------------------------------------------------------------------- metrics


METRIC_FIELDS = ["env_step", "updates", "episodes", "expert_size", "behavioral_size",
                 "consistency", "critic_ce", "reward_T1", "reward_T2", "policy", "entropy",
                 "reward_scale", "eval_success"]


@dataclass
class RunMetrics:
    rows: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0

    def append(self, row: dict) -> None:
        if self.rows and row["env_step"] < self.rows[-1]["env_step"]:
            raise ValueError("metric step counters must not decrease")
        self.rows.append(row)

    def to_csv(self) -> str:
        """Deterministic CSV (wall-clock time is kept out so reruns are byte-identical)."""
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


# ------------------------------------------------------------------ learner


class Learner:
    """A world model plus its three optimisers."""

    def __init__(self, model: WorldModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        clip = cfg.grad_clip or None
        self.model_names = ["encoder", "dynamics"] + [f"critic{i}" for i in range(len(model.critics))]
        self.opt_model = Adam([model.net(n) for n in self.model_names], cfg.lr_model, grad_clip=clip)
        self.opt_reward = Adam([model.expert_pred, model.behav_pred], cfg.lr_reward, grad_clip=clip)
        self.opt_policy = Adam([model.policy], cfg.lr_policy, grad_clip=clip)
        self.updates = 0

    def update(self, batch: SegmentBatch, rng: np.random.Generator) -> LossBreakdown:
        m = self.model
        res = compute_model_losses(m, batch, rng)
        res.losses.check()
        g = res.grads
        self.opt_model.step([g[n] for n in self.model_names])
        self.opt_reward.step([g["expert_pred"], g["behav_pred"]])
        pol_loss, entropy, pg = compute_policy_loss(m, res.latents, rng)
        if not np.isfinite(pol_loss):
            raise NonFiniteLoss("non-finite policy loss")
        self.opt_policy.step([pg["policy"]])
        # finite gradients can still overflow the parameters when the step size is extreme
        for name in self.model_names + ["expert_pred", "behav_pred", "policy"]:
            if not all(np.isfinite(a).all() for a in m.net(name).arrays()):
                raise NonFiniteLoss(f"non-finite {name} parameters after update")
        ema_update(m, m.cfg.tau)
        m.reward_norm.update(res.behavioral_bonus, m.cfg.norm_decay)
        self.updates += 1
        res.losses.policy = pol_loss
        res.losses.entropy = entropy
        return res.losses


class Actor:
    """Chooses actions for the online or evaluation loop."""

    def __init__(self, model: WorldModel, mode: str, planner: PlannerConfig, explore: bool):
        self.model = model
        self.mode = mode
        self.planner = planner
        self.explore = explore
        self.prev_mean = None

    def reset(self):
        self.prev_mean = None

    def __call__(self, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        z = self.model.encode(obs)
        if self.mode == "policy":
            if self.explore:
                return policy_sample(self.model.policy, z, rng)[0]
            return mean_action(self.model.policy, z)
        init = None
        if self.prev_mean is not None:
            init = np.concatenate([self.prev_mean[1:], self.prev_mean[-1:]])
        a, mean = plan_action(self.model, z, self.planner, rng, init_mean=init, explore=self.explore)
        self.prev_mean = mean
        return a


def pretrain(spec: TaskSpec, gap: DomainGap, expert_data: Sequence[Episode], cfg: TrainConfig,
             model: WorldModel | None = None, checkpoint_dir=None, eval_fn=None,
             progress=None):
    """Online imitation pretraining; returns ``(model, metrics, behavioral_buffer)``.

    The learner never sees an environment reward: only observations, actions
    and episode boundaries reach the buffers' segment sampler.
    """
    if not expert_data:
        raise ValueError("expert dataset is empty")
    t_start = time.perf_counter()
    ss = np.random.SeedSequence(cfg.seed)
    init_ss, env_ss, act_ss, upd_ss = ss.spawn(4)
    model = model or WorldModel(cfg.model_config(), seed=int(init_ss.generate_state(1)[0]))
    learner = Learner(model, cfg)
    expert = ReplayBuffer(EXPERT).extend(expert_data)
    behavioral = ReplayBuffer(BEHAVIORAL, cfg.behavioral_capacity)
    metrics = RunMetrics()
    env = Env(spec, gap)
    env_rng = np.random.default_rng(env_ss)
    act_rng = np.random.default_rng(act_ss)
    upd_rng = np.random.default_rng(upd_ss)
    actor = Actor(model, cfg.act_mode, cfg.planner_config(), explore=True)

    obs = env.reset(env_rng)
    ep_states, ep_actions, ep_success, ep_ends = [obs], [], [], []
    episodes = 0
    acc = {k: 0.0 for k in ("consistency", "critic_ce", "reward_T1", "reward_T2", "policy", "entropy")}
    n_acc = 0
    last_good = model.copy()
    for step in range(cfg.pretrain_env_steps):
        if step < cfg.seed_steps:
            a = act_rng.uniform(-1.0, 1.0, size=spec.action_dim)
        else:
            try:
                a = actor(obs, act_rng)
                if not np.isfinite(a).all():
                    raise FloatingPointError("non-finite action")
            except FloatingPointError as exc:
                raise TrainingHalted(f"halted at env step {step + 1}: {exc}", last_good) from exc
        tr = env.step(a)
        ep_actions.append(tr.action)
        ep_states.append(tr.next_state)
        ep_success.append(tr.success)
        ep_ends.append(tr.episode_end)
        obs = tr.next_state
        if tr.episode_end:
            behavioral.push_episode(Episode(spec.task, np.array(ep_states), np.array(ep_actions),
                                            np.array(ep_success), np.array(ep_ends)))
            episodes += 1
            obs = env.reset(env_rng)
            actor.reset()
            ep_states, ep_actions, ep_success, ep_ends = [obs], [], [], []

        if step + 1 >= cfg.seed_steps:
            for _ in range(cfg.updates_per_env_step):
                try:
                    batch = sample_segments(expert, behavioral, cfg.batch_size, cfg.horizon,
                                            cfg.expert_fraction, upd_rng)
                except WarmingUp:
                    break
                try:
                    losses = learner.update(batch, upd_rng)
                except FloatingPointError as exc:
                    raise TrainingHalted(f"halted at env step {step + 1}: {exc}", last_good) from exc
                for k in acc:
                    acc[k] += getattr(losses, k)
                n_acc += 1

        done = step + 1
        if cfg.log_interval and (done % cfg.log_interval == 0 or done == cfg.pretrain_env_steps):
            row = {"env_step": done, "updates": learner.updates, "episodes": episodes,
                   "expert_size": len(expert), "behavioral_size": len(behavioral)}
            for k in acc:
                row[k] = acc[k] / n_acc if n_acc else 0.0
            row["reward_scale"] = model.reward_norm.scale
            row["eval_success"] = eval_fn(model) if eval_fn is not None else ""
            metrics.append(row)
            acc = {k: 0.0 for k in acc}
            n_acc = 0
            last_good = model.copy()
            if progress:
                progress(row)
        if checkpoint_dir and cfg.checkpoint_interval and done % cfg.checkpoint_interval == 0:
            save_checkpoint(Path(checkpoint_dir) / f"ckpt_{done:08d}.bin", model, spec.task)
    metrics.wall_clock = time.perf_counter() - t_start
    return model, metrics, behavioral


# ----------------------------------------------------------------- finetuning


def supervised_finetune(encoder, policy, data: Sequence[Episode], steps: int, lr: float,
                        weight_decay: float, batch_size: int, horizon: int, lam: float,
                        rng: np.random.Generator) -> list[float]:
    """Adam on ``-sum_t lam^t log pi(a_t | h(s_t))`` over horizon windows of ``data``."""
    if steps <= 0:
        return []
    buf = ReplayBuffer(EXPERT).extend(data)
    if buf.num_windows(horizon) == 0:
        horizon = 1
    opt = Adam([encoder, policy], lr, weight_decay=weight_decay)
    w = segment_weights(batch_size, horizon, lam)
    losses = []
    for _ in range(steps):
        S, A, _ = buf.draw(batch_size, horizon, rng)
        states = np.ascontiguousarray(S[:, :horizon].transpose(1, 0, 2)).reshape(-1, S.shape[-1])
        actions = np.ascontiguousarray(A.transpose(1, 0, 2)).reshape(-1, A.shape[-1])
        loss, ge, gp = mle_loss(encoder, policy, states, actions, w)
        if not np.isfinite(loss):
            raise NonFiniteLoss("non-finite supervised loss")
        opt.step([ge, gp])
        losses.append(loss)
    return losses


def finetune(model: WorldModel, new_data: Sequence[Episode], cfg: TrainConfig,
             steps: int | None = None) -> WorldModel:
    """Offline MLE on target-domain demos; only encoder and policy change."""
    if not new_data:
        raise ValueError("finetune dataset is empty")
    out = model.copy()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    supervised_finetune(out.encoder, out.policy, new_data,
                        cfg.finetune_steps if steps is None else steps,
                        cfg.finetune_lr, cfg.finetune_weight_decay, cfg.finetune_batch,
                        cfg.finetune_horizon, cfg.lam, rng)
    return out


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    success_rate: float
    episodes: int
    outcomes: list[bool]
    lengths: list[int]

    def log_rows(self) -> list[dict]:
        return [{"episode": i, "success": s, "length": n}
                for i, (s, n) in enumerate(zip(self.outcomes, self.lengths))]


def run_episodes(act, spec: TaskSpec, gap: DomainGap, episodes: int, seed: int,
                 reset=None) -> EvalResult:
    """Roll ``act(obs, rng)`` for ``episodes`` episodes from seeded initial states."""
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    env = Env(spec, gap)
    outcomes, lengths = [], []
    ss = np.random.SeedSequence([seed, 1234])
    for child in ss.spawn(episodes):
        init_rng, act_rng = (np.random.default_rng(c) for c in child.spawn(2))
        obs = env.reset(init_rng)
        if reset is not None:
            reset()
        success = False
        for t in range(spec.max_steps):
            tr = env.step(act(obs, act_rng))
            obs = tr.next_state
            if tr.success:
                success = True
            if tr.episode_end:
                break
        outcomes.append(success)
        lengths.append(env.t)
    return EvalResult(float(np.mean(outcomes)), episodes, outcomes, lengths)


def evaluate(model: WorldModel, spec: TaskSpec, gap: DomainGap, episodes: int, seed: int,
             mode: str = "planner", planner: PlannerConfig | None = None) -> EvalResult:
    actor = Actor(model, mode, planner or PlannerConfig(), explore=False)
    return run_episodes(actor, spec, gap, episodes, seed, reset=actor.reset)


# ------------------------------------------------------------------ coverage


@dataclass
class CoverageTable:
    bins_per_dim: int
    expert_counts: np.ndarray       # [dims, bins]
    behavioral_counts: np.ndarray

    @property
    def expert_occupied(self) -> np.ndarray:
        return (self.expert_counts > 0).sum(axis=1)

    @property
    def behavioral_occupied(self) -> np.ndarray:
        return (self.behavioral_counts > 0).sum(axis=1)

    @property
    def ratio(self) -> np.ndarray:
        return self.behavioral_occupied / np.maximum(self.expert_occupied, 1)


def _states(data) -> np.ndarray:
    if isinstance(data, ReplayBuffer):
        data = data.episodes
    return np.concatenate([ep.states for ep in data])


def coverage_report(expert_data, behavioral_data, bins_per_dim: int = 30) -> CoverageTable:
    """Per-dimension occupancy histograms over ``[-1, 1]``."""
    se, sb = _states(expert_data), _states(behavioral_data)
    if not len(se) or not len(sb):
        raise ValueError("coverage needs two nonempty datasets")
    edges = np.linspace(-1.0, 1.0, bins_per_dim + 1)

    def hist(x):
        return np.stack([np.histogram(np.clip(x[:, d], -1.0, 1.0), bins=edges)[0]
                         for d in range(x.shape[1])])

    return CoverageTable(bins_per_dim, hist(se), hist(sb))
