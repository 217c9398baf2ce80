"""Sampling-based trajectory optimisation in latent space (CEM with softmax-weighted refits)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .policy import mean_action, split_head
from .nn import mlp_apply


@dataclass(frozen=True)
class PlannerConfig:
    num_samples: int = 64
    num_pi_trajs: int = 8
    horizon: int = 3
    iterations: int = 4
    num_elites: int = 8
    temperature: float = 0.5
    min_std: float = 0.05
    max_std: float = 1.0
    fallback: bool = False

    def __post_init__(self):
        if not self.num_samples >= self.num_elites >= 1:
            raise ValueError("need num_samples >= num_elites >= 1")


def cem_plan(score: Callable[[np.ndarray], np.ndarray], a_dim: int, cfg: PlannerConfig,
             rng: np.random.Generator, prior: np.ndarray | None = None,
             init_mean: np.ndarray | None = None, explore: bool = False):
    """Optimise action sequences ``[N, H, a]`` under ``score``.

    ``iterations`` refits are followed by one final draw from which the best
    candidate (or, when exploring, a softmax-weighted elite) is returned.
    Returns ``(first_action, mean_sequence)``.
    """
    H = cfg.horizon
    mean = np.zeros((H, a_dim)) if init_mean is None else np.array(init_mean, dtype=np.float64)
    std = np.full((H, a_dim), cfg.max_std)
    n_prior = 0 if prior is None else len(prior)
    n_draw = max(cfg.num_samples - n_prior, 0)
    for it in range(cfg.iterations + 1):
        cand = np.clip(mean + std * rng.standard_normal((n_draw, H, a_dim)), -1.0, 1.0)
        if n_prior:
            cand = np.concatenate([prior, cand])
        values = np.asarray(score(cand), dtype=np.float64)
        finite = np.isfinite(values)
        if not finite.any():
            raise FloatingPointError("every planner candidate scored non-finite")
        values = np.where(finite, values, -np.inf)
        k = min(cfg.num_elites, len(cand))
        elite_idx = np.argsort(-values, kind="stable")[:k]
        ev = values[elite_idx]
        w = np.exp(cfg.temperature * (ev - ev.max()))
        w /= w.sum()
        elites = cand[elite_idx]
        if it == cfg.iterations:
            break
        mean = np.einsum("k,kha->ha", w, elites)
        std = np.sqrt(np.einsum("k,kha->ha", w, (elites - mean) ** 2))
        std = np.clip(std, cfg.min_std, cfg.max_std)
    if explore:
        pick = rng.choice(k, p=w)
        a = elites[pick, 0] + std[0] * rng.standard_normal(a_dim)
    else:
        a = elites[0, 0]
    return np.clip(a, -1.0, 1.0), mean


def plan_action(model, z: np.ndarray, cfg: PlannerConfig, rng: np.random.Generator,
                init_mean: np.ndarray | None = None, explore: bool = False):
    """Plan one action from latent ``z``.

    Candidates are scored by ``sum_t lam^t R(z_t, a_t) + lam^H Q(z_H, pi(z_H))``.
    In fallback mode the deterministic policy action is returned instead.
    """
    if cfg.fallback:
        return mean_action(model.policy, z), None
    a_dim = model.cfg.a_dim
    lam = model.cfg.lam
    H = cfg.horizon

    def rollout_pi(n):
        zz = np.repeat(z[None], n, axis=0)
        seq = np.empty((n, H, a_dim))
        for t in range(H):
            mu, log_std, _ = split_head(mlp_apply(model.policy, zz))
            seq[:, t] = np.tanh(mu + np.exp(log_std) * rng.standard_normal(mu.shape))
            zz = model.latent_step(zz, seq[:, t])
        return seq

    def score(actions):
        n = len(actions)
        zz = np.repeat(z[None], n, axis=0)
        total = np.zeros(n)
        for t in range(H):
            total += lam ** t * model.reward(zz, actions[:, t])
            zz = model.latent_step(zz, actions[:, t])
        a_last = mean_action(model.policy, zz)
        total += lam ** H * model.q_values(zz, a_last).min(axis=0)
        return total

    prior = rollout_pi(cfg.num_pi_trajs) if cfg.num_pi_trajs else None
    return cem_plan(score, a_dim, cfg, rng, prior=prior, init_mean=init_mean, explore=explore)
