"""Tanh-squashed Gaussian policy head shared by the world model and the BC baseline.

The policy network emits ``[mean, raw_log_std]`` per action dimension; the raw
value is squashed smoothly into ``[log_std_min, log_std_max]``.
"""

from __future__ import annotations

import numpy as np

from .nn import Mlp, mlp_apply, mlp_backward, mlp_forward

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
ATANH_CLIP = 1.0 - 1e-6
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def split_head(out: np.ndarray, lo: float = LOG_STD_MIN, hi: float = LOG_STD_MAX):
    """``(mean, log_std, dlog_std/draw)`` from raw network output."""
    a_dim = out.shape[-1] // 2
    mu = out[..., :a_dim]
    t = np.tanh(out[..., a_dim:])
    log_std = lo + 0.5 * (hi - lo) * (t + 1.0)
    return mu, log_std, 0.5 * (hi - lo) * (1.0 - t * t)


def log1m_tanh_sq(u: np.ndarray) -> np.ndarray:
    """``log(1 - tanh(u)^2)`` without cancellation."""
    return 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def mean_action(policy: Mlp, z: np.ndarray) -> np.ndarray:
    mu, _, _ = split_head(mlp_apply(policy, z))
    return np.tanh(mu)


def policy_sample(policy: Mlp, z: np.ndarray, rng: np.random.Generator):
    """Reparameterised draw ``a = tanh(mu + sigma * eps)`` and its log-density."""
    mu, log_std, _ = split_head(mlp_apply(policy, z))
    eps = rng.standard_normal(mu.shape)
    u = mu + np.exp(log_std) * eps
    logp = (-0.5 * eps * eps - log_std - _HALF_LOG_2PI - log1m_tanh_sq(u)).sum(axis=-1)
    return np.tanh(u), logp


def gaussian_log_prob(mu: np.ndarray, log_std: np.ndarray, a: np.ndarray):
    """Log-density of squashed actions plus its gradients w.r.t. ``mu`` and ``log_std``."""
    a = np.clip(a, -ATANH_CLIP, ATANH_CLIP)
    u = np.arctanh(a)
    inv_std = np.exp(-log_std)
    r = (u - mu) * inv_std
    logp = (-0.5 * r * r - log_std - _HALF_LOG_2PI - log1m_tanh_sq(u)).sum(axis=-1)
    return logp, r * inv_std, r * r - 1.0


def policy_log_prob(policy: Mlp, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    mu, log_std, _ = split_head(mlp_apply(policy, z))
    return gaussian_log_prob(mu, log_std, a)[0]


def mle_loss(encoder: Mlp, policy: Mlp, states: np.ndarray, actions: np.ndarray,
             weights: np.ndarray):
    """Weighted negative log-likelihood ``-sum_i w_i log pi(a_i | h(s_i))``.

    Returns ``(loss, encoder_grads, policy_grads)``. This is the single
    maximum-likelihood path used by both finetuning and behaviour cloning.
    """
    z, enc_cache = mlp_forward(encoder, states)
    out, pol_cache = mlp_forward(policy, z)
    mu, log_std, dls = split_head(out)
    logp, dmu, dlog_std = gaussian_log_prob(mu, log_std, actions)
    w = weights[:, None]
    loss = -float(np.dot(weights, logp))
    g_out = np.concatenate([-w * dmu, -w * dlog_std * dls], axis=-1)
    pol_grads, gz = mlp_backward(policy, pol_cache, g_out)
    enc_grads, _ = mlp_backward(encoder, enc_cache, gz)
    return loss, enc_grads, pol_grads


def segment_weights(batch_size: int, horizon: int, lam: float) -> np.ndarray:
    """Per-row ``lam**t / B`` for rows laid out time-major over ``horizon`` steps."""
    return np.repeat(lam ** np.arange(horizon), batch_size) / batch_size
