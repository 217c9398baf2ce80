"""Latent world model with a coupled RND reward, categorical critic and squashed-Gaussian policy.

All losses are differentiated by hand. Rows of multi-step quantities are laid
out time-major: row ``t * B + b`` is step ``t`` of batch element ``b``.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .buffers import SegmentBatch
from .nn import (Mlp, ValueBins, mlp_apply, mlp_backward, mlp_forward, softmax,
                 softmax_cross_entropy, symexp, symlog, two_hot_encode)
from .policy import LOG_STD_MAX, LOG_STD_MIN, log1m_tanh_sq, mean_action, split_head
from .policy import policy_log_prob as _policy_log_prob
from .policy import policy_sample as _policy_sample

FORMAT_VERSION = 1
_MAGIC = b"WMCKPT\x00\x01"


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class ModelConfig:
    s_dim: int
    a_dim: int
    hidden: int = 64
    latent_dim: int = 16
    simnorm_group: int = 8
    embed_dim: int = 32
    num_targets: int = 5
    num_q: int = 2
    v_min: float = -10.0
    v_max: float = 10.0
    num_bins: int = 101
    zeta: float = 0.6
    gamma: float = 0.99
    lam: float = 0.5
    beta: float = 1e-4
    tau: float = 0.01
    norm_decay: float = 0.01
    # "symlog": bins live in symlog space so returns far beyond the grid stay resolvable
    value_transform: str = "identity"

    def __post_init__(self):
        if self.value_transform not in ("symlog", "identity"):
            raise ValueError("value_transform must be 'symlog' or 'identity'")
        if not 0.0 <= self.zeta <= 1.0:
            raise ValueError("zeta must lie in [0, 1]")
        if self.num_targets < 1:
            raise ValueError("need at least one target network")

    @property
    def bins(self) -> ValueBins:
        return ValueBins(self.v_min, self.v_max, self.num_bins)


@dataclass
class RewardNormalizer:
    """Running RMS of the behavioral bonus; both bonuses are divided by it."""

    mean_sq: float = 1.0
    count: int = 0

    @property
    def scale(self) -> float:
        return float(np.sqrt(self.mean_sq)) + 1e-8

    def update(self, bonuses: np.ndarray, decay: float) -> None:
        m = float(np.mean(np.square(bonuses)))
        self.mean_sq = m if self.count == 0 else (1.0 - decay) * self.mean_sq + decay * m
        self.count += 1


@dataclass
class LossBreakdown:
    consistency: float = 0.0
    critic_ce: float = 0.0
    reward_T1: float = 0.0
    reward_T2: float = 0.0
    policy: float = 0.0
    entropy: float = 0.0

    def check(self) -> None:
        for k, v in asdict(self).items():
            if not np.isfinite(v):
                raise NonFiniteLoss(f"non-finite {k} loss ({v})")


class WorldModel:
    """Parameter groups: encoder, dynamics, critics (+EMA targets), policy,
    expert/behavioral predictors and a frozen random target ensemble."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        h, z, a, s = cfg.hidden, cfg.latent_dim, cfg.a_dim, cfg.s_dim
        g = cfg.simnorm_group
        self.encoder = Mlp.init([s, h, h, z], rng, output="simnorm", simnorm_group=g)
        self.dynamics = Mlp.init([z + a, h, h, z], rng, output="simnorm", simnorm_group=g)
        self.critics = []
        for _ in range(cfg.num_q):
            q = Mlp.init([z + a, h, h, cfg.num_bins], rng)
            q.layers[-1].weight[:] = 0.0
            self.critics.append(q)
        self.critic_targets = [q.copy() for q in self.critics]
        self.policy = Mlp.init([z, h, h, 2 * a], rng)
        self.expert_pred = Mlp.init([z + a, h, h, cfg.embed_dim], rng)
        self.behav_pred = Mlp.init([z + a, h, h, cfg.embed_dim], rng)
        self.targets = [Mlp.init([z + a, h, h, cfg.embed_dim], rng) for _ in range(cfg.num_targets)]
        self.reward_norm = RewardNormalizer()
        self._stacked = None

    # ------------------------------------------------------------ bookkeeping

    def named_nets(self) -> list[tuple[str, Mlp]]:
        nets = [("encoder", self.encoder), ("dynamics", self.dynamics)]
        nets += [(f"critic{i}", q) for i, q in enumerate(self.critics)]
        nets += [(f"critic_target{i}", q) for i, q in enumerate(self.critic_targets)]
        nets += [("policy", self.policy), ("expert_pred", self.expert_pred),
                 ("behav_pred", self.behav_pred)]
        nets += [(f"target{i}", t) for i, t in enumerate(self.targets)]
        return nets

    def net(self, name: str) -> Mlp:
        return dict(self.named_nets())[name]

    def snapshot(self) -> dict[str, list[np.ndarray]]:
        return {name: [a.copy() for a in net.arrays()] for name, net in self.named_nets()}

    def copy(self) -> "WorldModel":
        other = WorldModel.__new__(WorldModel)
        other.cfg = self.cfg
        other.encoder = self.encoder.copy()
        other.dynamics = self.dynamics.copy()
        other.critics = [q.copy() for q in self.critics]
        other.critic_targets = [q.copy() for q in self.critic_targets]
        other.policy = self.policy.copy()
        other.expert_pred = self.expert_pred.copy()
        other.behav_pred = self.behav_pred.copy()
        other.targets = [t.copy() for t in self.targets]
        other.reward_norm = RewardNormalizer(self.reward_norm.mean_sq, self.reward_norm.count)
        other._stacked = None
        return other

    def param_bytes(self, names=None) -> bytes:
        buf = io.BytesIO()
        for name, net in self.named_nets():
            if names is None or name in names:
                for a in net.arrays():
                    buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return buf.getvalue()

    def digest(self) -> str:
        h = hashlib.sha256(self.param_bytes())
        h.update(struct.pack("<dq", self.reward_norm.mean_sq, self.reward_norm.count))
        return h.hexdigest()

    # ------------------------------------------------------------ forward bits

    def encode(self, s: np.ndarray) -> np.ndarray:
        return mlp_apply(self.encoder, s)

    def latent_step(self, z: np.ndarray, a: np.ndarray) -> np.ndarray:
        return mlp_apply(self.dynamics, np.concatenate([z, a], axis=-1))

    def target_outputs(self, za: np.ndarray) -> np.ndarray:
        """All frozen target embeddings at once, shape ``[K, n, e]``."""
        if self._stacked is None:
            layers = []
            for i in range(len(self.targets[0].layers)):
                W = np.stack([t.layers[i].weight for t in self.targets])
                b = np.stack([t.layers[i].bias for t in self.targets])[:, None, :]
                layers.append((W.transpose(0, 2, 1).copy(), b, self.targets[0].layers[i].activation))
            self._stacked = layers
        h = za[None]
        for W, b, act in self._stacked:
            h = np.matmul(h, W) + b
            if act == "relu":
                h = np.maximum(h, 0.0)
        return h

    def bonuses(self, za: np.ndarray):
        """Raw expert and behavioral bonuses plus the intermediates used by the losses."""
        tout = self.target_outputs(za)
        f_e, c_e = mlp_forward(self.expert_pred, za)
        f_b, c_b = mlp_forward(self.behav_pred, za)
        centre = tout.mean(axis=0)
        b_e = np.sum((f_e - centre) ** 2, axis=-1)
        b_b = np.sum((f_b - centre) ** 2, axis=-1)
        return b_e, b_b, (tout, f_e, c_e, f_b, c_b)

    def reward(self, z: np.ndarray, a: np.ndarray) -> np.ndarray:
        b_e, b_b, _ = self.bonuses(np.concatenate([z, a], axis=-1))
        return normalized_reward(b_e, b_b, self.cfg.zeta, self.reward_norm.scale)

    def q_values(self, z, a, use_target: bool = False) -> np.ndarray:
        """Decoded value of every critic, shape ``[num_q, n]``."""
        za = np.concatenate([z, a], axis=-1)
        nets = self.critic_targets if use_target else self.critics
        centers = self.cfg.bins.centers
        return np.stack([self.from_bins(softmax(mlp_apply(q, za)) @ centers) for q in nets])

    def to_bins(self, v):
        return symlog(v) if self.cfg.value_transform == "symlog" else np.asarray(v, dtype=np.float64)

    def from_bins(self, x):
        return symexp(x) if self.cfg.value_transform == "symlog" else x

    def from_bins_grad(self, x):
        """Derivative of ``from_bins`` at ``x``."""
        return np.exp(np.abs(x)) if self.cfg.value_transform == "symlog" else np.ones_like(x)


def mix_reward(b_expert, b_behavioral, zeta: float):
    """``-zeta * b_expert + (1 - zeta) * b_behavioral``."""
    return -zeta * np.asarray(b_expert) + (1.0 - zeta) * np.asarray(b_behavioral)


def normalized_reward(b_expert, b_behavioral, zeta: float, scale: float):
    return mix_reward(np.asarray(b_expert) / scale, np.asarray(b_behavioral) / scale, zeta)


def bonus(z: np.ndarray, a: np.ndarray, predictor: Mlp, targets: list[Mlp]) -> np.ndarray:
    """Squared distance between the predictor and the frozen ensemble's mean output.

    Regressing onto a randomly drawn ensemble member is minimised by the
    ensemble mean, so measuring against the mean leaves no irreducible floor
    from the spread between members. With one target this is plain RND.
    """
    za = np.concatenate([z, a], axis=-1)
    f = mlp_apply(predictor, za)
    centre = np.mean([mlp_apply(t, za) for t in targets], axis=0)
    return np.sum((f - centre) ** 2, axis=-1)


def cdred_reward(model: WorldModel, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    return model.reward(z, a)


def encode(model: WorldModel, s):
    return model.encode(s)


def latent_step(model: WorldModel, z, a):
    return model.latent_step(z, a)


def critic_value(model: WorldModel, z, a, use_target: bool = False) -> np.ndarray:
    """Ensemble value reduced by the minimum."""
    return model.q_values(z, a, use_target).min(axis=0)


def policy_sample(model: WorldModel, z, rng: np.random.Generator):
    return _policy_sample(model.policy, z, rng)


def policy_log_prob(model: WorldModel, z, a):
    return _policy_log_prob(model.policy, z, a)


def ema_update(model: WorldModel, tau: float) -> None:
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    for q, qt in zip(model.critics, model.critic_targets):
        for src, dst in zip(q.arrays(), qt.arrays()):
            dst *= 1.0 - tau
            dst += tau * src
        qt.version += 1


# ---------------------------------------------------------------- the losses


@dataclass
class ModelLossResult:
    losses: LossBreakdown
    grads: dict[str, list[np.ndarray]]
    latents: np.ndarray          # detached rollout latents [H+1, B, z]
    behavioral_bonus: np.ndarray  # raw b_psi on all rollout rows
    td_targets: np.ndarray = field(default=None)  # type: ignore[assignment]


def rnd_regression(predictor: Mlp, out: np.ndarray, cache, targets: np.ndarray,
                   row_weights: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """``sum_i w_i ||out_i - targets_i||^2`` and its parameter gradient.

    ``out``/``cache`` come from ``mlp_forward(predictor, za)``; each row's
    target is the one frozen ensemble member drawn for that row.
    """
    d = out - targets
    loss = float(np.dot(row_weights, np.sum(d * d, axis=-1)))
    grads, _ = mlp_backward(predictor, cache, 2.0 * row_weights[:, None] * d)
    return loss, grads


def _time_major(x: np.ndarray) -> np.ndarray:
    """``[B, T, d] -> [T * B, d]``."""
    return np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(-1, x.shape[-1])


def compute_model_losses(model: WorldModel, batch: SegmentBatch, rng: np.random.Generator,
                         target_index: np.ndarray | None = None,
                         td_noise: np.ndarray | None = None) -> ModelLossResult:
    """Consistency + critic cross-entropy + the two RND regressions, with gradients.

    ``target_index`` (per row, ``[H * B]``) and ``td_noise`` (``[H * B, a]``)
    pin the random draws; by default they come from ``rng``.
    """
    cfg = model.cfg
    S, A = batch.states, batch.actions
    B, H = A.shape[0], A.shape[1]
    zd = cfg.latent_dim
    lam_t = cfg.lam ** np.arange(H)
    row_w = np.repeat(lam_t, B) / B

    # encoder: s_0 with cache, s_1..s_H as stop-gradient targets
    z0, enc_cache = mlp_forward(model.encoder, S[:, 0])
    z_next = mlp_apply(model.encoder, _time_major(S[:, 1:])).reshape(H, B, zd)

    zs = [z0]
    dyn_caches = []
    for t in range(H):
        zn, c = mlp_forward(model.dynamics, np.concatenate([zs[t], A[:, t]], axis=-1))
        zs.append(zn)
        dyn_caches.append(c)
    Z = np.stack(zs)                              # [H+1, B, z]
    A_tm = _time_major(A)                         # [H*B, a]
    Z_roll = Z[:H].reshape(H * B, zd)
    za_roll = np.concatenate([Z_roll, A_tm], axis=-1)

    grad_Z = np.zeros_like(Z)

    # latent consistency ||z'_t - sg(h(s'_t))||^2
    diff = Z[1:] - z_next
    sq = np.sum(diff * diff, axis=-1)             # [H, B]
    consistency = float(np.sum(lam_t * sq.mean(axis=1)))
    grad_Z[1:] += 2.0 * diff * (lam_t / B)[:, None, None]

    # reward model on detached rollout latents
    b_e, b_b, (tout, f_e, c_e, f_b, c_b) = model.bonuses(za_roll)
    K = cfg.num_targets
    if target_index is None:
        target_index = rng.integers(0, K, size=H * B)
    rows = np.arange(H * B)
    chosen = tout[target_index, rows]             # [H*B, e]
    is_exp = np.tile(batch.expert, H)
    n_exp = max(int(batch.expert.sum()), 1)
    n_beh = max(int((~batch.expert).sum()), 1)
    w_t = np.repeat(lam_t, B)
    t1, ge = rnd_regression(model.expert_pred, f_e, c_e, chosen, w_t * is_exp / n_exp)
    t2, gb = rnd_regression(model.behav_pred, f_b, c_b, chosen, w_t * ~is_exp / n_beh)

    # TD targets (no gradient): q_t = R(z_t, a_t) + gamma * min_m Qbar_m(z'_t, pi(z'_t))
    reward = normalized_reward(b_e, b_b, cfg.zeta, model.reward_norm.scale)
    zn_flat = z_next.reshape(H * B, zd)
    mu, log_std, _ = split_head(mlp_apply(model.policy, zn_flat))
    if td_noise is None:
        td_noise = rng.standard_normal(mu.shape)
    a_next = np.tanh(mu + np.exp(log_std) * td_noise)
    q_next = model.q_values(zn_flat, a_next, use_target=True).min(axis=0)
    td = reward + cfg.gamma * q_next
    target_probs = two_hot_encode(model.to_bins(td), cfg.bins)

    # critic cross-entropy on rollout latents, averaged over the ensemble
    critic_ce = 0.0
    critic_grads = []
    grad_roll = np.zeros((H * B, zd))
    for q in model.critics:
        logits, cq = mlp_forward(q, za_roll)
        ce, g_logits = softmax_cross_entropy(logits, target_probs)
        critic_ce += float(np.dot(row_w, ce)) / cfg.num_q
        g_logits *= (row_w / cfg.num_q)[:, None]
        gq, g_in = mlp_backward(q, cq, g_logits)
        critic_grads.append(gq)
        grad_roll += g_in[:, :zd]
    grad_Z[:H] += grad_roll.reshape(H, B, zd)

    # back through the latent rollout into dynamics and encoder
    g_dyn = [np.zeros_like(x) for x in model.dynamics.arrays()]
    for t in range(H - 1, -1, -1):
        gp, g_in = mlp_backward(model.dynamics, dyn_caches[t], grad_Z[t + 1])
        for acc, g in zip(g_dyn, gp):
            acc += g
        grad_Z[t] += g_in[:, :zd]
    g_enc, _ = mlp_backward(model.encoder, enc_cache, grad_Z[0])

    losses = LossBreakdown(consistency=consistency, critic_ce=critic_ce, reward_T1=t1, reward_T2=t2)
    grads = {"encoder": g_enc, "dynamics": g_dyn, "expert_pred": ge, "behav_pred": gb}
    for i, g in enumerate(critic_grads):
        grads[f"critic{i}"] = g
    return ModelLossResult(losses, grads, Z.copy(), b_b, td)


def compute_policy_loss(model: WorldModel, latents: np.ndarray, rng: np.random.Generator,
                        noise: np.ndarray | None = None):
    """Maximum-entropy policy objective on detached latents ``[T, B, z]``.

    Returns ``(loss, entropy, grads)`` where ``grads`` holds the policy
    gradient and explicit zero gradients for every other trainable group:
    nothing flows back into the encoder or the critics.
    """
    cfg = model.cfg
    T, B, zd = latents.shape
    z = latents.reshape(T * B, zd)
    w = np.repeat(cfg.lam ** np.arange(T), B) / B
    out, pc = mlp_forward(model.policy, z)
    mu, log_std, dls = split_head(out)
    std = np.exp(log_std)
    if noise is None:
        noise = rng.standard_normal(mu.shape)
    u = mu + std * noise
    a = np.tanh(u)
    logp = (-0.5 * noise * noise - log_std - 0.5 * np.log(2 * np.pi) - log1m_tanh_sq(u)).sum(axis=-1)

    za = np.concatenate([z, a], axis=-1)
    centers = cfg.bins.centers
    values, caches, probs = [], [], []
    for q in model.critics:
        logits, c = mlp_forward(q, za)
        p = softmax(logits)
        values.append(p @ centers)
        caches.append(c)
        probs.append(p)
    raw = np.stack(values)
    values = model.from_bins(raw)
    pick = values.argmin(axis=0)
    qmin = values[pick, np.arange(T * B)]

    loss = float(np.dot(w, -qmin + cfg.beta * logp))
    dq_da = np.zeros_like(a)
    for m, q in enumerate(model.critics):
        sel = (pick == m)
        if not sel.any():
            continue
        dv = model.from_bins_grad(raw[m]) * sel
        g_logits = probs[m] * (centers[None, :] - raw[m][:, None]) * dv[:, None]
        _, g_in = mlp_backward(q, caches[m], g_logits, param_grads=False)
        dq_da += g_in[:, zd:]
    wcol = w[:, None]
    g_u = -wcol * dq_da * (1.0 - a * a) + wcol * cfg.beta * 2.0 * a
    g_mu = g_u
    g_log_std = g_u * std * noise - wcol * cfg.beta
    g_out = np.concatenate([g_mu, g_log_std * dls], axis=-1)
    gp, _ = mlp_backward(model.policy, pc, g_out)
    grads = {"policy": gp}
    for name in ("encoder", "dynamics", "expert_pred", "behav_pred"):
        grads[name] = model.net(name).zero_grads()
    for i, q in enumerate(model.critics):
        grads[f"critic{i}"] = q.zero_grads()
    entropy = -float(np.mean(logp))
    return loss, entropy, grads


# ------------------------------------------------------------------ checkpoints


def _header(model: WorldModel, task: str, extra: dict | None) -> dict:
    cfg = model.cfg
    return {
        "format_version": FORMAT_VERSION,
        "kind": "world_model",
        "task": task,
        "s_dim": cfg.s_dim,
        "a_dim": cfg.a_dim,
        "z_dim": cfg.latent_dim,
        "K": cfg.num_targets,
        "zeta": cfg.zeta,
        "bins": [cfg.v_min, cfg.v_max, cfg.num_bins],
        "config": asdict(cfg),
        "shapes": [[name, [list(a.shape) for a in net.arrays()], [l.activation for l in net.layers]]
                   for name, net in model.named_nets()],
        "reward_norm": ["mean_sq", "count"],
        "extra": extra or {},
    }


def save_checkpoint(path, model: WorldModel, task: str = "", extra: dict | None = None) -> str:
    """Header JSON then little-endian float64 blocks in declared order. Returns sha256."""
    body = model.param_bytes() + np.array([model.reward_norm.mean_sq, float(model.reward_norm.count)],
                                          dtype="<f8").tobytes()
    return write_frame(path, _header(model, task, extra), body)


def write_frame(path, header: dict, body: bytes) -> str:
    """Magic, header length, sorted-key JSON header, raw body. Returns the file's sha256."""
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = _MAGIC + struct.pack("<Q", len(head)) + head + body
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def read_frame(path) -> tuple[dict, np.ndarray]:
    """Header and the body viewed as little-endian float64."""
    data = Path(path).read_bytes()
    head, offset = _parse_header(data)
    if (len(data) - offset) % 8:
        raise ValueError("checkpoint body is not a whole number of float64 values")
    return head, np.frombuffer(data, dtype="<f8", offset=offset)


def read_checkpoint_header(path) -> dict:
    data = Path(path).read_bytes()
    return _parse_header(data)[0]


def _parse_header(data: bytes):
    if not data.startswith(_MAGIC):
        raise ValueError("not a checkpoint file")
    (n,) = struct.unpack("<Q", data[len(_MAGIC):len(_MAGIC) + 8])
    start = len(_MAGIC) + 8
    head = json.loads(data[start:start + n].decode("utf-8"))
    if head.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {head.get('format_version')}")
    return head, start + n


def load_checkpoint(path) -> tuple[WorldModel, dict]:
    head, flat = read_frame(path)
    if head.get("kind", "world_model") != "world_model":
        raise ValueError(f"checkpoint holds a {head['kind']!r} model, not a world model")
    cfg = ModelConfig(**head["config"])
    model = WorldModel(cfg, seed=0)
    expected = sum(int(np.prod(shp)) for _, shapes, _ in head["shapes"] for shp in shapes) + 2
    if expected != len(flat):
        raise ValueError("checkpoint body length does not match its header")
    pos = 0
    nets = dict(model.named_nets())
    for name, shapes, _ in head["shapes"]:
        net = nets[name]
        arrays = []
        for shp in shapes:
            n = int(np.prod(shp))
            arrays.append(flat[pos:pos + n].reshape(shp))
            pos += n
        net.load_arrays(arrays)
    model.reward_norm = RewardNormalizer(float(flat[pos]), int(flat[pos + 1]))
    model._stacked = None
    return model, head


__all__ = [
    "ModelConfig", "WorldModel", "LossBreakdown", "RewardNormalizer", "NonFiniteLoss",
    "mix_reward", "normalized_reward", "bonus", "cdred_reward", "encode", "latent_step",
    "critic_value", "policy_sample", "policy_log_prob", "ema_update", "compute_model_losses",
    "compute_policy_loss", "save_checkpoint", "load_checkpoint", "read_checkpoint_header",
    "write_frame", "read_frame",
    "mean_action", "LOG_STD_MIN", "LOG_STD_MAX",
]
