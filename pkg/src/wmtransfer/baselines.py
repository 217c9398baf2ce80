"""Behaviour-cloning baselines: train on target data only, or pretrain then finetune."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .envs import DomainGap, Episode, TaskSpec
from .nn import Layer, Mlp, mlp_apply
from .policy import mean_action
from .trainer import EvalResult, run_episodes, supervised_finetune
from .world_model import FORMAT_VERSION, read_frame, write_frame

DIRECT = "direct"
PRETRAIN_FINETUNE = "pretrain_finetune"


@dataclass
class BcModel:
    """State encoder plus tanh-Gaussian head; acts with the mean action."""

    encoder: Mlp
    policy: Mlp

    @classmethod
    def init(cls, s_dim: int, a_dim: int, seed: int, hidden: int = 64, latent_dim: int = 16,
             simnorm_group: int = 8) -> "BcModel":
        rng = np.random.default_rng(seed)
        enc = Mlp.init([s_dim, hidden, hidden, latent_dim], rng, output="simnorm",
                       simnorm_group=simnorm_group)
        pol = Mlp.init([latent_dim, hidden, hidden, 2 * a_dim], rng)
        return cls(enc, pol)

    def copy(self) -> "BcModel":
        return BcModel(self.encoder.copy(), self.policy.copy())

    def act(self, obs: np.ndarray) -> np.ndarray:
        return mean_action(self.policy, mlp_apply(self.encoder, obs))


def bc_train(spec: TaskSpec, mode: str, target_data: Sequence[Episode], *,
             source_data: Sequence[Episode] = (), steps: int = 5000, lr: float = 3e-4,
             batch_size: int = 256, horizon: int = 3, lam: float = 0.5, seed: int = 0,
             finetune_steps: int = 5000, finetune_lr: float = 1e-5,
             finetune_weight_decay: float = 1e-4, hidden: int = 64, latent_dim: int = 16,
             init: BcModel | None = None) -> BcModel:
    """Direct: MLE on ``target_data``. Pretrain+finetune: MLE on ``source_data`` first,
    then the same finetuning recipe as the world-model policy on ``target_data``."""
    if mode not in (DIRECT, PRETRAIN_FINETUNE):
        raise ValueError(f"unknown BC mode {mode!r}")
    if not target_data:
        raise ValueError("target dataset is empty")
    ss = np.random.SeedSequence([seed, 31])
    init_ss, pre_ss, ft_ss = ss.spawn(3)
    model = init.copy() if init is not None else BcModel.init(
        spec.state_dim, spec.action_dim, int(init_ss.generate_state(1)[0]), hidden, latent_dim)
    if mode == DIRECT:
        supervised_finetune(model.encoder, model.policy, target_data, steps, lr, 0.0,
                            batch_size, horizon, lam, np.random.default_rng(pre_ss))
        return model
    if not source_data:
        raise ValueError("pretrain+finetune needs a source dataset")
    supervised_finetune(model.encoder, model.policy, source_data, steps, lr, 0.0,
                        batch_size, horizon, lam, np.random.default_rng(pre_ss))
    supervised_finetune(model.encoder, model.policy, target_data, finetune_steps, finetune_lr,
                        finetune_weight_decay, batch_size, horizon, lam, np.random.default_rng(ft_ss))
    return model


def bc_evaluate(model: BcModel, spec: TaskSpec, gap: DomainGap, episodes: int, seed: int) -> EvalResult:
    return run_episodes(lambda obs, rng: model.act(obs), spec, gap, episodes, seed)


def save_bc_model(path, model: BcModel, task: str = "", extra: dict | None = None) -> str:
    nets = (("encoder", model.encoder), ("policy", model.policy))
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "bc",
        "task": task,
        "simnorm_group": model.encoder.simnorm_group,
        "shapes": [[name, [list(a.shape) for a in net.arrays()], [l.activation for l in net.layers]]
                   for name, net in nets],
        "extra": extra or {},
    }
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                    for _, net in nets for a in net.arrays())
    return write_frame(path, header, body)


def load_bc_model(path) -> tuple[BcModel, dict]:
    head, flat = read_frame(path)
    if head.get("kind") != "bc":
        raise ValueError(f"checkpoint holds a {head.get('kind', 'world_model')!r} model, not a BC model")
    nets = {}
    pos = 0
    for name, shapes, acts in head["shapes"]:
        layers = []
        for i, act in enumerate(acts):
            w_shape, b_shape = shapes[2 * i], shapes[2 * i + 1]
            nw, nb = int(np.prod(w_shape)), int(np.prod(b_shape))
            w = flat[pos:pos + nw].reshape(w_shape).copy()
            pos += nw
            b = flat[pos:pos + nb].reshape(b_shape).copy()
            pos += nb
            layers.append(Layer(w, b, act))
        nets[name] = Mlp(layers, head["simnorm_group"])
    if pos != len(flat):
        raise ValueError("checkpoint body length does not match its header")
    return BcModel(nets["encoder"], nets["policy"]), head
