import numpy as np
import pytest

from helpers import fd_gradients, max_relative_error
from wmtransfer import baselines
from wmtransfer.baselines import (DIRECT, PRETRAIN_FINETUNE, BcModel, bc_evaluate, bc_train,
                                  load_bc_model, save_bc_model)
from wmtransfer.envs import IDENTITY_GAP, DomainGap, Episode, TaskSpec, generate_demos
from wmtransfer.policy import mle_loss, segment_weights
from wmtransfer.world_model import WorldModel, ModelConfig, save_checkpoint

REACH = TaskSpec.make("reach")
FAST = dict(steps=30, batch_size=32, hidden=16, latent_dim=8, finetune_steps=30)


def _bytes(m: BcModel) -> bytes:
    return b"".join(a.tobytes() for net in (m.encoder, m.policy) for a in net.arrays())


@pytest.fixture(scope="module")
def source():
    return generate_demos(REACH, IDENTITY_GAP, 3, seed=0)


@pytest.fixture(scope="module")
def target():
    return generate_demos(REACH, DomainGap((0.03, 0.03), 1.0), 3, seed=1)


def test_repeated_pair_drives_mean_action_to_it():
    s = np.full((11, 6), -0.4)
    a = np.tile([-0.6, 0.25], (10, 1))
    ends = np.zeros(10, bool)
    ends[-1] = True
    ep = Episode("reach", s, a, np.zeros(10, bool), ends)
    model = bc_train(REACH, DIRECT, [ep], steps=1500, batch_size=64)
    np.testing.assert_allclose(model.act(s[0]), [-0.6, 0.25], atol=0.02)


def test_zero_steps_keep_initialisation(target):
    init = BcModel.init(6, 2, seed=4, hidden=16, latent_dim=8)
    out = bc_train(REACH, DIRECT, target, steps=0, init=init)
    assert _bytes(out) == _bytes(init)
    assert out is not init


def test_mle_gradient_matches_finite_differences():
    m = BcModel.init(6, 2, seed=0, hidden=8, latent_dim=8)
    rng = np.random.default_rng(0)
    S, A = rng.uniform(-1, 1, (6, 6)), rng.uniform(-0.95, 0.95, (6, 2))
    w = segment_weights(2, 3, 0.5)
    _, ge, gp = mle_loss(m.encoder, m.policy, S, A, w)
    fn = lambda: mle_loss(m.encoder, m.policy, S, A, w)[0]
    assert max_relative_error(ge + gp, fd_gradients(fn, m.encoder.arrays() + m.policy.arrays())) <= 1e-4


def test_pretrain_phase_never_sees_target_data(source, target):
    # with no finetuning steps, pretrain+finetune is exactly direct training on the source demos
    pf = bc_train(REACH, PRETRAIN_FINETUNE, target, source_data=source, **{**FAST, "finetune_steps": 0})
    direct = bc_train(REACH, DIRECT, source, **FAST)
    assert _bytes(pf) == _bytes(direct)


def test_modes_share_the_supervised_path(source, target, monkeypatch):
    calls = []
    real = baselines.supervised_finetune

    def spy(enc, pol, data, *args):
        calls.append(data)
        return real(enc, pol, data, *args)

    monkeypatch.setattr(baselines, "supervised_finetune", spy)
    bc_train(REACH, PRETRAIN_FINETUNE, target, source_data=source, **FAST)
    assert calls == [source, target]


def test_finetune_phase_uses_adaptation_hyperparameters(source, target, monkeypatch):
    seen = []
    real = baselines.supervised_finetune

    def spy(enc, pol, data, steps, lr, wd, batch, horizon, lam, rng):
        seen.append((steps, lr, wd, horizon))
        return real(enc, pol, data, steps, lr, wd, batch, horizon, lam, rng)

    monkeypatch.setattr(baselines, "supervised_finetune", spy)
    bc_train(REACH, PRETRAIN_FINETUNE, target, source_data=source, steps=5, finetune_steps=7,
             batch_size=16, hidden=16, latent_dim=8)
    assert seen[1] == (7, 1e-5, 1e-4, 3)


def test_bad_arguments_rejected(target):
    with pytest.raises(ValueError):
        bc_train(REACH, "other", target)
    with pytest.raises(ValueError):
        bc_train(REACH, DIRECT, [])
    with pytest.raises(ValueError):
        bc_train(REACH, PRETRAIN_FINETUNE, target)


def test_training_is_seeded(target):
    assert _bytes(bc_train(REACH, DIRECT, target, seed=3, **FAST)) == \
        _bytes(bc_train(REACH, DIRECT, target, seed=3, **FAST))


def test_evaluation_seeded_and_bounded(target):
    m = bc_train(REACH, DIRECT, target, **FAST)
    a = bc_evaluate(m, REACH, IDENTITY_GAP, 5, seed=2)
    b = bc_evaluate(m, REACH, IDENTITY_GAP, 5, seed=2)
    assert a == b and 0.0 <= a.success_rate <= 1.0


def test_untrained_bc_rarely_inserts():
    spec = TaskSpec.make("insert")
    m = BcModel.init(spec.state_dim, spec.action_dim, seed=0)
    assert bc_evaluate(m, spec, IDENTITY_GAP, 100, seed=0).success_rate <= 0.05


def test_bc_checkpoint_roundtrip(tmp_path, target):
    m = bc_train(REACH, DIRECT, target, **FAST)
    digest = save_bc_model(tmp_path / "bc.ckpt", m, task="reach", extra={"mode": "direct"})
    back, head = load_bc_model(tmp_path / "bc.ckpt")
    assert _bytes(back) == _bytes(m) and head["extra"] == {"mode": "direct"}
    assert save_bc_model(tmp_path / "again.ckpt", back, task="reach", extra={"mode": "direct"}) == digest
    save_checkpoint(tmp_path / "wm.ckpt", WorldModel(ModelConfig(s_dim=6, a_dim=2), seed=0))
    with pytest.raises(ValueError):
        load_bc_model(tmp_path / "wm.ckpt")
