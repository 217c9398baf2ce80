import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import fd_gradients, max_relative_error, reference_forward
from wmtransfer.buffers import SegmentBatch
from wmtransfer.nn import Layer, Mlp, log_softmax, mlp_apply, simnorm, two_hot_encode
from wmtransfer.policy import mle_loss, policy_log_prob as net_log_prob, segment_weights
from wmtransfer.world_model import (ModelConfig, RewardNormalizer, WorldModel, _time_major, bonus,
                                    cdred_reward, compute_model_losses, compute_policy_loss,
                                    critic_value, ema_update, encode, latent_step, load_checkpoint,
                                    mix_reward, normalized_reward, policy_sample, save_checkpoint)

TINY = dict(hidden=8, latent_dim=8, embed_dim=4, num_targets=3, num_bins=11, v_min=-2.0, v_max=2.0)


def tiny_model(transform="identity", seed=1, **kw):
    cfg = ModelConfig(s_dim=4, a_dim=2, value_transform=transform, **{**TINY, **kw})
    m = WorldModel(cfg, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for q in m.critics:
        q.layers[-1].weight[:] = rng.normal(0, 0.3, q.layers[-1].weight.shape)
    for q, qt in zip(m.critics, m.critic_targets):
        qt.load_arrays([a + rng.normal(0, 0.05, a.shape) for a in q.arrays()])
    return m


def tiny_batch(rng, B=5, H=3, expert=None):
    S = rng.uniform(-1, 1, (B, H + 1, 4))
    A = rng.uniform(-1, 1, (B, H, 2))
    if expert is None:
        expert = np.arange(B) % 2 == 0
    return SegmentBatch(S, A, np.zeros((B, H), bool), np.asarray(expert, bool))


def _triples(net):
    return [(l.weight, l.bias, l.activation) for l in net.layers]


# ---------------------------------------------------------- encoder, dynamics


def test_encode_on_simplex_deterministic_and_matches_oracle():
    m = WorldModel(ModelConfig(s_dim=6, a_dim=2), seed=0)
    s = np.random.default_rng(0).uniform(-1, 1, (7, 6))
    z = encode(m, s)
    np.testing.assert_allclose(z.reshape(7, -1, 8).sum(-1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(z, encode(m, s))
    np.testing.assert_allclose(z, reference_forward(_triples(m.encoder), s, 8), atol=1e-12)


def test_latent_step_on_simplex_deterministic_and_matches_oracle():
    m = WorldModel(ModelConfig(s_dim=6, a_dim=2), seed=0)
    rng = np.random.default_rng(1)
    z = encode(m, rng.uniform(-1, 1, (4, 6)))
    a = rng.uniform(-1, 1, (4, 2))
    z2 = latent_step(m, z, a)
    np.testing.assert_allclose(z2.reshape(4, -1, 8).sum(-1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(z2, latent_step(m, z, a))
    oracle = reference_forward(_triples(m.dynamics), np.concatenate([z, a], 1), 8)
    np.testing.assert_allclose(z2, oracle, atol=1e-12)


def test_target_ensemble_stack_matches_members():
    m = WorldModel(ModelConfig(s_dim=6, a_dim=2), seed=0)
    za = np.random.default_rng(0).normal(size=(5, 18))
    stacked = m.target_outputs(za)
    for k, t in enumerate(m.targets):
        np.testing.assert_allclose(stacked[k], mlp_apply(t, za), atol=1e-12)


# ------------------------------------------------------------------ bonuses


def _const_net(out):
    # maps anything to ``out`` regardless of input
    return Mlp([Layer(np.zeros((len(out), 3)), np.asarray(out, float), "identity")])


def test_bonus_zero_when_predictor_equals_single_target():
    rng = np.random.default_rng(0)
    t = Mlp.init([3, 5, 4], rng)
    z, a = rng.normal(size=(6, 2)), rng.normal(size=(6, 1))
    np.testing.assert_array_equal(bonus(z, a, t.copy(), [t]), 0.0)


def test_bonus_two_target_arithmetic():
    # predictor (0,0) against targets (1,0) and (0,1): distance to their mean (0.5, 0.5)
    z, a = np.zeros((1, 2)), np.zeros((1, 1))
    b = bonus(z, a, _const_net([0, 0]), [_const_net([1, 0]), _const_net([0, 1])])
    assert b[0] == pytest.approx(0.5)


@settings(max_examples=50)
@given(st.integers(1, 6), st.integers(0, 2**31))
def test_bonus_is_mean_target_error_minus_ensemble_spread(K, seed):
    rng = np.random.default_rng(seed)
    pred = Mlp.init([3, 5, 4], rng)
    targets = [Mlp.init([3, 5, 4], rng) for _ in range(K)]
    z, a = rng.normal(size=(4, 2)), rng.normal(size=(4, 1))
    x = np.concatenate([z, a], 1)
    f = mlp_apply(pred, x)
    outs = [mlp_apply(t, x) for t in targets]
    centre = sum(outs) / K
    per_target = sum(((f - o) ** 2).sum(-1) for o in outs) / K
    spread = sum(((o - centre) ** 2).sum(-1) for o in outs) / K
    b = bonus(z, a, pred, targets)
    assert np.all(b >= 0)
    np.testing.assert_allclose(b, per_target - spread, rtol=1e-9, atol=1e-12)


def test_model_bonuses_agree_with_standalone_bonus():
    m = WorldModel(ModelConfig(s_dim=6, a_dim=2), seed=2)
    rng = np.random.default_rng(0)
    z, a = encode(m, rng.uniform(-1, 1, (5, 6))), rng.uniform(-1, 1, (5, 2))
    b_e, b_b, _ = m.bonuses(np.concatenate([z, a], 1))
    np.testing.assert_allclose(b_e, bonus(z, a, m.expert_pred, m.targets), rtol=1e-12)
    np.testing.assert_allclose(b_b, bonus(z, a, m.behav_pred, m.targets), rtol=1e-12)


# ------------------------------------------------------------------- reward


@pytest.mark.parametrize("zeta,b_e,b_b,expected", [
    (1.0, 0.5, 0.3, -0.5), (0.0, 0.9, 0.4, 0.4), (0.5, 0.2, 0.4, 0.1)])
def test_reward_mix_examples(zeta, b_e, b_b, expected):
    assert mix_reward(b_e, b_b, zeta) == pytest.approx(expected, abs=1e-15)


def test_reward_identity_by_recomputation():
    m = WorldModel(ModelConfig(s_dim=6, a_dim=2, zeta=0.6), seed=3)
    m.reward_norm = RewardNormalizer(mean_sq=0.37, count=4)
    rng = np.random.default_rng(0)
    z, a = encode(m, rng.uniform(-1, 1, (9, 6))), rng.uniform(-1, 1, (9, 2))
    scale = m.reward_norm.scale
    b_e = bonus(z, a, m.expert_pred, m.targets) / scale
    b_b = bonus(z, a, m.behav_pred, m.targets) / scale
    np.testing.assert_allclose(cdred_reward(m, z, a), -0.6 * b_e + 0.4 * b_b, rtol=0, atol=1e-12)


@given(st.floats(0.0, 10.0), st.floats(0.0, 10.0), st.floats(0.01, 0.99), st.floats(1e-3, 1.0))
def test_reward_monotone_in_each_bonus(b_e, b_b, zeta, d):
    r = normalized_reward(b_e, b_b, zeta, 1.3)
    assert normalized_reward(b_e + d, b_b, zeta, 1.3) < r
    assert normalized_reward(b_e, b_b + d, zeta, 1.3) > r


def test_normalizer_tracks_rms():
    n = RewardNormalizer()
    n.update(np.array([3.0, 4.0]), decay=0.5)
    assert n.mean_sq == pytest.approx(12.5) and n.count == 1
    n.update(np.array([1.0]), decay=0.5)
    assert n.mean_sq == pytest.approx(6.75)


def test_invalid_reward_config_rejected():
    with pytest.raises(ValueError):
        ModelConfig(s_dim=2, a_dim=2, zeta=1.5)
    with pytest.raises(ValueError):
        ModelConfig(s_dim=2, a_dim=2, num_targets=0)


# ------------------------------------------------------------------- critic


def test_uniform_logits_decode_to_bin_midpoint():
    m = WorldModel(ModelConfig(s_dim=6, a_dim=2, value_transform="identity"), seed=0)
    z = encode(m, np.zeros((3, 6)))
    # the critic output layer is zero at init, so its logits are uniform
    np.testing.assert_allclose(critic_value(m, z, np.zeros((3, 2))), 0.0, atol=1e-12)


def test_critic_ensemble_reduced_by_minimum():
    cfg = ModelConfig(s_dim=6, a_dim=2, v_min=-10, v_max=10, num_bins=101, value_transform="identity")
    m = WorldModel(cfg, seed=0)
    for q, v in zip(m.critics, (2.0, 1.0)):
        q.layers[-1].weight[:] = 0.0
        q.layers[-1].bias[:] = np.log(two_hot_encode(v, cfg.bins) + 1e-300)
    z = encode(m, np.zeros((1, 6)))
    assert critic_value(m, z, np.zeros((1, 2)))[0] == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=30)
@given(st.integers(0, 2**31), st.floats(0.1, 50.0))
def test_identity_critic_value_within_bin_range(seed, scale):
    m = tiny_model("identity", seed=seed % 1000)
    rng = np.random.default_rng(seed)
    for q in m.critics:
        q.layers[-1].weight[:] = rng.normal(0, scale, q.layers[-1].weight.shape)
    z = encode(m, rng.uniform(-1, 1, (16, 4)))
    v = critic_value(m, z, rng.uniform(-1, 1, (16, 2)))
    assert np.all((v >= -2.0) & (v <= 2.0))


def test_symlog_critic_value_within_transformed_range():
    m = tiny_model("symlog")
    rng = np.random.default_rng(0)
    for q in m.critics:
        q.layers[-1].weight[:] = rng.normal(0, 30.0, q.layers[-1].weight.shape)
    v = critic_value(m, encode(m, rng.uniform(-1, 1, (32, 4))), rng.uniform(-1, 1, (32, 2)))
    lim = np.expm1(2.0)
    assert np.all(np.abs(v) <= lim + 1e-9)


# ------------------------------------------------------------------- policy


def test_policy_sample_collapses_to_tanh_mean():
    m = WorldModel(ModelConfig(s_dim=6, a_dim=2), seed=0)
    last = m.policy.layers[-1]
    last.weight[2:] = 0.0
    last.bias[2:] = -50.0  # log_std saturates at its floor
    z = encode(m, np.zeros((1, 6)))
    mu = mlp_apply(m.policy, z)[:, :2]
    a, _ = policy_sample(m, z, np.random.default_rng(0))
    # the floor log_std = -5 leaves sigma ~ 6.7e-3; tanh is 1-Lipschitz
    assert np.all(np.abs(a - np.tanh(mu)) <= 5 * np.exp(-5.0))


@pytest.mark.parametrize("mu,raw_std", [(0.0, 0.0), (1.5, -1.0), (-0.7, 0.5)])
def test_log_prob_integrates_to_one(mu, raw_std):
    net = Mlp([Layer(np.zeros((2, 1)), np.array([mu, raw_std]), "identity")])
    # integrate in u = atanh(a) so the endpoint singularities disappear
    u = np.linspace(-12, 12, 200_001)
    a = np.tanh(u)
    inner = np.abs(a) < 1 - 1e-6
    dens = np.exp(net_log_prob(net, np.zeros((inner.sum(), 1)), a[inner][:, None])) * (1 - a[inner] ** 2)
    total = np.trapezoid(dens, u[inner])
    assert total == pytest.approx(1.0, abs=1e-3)


def test_log_prob_gradient_matches_finite_differences():
    m = tiny_model()
    rng = np.random.default_rng(0)
    S = rng.uniform(-1, 1, (12, 4))
    A = rng.uniform(-0.99, 0.99, (12, 2))
    w = segment_weights(4, 3, 0.5)
    _, g_enc, g_pol = mle_loss(m.encoder, m.policy, S, A, w)
    fn = lambda: mle_loss(m.encoder, m.policy, S, A, w)[0]
    assert max_relative_error(g_pol, fd_gradients(fn, m.policy.arrays())) <= 1e-4
    assert max_relative_error(g_enc, fd_gradients(fn, m.encoder.arrays())) <= 1e-4


def test_log_prob_finite_at_action_bounds():
    m = WorldModel(ModelConfig(s_dim=6, a_dim=2), seed=0)
    z = encode(m, np.zeros((3, 6)))
    a = np.array([[1.0, -1.0], [0.999999999, 0.0], [-1.0, 1.0]])
    assert np.all(np.isfinite(net_log_prob(m.policy, z, a)))


# ------------------------------------------------------------- model losses


def reference_total_loss(m, batch, res, target_index, zt):
    """Scalar loss rebuilt step by step from forward passes only. The TD
    target, the reward-model latents and the consistency targets are held
    fixed, mirroring every stop-gradient of the analytic version."""
    cfg = m.cfg
    S, A = batch.states, batch.actions
    B, H = A.shape[:2]
    tp = two_hot_encode(m.to_bins(res.td_targets), cfg.bins)
    z = mlp_apply(m.encoder, S[:, 0])
    e = batch.expert
    total = 0.0
    for t in range(H):
        w = cfg.lam ** t
        za = np.concatenate([z, A[:, t]], 1)
        for q in m.critics:
            ce = -(tp[t * B:(t + 1) * B] * log_softmax(mlp_apply(q, za))).sum(-1)
            total += w * ce.mean() / cfg.num_q
        zd = np.concatenate([res.latents[t], A[:, t]], 1)
        tg = np.stack([mlp_apply(m.targets[target_index[t * B + b]], zd[b]) for b in range(B)])
        if e.any():
            total += w * (((mlp_apply(m.expert_pred, zd) - tg) ** 2).sum(-1) * e).sum() / e.sum()
        if (~e).any():
            total += w * (((mlp_apply(m.behav_pred, zd) - tg) ** 2).sum(-1) * ~e).sum() / (~e).sum()
        z = mlp_apply(m.dynamics, za)
        total += w * ((z - zt[t]) ** 2).sum(-1).mean()
    return total


@pytest.mark.parametrize("transform", ["identity", "symlog"])
def test_model_loss_gradients_match_finite_differences(transform):
    m = tiny_model(transform)
    rng = np.random.default_rng(0)
    batch = tiny_batch(rng)
    ti = rng.integers(0, m.cfg.num_targets, 15)
    tn = rng.standard_normal((15, 2))
    res = compute_model_losses(m, batch, rng, ti, tn)
    H, B = 3, 5
    zt = mlp_apply(m.encoder, _time_major(batch.states[:, 1:])).reshape(H, B, -1)
    fn = lambda: reference_total_loss(m, batch, res, ti, zt)
    L = res.losses
    assert fn() == pytest.approx(L.consistency + L.critic_ce + L.reward_T1 + L.reward_T2, rel=1e-12)
    for name, grads in res.grads.items():
        assert max_relative_error(grads, fd_gradients(fn, m.net(name).arrays())) <= 1e-4, name


def test_consistency_zero_when_prediction_matches_encoding():
    m = tiny_model()
    # both networks emit the same constant latent
    for net in (m.encoder, m.dynamics):
        net.layers[-1].weight[:] = 0.0
        net.layers[-1].bias[:] = np.arange(8.0)
    res = compute_model_losses(m, tiny_batch(np.random.default_rng(0)), np.random.default_rng(1))
    assert res.losses.consistency == 0.0


def test_reward_terms_masked_by_source():
    m = tiny_model()
    rng = np.random.default_rng(0)
    all_exp = compute_model_losses(m, tiny_batch(rng, expert=[True] * 5), rng)
    assert all_exp.losses.reward_T2 == 0.0 and all_exp.losses.reward_T1 > 0
    assert all(not g.any() for g in all_exp.grads["behav_pred"])
    all_beh = compute_model_losses(m, tiny_batch(rng, expert=[False] * 5), rng)
    assert all_beh.losses.reward_T1 == 0.0 and all_beh.losses.reward_T2 > 0
    assert all(not g.any() for g in all_beh.grads["expert_pred"])


def test_td_path_sends_nothing_into_reward_model():
    m = tiny_model()
    rng = np.random.default_rng(0)
    batch = tiny_batch(rng)
    ti, tn = rng.integers(0, 3, 15), rng.standard_normal((15, 2))
    a = compute_model_losses(m, batch, rng, ti, tn)
    # reshaping the target critic moves every TD target but must leave the predictor gradients alone
    for qt in m.critic_targets:
        qt.load_arrays([x * 3.0 + 0.1 for x in qt.arrays()])
    b = compute_model_losses(m, batch, rng, ti, tn)
    assert not np.allclose(a.td_targets, b.td_targets)
    for name in ("expert_pred", "behav_pred"):
        for x, y in zip(a.grads[name], b.grads[name]):
            np.testing.assert_array_equal(x, y)
    assert not any(k.startswith(("target", "critic_target")) for k in a.grads)


def test_losses_finite_for_extreme_inputs():
    m = tiny_model("symlog")
    rng = np.random.default_rng(0)
    batch = tiny_batch(rng)
    batch.states *= 1e6
    batch.actions[:] = np.sign(batch.actions)
    res = compute_model_losses(m, batch, rng)
    res.losses.check()
    loss, ent, _ = compute_policy_loss(m, res.latents, rng)
    assert np.isfinite(loss) and np.isfinite(ent)


# ------------------------------------------------------------------ policy loss


@pytest.mark.parametrize("transform", ["identity", "symlog"])
def test_policy_loss_gradient_matches_finite_differences(transform):
    m = tiny_model(transform)
    rng = np.random.default_rng(0)
    lat = simnorm(rng.normal(size=(3, 5, 8)), 8)
    noise = rng.standard_normal((15, 2))
    _, _, grads = compute_policy_loss(m, lat, rng, noise=noise)
    fn = lambda: compute_policy_loss(m, lat, rng, noise=noise)[0]
    assert max_relative_error(grads["policy"], fd_gradients(fn, m.policy.arrays())) <= 1e-4


def test_policy_loss_touches_only_the_policy():
    m = tiny_model()
    rng = np.random.default_rng(0)
    lat = simnorm(rng.normal(size=(3, 5, 8)), 8)
    _, _, grads = compute_policy_loss(m, lat, rng)
    for name, g in grads.items():
        if name != "policy":
            assert all(not x.any() for x in g), name
    assert any(x.any() for x in grads["policy"])


def test_flat_critic_and_zero_entropy_weight_give_zero_gradient():
    m = tiny_model(beta=0.0)
    for q in m.critics:
        q.layers[-1].weight[:] = 0.0
    rng = np.random.default_rng(0)
    _, _, grads = compute_policy_loss(m, simnorm(rng.normal(size=(2, 4, 8)), 8), rng)
    assert all(np.abs(g).max() == 0.0 for g in grads["policy"])


# ----------------------------------------------------------------------- EMA


def test_ema_full_step_copies():
    m = tiny_model()
    ema_update(m, 1.0)
    for q, qt in zip(m.critics, m.critic_targets):
        for x, y in zip(q.arrays(), qt.arrays()):
            np.testing.assert_array_equal(x, y)


def test_ema_two_small_steps_closed_form():
    m = tiny_model()
    online = [a.copy() for a in m.critics[0].arrays()]
    start = [a.copy() for a in m.critic_targets[0].arrays()]
    ema_update(m, 0.01)
    ema_update(m, 0.01)
    for o, s, got in zip(online, start, m.critic_targets[0].arrays()):
        np.testing.assert_allclose(got, 0.99 ** 2 * s + (1 - 0.99 ** 2) * o, rtol=1e-12, atol=1e-15)


def test_ema_fixed_point_and_tau_validation():
    m = tiny_model()
    ema_update(m, 1.0)
    before = m.param_bytes(["critic_target0", "critic_target1"])
    ema_update(m, 0.3)
    after = m.param_bytes(["critic_target0", "critic_target1"])
    np.testing.assert_allclose(np.frombuffer(before), np.frombuffer(after), rtol=1e-15)
    for tau in (0.0, 1.5):
        with pytest.raises(ValueError):
            ema_update(m, tau)


# -------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    m = tiny_model("symlog", seed=4)
    m.reward_norm = RewardNormalizer(0.123456789, 77)
    path = tmp_path / "m.ckpt"
    digest = save_checkpoint(path, m, task="push", extra={"note": 1})
    back, head = load_checkpoint(path)
    assert back.param_bytes() == m.param_bytes()
    assert back.digest() == m.digest()
    assert back.cfg == m.cfg and head["task"] == "push" and head["extra"] == {"note": 1}
    assert head["K"] == 3 and head["bins"] == [-2.0, 2.0, 11]
    assert save_checkpoint(tmp_path / "again.ckpt", back, task="push", extra={"note": 1}) == digest


def test_checkpoint_rejects_foreign_or_truncated_files(tmp_path):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"hello world")
    with pytest.raises(ValueError):
        load_checkpoint(bad)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tiny_model())
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(path)
