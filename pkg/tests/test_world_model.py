import numpy as np
import pytest

from euclid import nn_core as nn
from euclid.envs import TWO_MODE_MATRICES
from euclid.mcl import MCLConfig, PolicyEnsemble
from euclid.world_model import (Actor, BatchError, HeadIndexError, ModelConfig, WorldModel,
                                actor_loss, model_loss, policy_action, train_actor, train_model)
from oracles import central_difference, loop_mlp, max_relative_error, net_arrays


def small_model(seed=0, state_dim=3, action_dim=2, heads=2, horizon=2, **kw):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(latent_dim=4, hidden_dim=8, enc_hidden_dim=8, num_heads=heads,
                      rollout_horizon=horizon, **kw)
    model = WorldModel(state_dim, action_dim, cfg, rng)
    actor = Actor(4, action_dim, 8, rng)
    return model, actor


def random_batch(model, seed=1, batch=3):
    rng = np.random.default_rng(seed)
    H1 = model.cfg.rollout_horizon + 1
    s = rng.standard_normal((batch, H1, model.state_dim))
    a = rng.uniform(-1, 1, (batch, H1, model.action_dim))
    ns = rng.standard_normal((batch, H1, model.state_dim))
    r = rng.uniform(0, 1, (batch, H1))
    return s, a, r, ns


# ---------------------------------------------------------------- forward pieces

def test_encode_deterministic_and_matches_oracle():
    model, _ = small_model()
    s = np.random.default_rng(5).standard_normal(3)
    z1, z2 = model.encode(s), model.encode(s)
    assert z1.tobytes() == z2.tobytes()
    np.testing.assert_allclose(z1, loop_mlp(*net_arrays(model.store, model.encoder), s), atol=1e-12)
    assert z1.shape == (model.cfg.latent_dim,)


def test_identity_encoder_returns_input():
    cfg = ModelConfig(latent_dim=3, hidden_dim=4, num_heads=1, linear=True)
    model = WorldModel(3, 1, cfg, np.random.default_rng(0))
    model.store.load_values({"enc.W0": np.eye(3), "enc.b0": np.zeros(3)})
    np.testing.assert_array_equal(model.encode(np.array([1.0, -2.0, 0.5])), [1.0, -2.0, 0.5])


def test_encode_dimension_mismatch():
    model, _ = small_model()
    with pytest.raises(nn.ShapeError):
        model.encode(np.zeros(5))


def test_identical_heads_give_identical_predictions():
    model, _ = small_model()
    model.store.load_values({k.replace("head0", "head1"): model.store[k]
                             for k in model.heads[0].param_names()})
    rng = np.random.default_rng(2)
    z, a = rng.standard_normal((20, 4)), rng.uniform(-1, 1, (20, 2))
    np.testing.assert_array_equal(model.predict_next(z, a, 0), model.predict_next(z, a, 1))


def test_predict_next_composition_oracle():
    model, _ = small_model()
    rng = np.random.default_rng(3)
    z, a = rng.standard_normal(4), rng.uniform(-1, 1, 2)
    x = np.concatenate([z, a])
    hidden = loop_mlp(*net_arrays(model.store, model.backbone), x, out_act="elu")
    expected = loop_mlp(*net_arrays(model.store, model.heads[1]), hidden)
    np.testing.assert_allclose(model.predict_next(z, a, 1), expected, atol=1e-12)


def test_head_index_checked():
    model, _ = small_model()
    with pytest.raises(HeadIndexError):
        model.predict_next(np.zeros(4), np.zeros(2), 2)
    with pytest.raises(HeadIndexError):
        model_loss(model, _, *random_batch(model), head=-1)


def test_zero_weight_reward_and_critic():
    model, _ = small_model()
    zeros = {k: np.zeros_like(model.store[k])
             for k in model.reward_net.param_names() + model.critic.param_names()}
    model.store.load_values(zeros)
    rng = np.random.default_rng(0)
    z, a = rng.standard_normal((7, 4)), rng.uniform(-1, 1, (7, 2))
    np.testing.assert_array_equal(model.predict_reward(z, a), 0.0)
    np.testing.assert_array_equal(model.q_value(z, a), 0.0)


def test_reward_and_critic_match_oracle():
    model, _ = small_model(seed=4)
    rng = np.random.default_rng(4)
    z, a = rng.standard_normal(4), rng.uniform(-1, 1, 2)
    x = np.concatenate([z, a])
    assert model.predict_reward(z, a) == pytest.approx(
        loop_mlp(*net_arrays(model.store, model.reward_net), x)[0], abs=1e-12)
    assert model.q_value(z, a) == pytest.approx(
        loop_mlp(*net_arrays(model.store, model.critic), x)[0], abs=1e-12)


def test_policy_bounded_and_matches_oracle():
    _, actor = small_model()
    z = np.random.default_rng(0).standard_normal((10_000, 4)) * 10
    a = policy_action(actor, z)
    assert np.all(np.abs(a) <= 1.0)
    np.testing.assert_allclose(a[0], loop_mlp(*net_arrays(actor.store, actor.net), z[0], "tanh"),
                               atol=1e-12)


def test_reward_regression_to_constant():
    model, actor = small_model(seed=6, horizon=1)
    rng = np.random.default_rng(6)
    for _ in range(400):
        s, a, _, ns = random_batch(model, seed=int(rng.integers(1 << 30)), batch=16)
        train_model(model, actor, s, a, np.ones((16, 2)), ns, head=0, lr=1e-2)
    s, a, _, _ = random_batch(model, seed=999, batch=50)
    pred = model.predict_reward(model.encode(s[:, 0]), a[:, 0])
    assert np.max(np.abs(pred - 1.0)) < 0.01


# ---------------------------------------------------------------- model loss

def test_perfect_prediction_gives_zero_consistency():
    A, B = TWO_MODE_MATRICES["A"]
    cfg = ModelConfig(latent_dim=2, hidden_dim=4, num_heads=1, rollout_horizon=3, linear=True)
    model = WorldModel(2, 2, cfg, np.random.default_rng(0))
    actor = Actor(2, 2, 8, np.random.default_rng(1))
    exact = {"enc.W0": np.eye(2), "enc.b0": np.zeros(2),
             "dyn.backbone.W0": np.eye(4), "dyn.backbone.b0": np.zeros(4),
             "dyn.head0.W0": np.vstack([A.T, B.T]), "dyn.head0.b0": np.zeros(2)}
    model.store.load_values(exact)
    model.target.shadow.update({k: v.copy() for k, v in exact.items() if k.startswith("enc")})
    rng = np.random.default_rng(2)
    s = np.empty((5, 4, 2))
    a = rng.uniform(-1, 1, (5, 4, 2))
    ns = np.empty_like(s)
    cur = rng.standard_normal((5, 2))
    for i in range(4):
        s[:, i] = cur
        cur = cur @ A.T + a[:, i] @ B.T
        ns[:, i] = cur
    res = model_loss(model, actor, s, a, np.zeros((5, 4)), ns, head=0)
    assert res.parts["consistency"] < 1e-28


def test_bellman_identity_gives_zero_value_term():
    model, actor = small_model(horizon=0)
    critic_zero = {k: np.zeros_like(model.store[k]) for k in model.critic.param_names()}
    out_bias = model.critic.param_names()[-1]
    model.store.load_values(dict(critic_zero, **{out_bias: np.array([2.98])}))
    model.target.shadow.update(dict(critic_zero, **{out_bias: np.array([2.0])}))
    s, a, _, ns = random_batch(model, batch=4)
    res = model_loss(model, actor, s, a, np.ones((4, 1)), ns, head=0)
    assert res.parts["value"] < 1e-28


def _fd_model_loss(model, actor, batch, head):
    s, a, r, ns = batch
    names = model.trainable_names(head)
    leaves = model.store.leaves(names)
    analytic = model_loss(model, actor, s, a, r, ns, head, params=leaves).grads

    def f(vals):
        return model_loss(model, actor, s, a, r, ns, head, params=vals, with_grad=False).total

    numeric = central_difference(f, dict(model.store.values), names)
    return analytic, numeric


@pytest.mark.parametrize("weights", [
    dict(c_reward=0.5, c_consistency=2.0, c_value=0.1),
    dict(c_reward=1.0, c_consistency=0.0, c_value=0.0),
    dict(c_reward=0.0, c_consistency=1.0, c_value=0.0),
    dict(c_reward=0.0, c_consistency=0.0, c_value=1.0),
    dict(c_reward=0.5, c_consistency=2.0, c_value=0.1, rho=0.5),
])
def test_model_loss_gradients_match_finite_differences(weights):
    model, actor = small_model(seed=8, **weights)
    analytic, numeric = _fd_model_loss(model, actor, random_batch(model, seed=9), head=1)
    assert max_relative_error(analytic, numeric) < 1e-4


def test_model_loss_is_sum_over_window_mean_over_batch():
    model, actor = small_model(horizon=1)
    s, a, r, ns = random_batch(model, batch=2)
    res = model_loss(model, actor, s, a, r, ns, head=0, with_grad=False)
    z_tgt = model.encode_target(ns)
    y = r + 0.99 * model.q_target(z_tgt, actor(z_tgt))
    rew = cons = val = 0.0
    z = model.encode(s[:, 0])
    for i in range(2):
        rew += np.mean((model.predict_reward(z, a[:, i]) - r[:, i]) ** 2)
        val += np.mean((model.q_value(z, a[:, i]) - y[:, i]) ** 2)
        z = model.predict_next(z, a[:, i], 0)
        cons += np.mean(np.sum((z - z_tgt[:, i]) ** 2, axis=-1))
    assert res.parts["reward"] == pytest.approx(rew, rel=1e-12)
    assert res.parts["consistency"] == pytest.approx(cons, rel=1e-12)
    assert res.parts["value"] == pytest.approx(val, rel=1e-12)
    assert res.total == pytest.approx(0.5 * rew + 2 * cons + 0.1 * val, rel=1e-12)


def test_targets_never_receive_gradients():
    model, actor = small_model()
    res = model_loss(model, actor, *random_batch(model), head=0)
    assert set(res.grads) <= set(model.trainable_names(0))
    before = {k: v.copy() for k, v in model.target.shadow.items()}
    model.target.shadow = {k: v + 0.3 for k, v in before.items()}
    res2 = model_loss(model, actor, *random_batch(model), head=0)
    assert res2.total != res.total
    assert set(res2.grads) == set(res.grads)


def test_head_isolation():
    model, actor = small_model(heads=3)
    before = model.store.snapshot()
    train_model(model, actor, *random_batch(model), head=1, lr=1e-2)
    trainable = set(model.trainable_names(1))
    for k, v in before.items():
        changed = v.tobytes() != model.store[k].tobytes()
        if k.startswith("dyn.head0") or k.startswith("dyn.head2"):
            assert not changed, k
        elif k in trainable:
            assert changed, k


def test_malformed_batches_rejected():
    model, actor = small_model()
    s, a, r, ns = random_batch(model)
    with pytest.raises(BatchError):
        model_loss(model, actor, s[:, :2], a, r, ns, head=0)
    with pytest.raises(BatchError):
        model_loss(model, actor, s, a[:, :, :1], r, ns, head=0)
    with pytest.raises(BatchError):
        model_loss(model, actor, s, a, r[:, :2], ns, head=0)
    r_nan = r.copy()
    r_nan[0, 1] = np.nan
    with pytest.raises(BatchError):
        model_loss(model, actor, s, a, r_nan, ns, head=0)


def test_linear_model_learns_exact_linear_system():
    A, B = TWO_MODE_MATRICES["A"]
    rng = np.random.default_rng(0)
    cfg = ModelConfig(latent_dim=2, hidden_dim=4, num_heads=1, rollout_horizon=1, linear=True)
    model = WorldModel(2, 2, cfg, rng)
    actor = Actor(2, 2, 8, rng)

    def region_a_windows(n, H1):
        s, a = np.empty((n, H1, 2)), rng.uniform(-1, 1, (n, H1, 2))
        ns = np.empty_like(s)
        cur = np.column_stack([rng.uniform(0.5, 1.5, n), rng.uniform(-0.5, 0.5, n)])
        for i in range(H1):
            s[:, i] = cur
            cur = cur @ A.T + a[:, i] @ B.T
            ns[:, i] = cur
        return s, a, ns

    for _ in range(1200):
        s, a, ns = region_a_windows(64, 2)
        train_model(model, actor, s, a, np.zeros((64, 2)), ns, head=0, lr=1e-2)
    s, a, ns = region_a_windows(500, 1)
    pred = model.predict_next(model.encode(s[:, 0]), a[:, 0], 0)
    tgt = model.encode_target(ns[:, 0])
    err = np.mean(np.sum((pred - tgt) ** 2, axis=-1))
    spread = np.mean(np.sum((tgt - tgt.mean(axis=0)) ** 2, axis=-1))
    assert err < 1e-3
    assert err / spread < 1e-2  # not a collapsed encoder


# ---------------------------------------------------------------- actor loss

def _actor_setup(seed=10, snapshots=2, sigma=0.2):
    model, actor = small_model(seed=seed)
    ens = PolicyEnsemble(actor, MCLConfig(num_heads=4, snapshot_interval=1, sigma_explore=sigma))
    rng = np.random.default_rng(seed)
    for t in range(snapshots):
        ens.maybe_snapshot(t)
        actor.store.load_values({k: v + 0.3 * rng.standard_normal(v.shape)
                                 for k, v in actor.store.values.items()})
    latents = rng.standard_normal((6, 4))
    return model, actor, ens, latents


def test_actor_loss_empty_ensemble_is_ddpg():
    model, actor, ens, z = _actor_setup(snapshots=0)
    assert ens.diversity_fn() is None
    res = actor_loss(actor, model, z, diversity=ens.diversity_fn(), alpha=0.1)
    ddpg = actor_loss(actor, model, z)
    assert res.total == pytest.approx(-np.mean(model.q_value(z, actor(z))), rel=1e-14)
    assert all(res.grads[k].tobytes() == ddpg.grads[k].tobytes() for k in ddpg.grads)


def test_actor_loss_alpha_zero_is_ddpg():
    model, actor, ens, z = _actor_setup()
    res = actor_loss(actor, model, z, diversity=ens.diversity_fn(), alpha=0.0)
    ddpg = actor_loss(actor, model, z)
    assert all(res.grads[k].tobytes() == ddpg.grads[k].tobytes() for k in ddpg.grads)
    assert res.parts["divergence"] > 0


@pytest.mark.parametrize("alpha", [0.0, 0.1, 2.0])
def test_actor_loss_gradients_match_finite_differences(alpha):
    model, actor, ens, z = _actor_setup()
    div = ens.diversity_fn()
    analytic = actor_loss(actor, model, z, diversity=div, alpha=alpha).grads

    def f(vals):
        return actor_loss(actor, model, z, diversity=div, alpha=alpha, params=vals,
                          with_grad=False).total

    numeric = central_difference(f, dict(actor.store.values))
    assert max_relative_error(analytic, numeric) < 1e-4


def test_actor_loss_leaves_critic_untouched():
    model, actor, ens, z = _actor_setup()
    before = model.store.snapshot()
    res = train_actor(actor, model, z, 1e-2, diversity=ens.diversity_fn(), alpha=0.1)
    assert set(res.grads) == set(actor.store.keys())
    assert all(before[k].tobytes() == model.store[k].tobytes() for k in before)


def test_skill_conditioned_actor_needs_context():
    rng = np.random.default_rng(0)
    actor = Actor(4, 2, 8, rng, context_dim=3)
    with pytest.raises(nn.ShapeError):
        actor(np.zeros(4))
    out = actor(np.zeros((5, 4)), np.eye(3)[1])
    assert out.shape == (5, 2)
