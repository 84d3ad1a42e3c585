import numpy as np
import pytest

from euclid.planner import (FULL_SCALE_PLANNER, PlanDistribution, PlannerConfig, plan,
                            score_trajectories, score_trajectory)
from euclid.world_model import Actor, ModelConfig, WorldModel


class StubModel:
    """Latent model with closed-form reward, value and dynamics."""

    def __init__(self, reward, q=lambda z, a: np.zeros(len(z)), step=lambda z, a: z):
        self.reward, self.q, self.step = reward, q, step

    def predict_reward(self, z, a):
        return self.reward(z, a)

    def q_value(self, z, a):
        return self.q(z, a)

    def predict_next(self, z, a, head):
        return self.step(z, a)


class ConstantActor:
    def __init__(self, action):
        self.action = np.asarray(action, dtype=np.float64)
        self.action_dim = len(self.action)

    def __call__(self, z, context=None):
        z = np.asarray(z)
        return np.broadcast_to(self.action, z.shape[:-1] + (self.action_dim,)).copy()


def quadratic_bandit(target=0.3):
    return StubModel(lambda z, a: -(a[:, 0] - target) ** 2)


def random_nets(seed=0):
    rng = np.random.default_rng(seed)
    model = WorldModel(3, 2, ModelConfig(latent_dim=4, hidden_dim=16, enc_hidden_dim=16,
                                         num_heads=2), rng)
    return model, Actor(4, 2, 16, rng)


# ---------------------------------------------------------------- scoring

def test_one_step_score():
    model = StubModel(lambda z, a: np.ones(len(z)), q=lambda z, a: np.full(len(z), 2.0))
    got = score_trajectory(model, ConstantActor([0.0]), np.zeros(1), np.zeros((1, 1)), 0, 0.99)
    assert got == pytest.approx(2.98, abs=1e-12)


def test_zero_reward_and_value_score_zero():
    model = StubModel(lambda z, a: np.zeros(len(z)))
    acts = np.random.default_rng(0).uniform(-1, 1, (9, 4, 2))
    np.testing.assert_array_equal(
        score_trajectories(model, ConstantActor([0.0, 0.0]), np.ones(3), acts, 0, 0.99), 0.0)


@pytest.mark.parametrize("head", [0, 1])
def test_score_matches_hand_rollout(head):
    model, actor = random_nets(1)
    rng = np.random.default_rng(2)
    z0 = rng.standard_normal(4)
    acts = rng.uniform(-1, 1, (6, 5, 2))
    got = score_trajectories(model, actor, z0, acts, head, 0.97)
    for n in range(6):
        z, total = z0[None], 0.0
        for t in range(5):
            a = acts[n, t][None]
            total += 0.97 ** t * float(model.predict_reward(z, a)[0])
            z = model.predict_next(z, a, head)
        total += 0.97 ** 5 * float(model.q_value(z, actor(z))[0])
        assert abs(got[n] - total) < 1e-12


# ---------------------------------------------------------------- config

def test_policy_count_rounds_half_up():
    assert PlannerConfig(**FULL_SCALE_PLANNER).num_policy == 26
    assert PlannerConfig(population=10, policy_fraction=0.05).num_policy == 1
    assert PlannerConfig(population=128).num_policy == 6


@pytest.mark.parametrize("bad", [dict(horizon=0), dict(iterations=0), dict(elites=0),
                                 dict(population=4, elites=5, policy_fraction=0.0),
                                 dict(policy_fraction=-0.1)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        PlannerConfig(**bad)


# ---------------------------------------------------------------- plan

@pytest.mark.parametrize("seed", range(20))
def test_quadratic_bandit_converges(seed):
    cfg = PlannerConfig(horizon=1, policy_fraction=0.0)
    action, _ = plan(quadratic_bandit(), ConstantActor([0.0]), cfg, np.zeros(1), 0,
                     np.random.default_rng(seed))
    assert abs(action[0] - 0.3) < 0.01


def test_policy_only_mixture_follows_optimal_policy():
    cfg = PlannerConfig(horizon=1, population=32, elites=4, policy_fraction=1.0,
                        init_std=0.05, min_std=0.05)
    assert cfg.num_policy == cfg.population
    action, _ = plan(quadratic_bandit(0.3), ConstantActor([0.3]), cfg, np.zeros(1), 0,
                     np.random.default_rng(0))
    assert abs(action[0] - 0.3) < 3 * cfg.policy_jitter


def test_sharp_temperature_recovers_best_sample():
    cfg = PlannerConfig(iterations=1, horizon=1, population=64, elites=3,
                        policy_fraction=0.0, temperature=1e3)
    model = StubModel(lambda z, a: -100.0 * np.abs(a[:, 0] - 0.3))
    action, _ = plan(model, ConstantActor([0.0]), cfg, np.zeros(1), 0, np.random.default_rng(4))
    samples = np.clip(cfg.init_std * np.random.default_rng(4).standard_normal((64, 1, 1)), -1, 1)
    best = samples[np.argmin(np.abs(samples[:, 0, 0] - 0.3)), 0]
    np.testing.assert_allclose(action, best, atol=1e-9)


def test_single_elite_is_the_best_sample():
    cfg = PlannerConfig(iterations=1, horizon=1, population=64, elites=1, policy_fraction=0.0)
    action, _ = plan(quadratic_bandit(-0.6), ConstantActor([0.0]), cfg, np.zeros(1), 0,
                     np.random.default_rng(5))
    samples = np.clip(cfg.init_std * np.random.default_rng(5).standard_normal((64, 1, 1)), -1, 1)
    assert action[0] == samples[np.argmax(-(samples[:, 0, 0] + 0.6) ** 2), 0, 0]


def test_action_within_bounds_even_when_optimum_is_outside():
    cfg = PlannerConfig(horizon=3, population=32, elites=4)
    model = StubModel(lambda z, a: 100.0 * a.sum(axis=-1))
    for seed in range(5):
        action, nxt = plan(model, ConstantActor([0.9, -0.9]), cfg, np.zeros(2), 0,
                           np.random.default_rng(seed))
        assert np.all(np.abs(action) <= 1.0) and np.all(np.abs(nxt.mean) <= 1.0)
        assert action.sum() > 0.0


def test_every_candidate_scored_each_iteration():
    cfg = PlannerConfig(population=40, elites=5, policy_fraction=0.25)
    model, actor = random_nets(3)
    _, _, info = plan(model, actor, cfg, np.zeros(4), 1, np.random.default_rng(0),
                      return_info=True)
    assert info.num_scored == [50] * cfg.iterations
    assert all(0 <= k <= cfg.elites for k in info.elite_from_policy)


def test_elites_can_come_from_the_policy():
    cfg = PlannerConfig(horizon=1, population=16, elites=4, policy_fraction=0.5)
    _, _, info = plan(quadratic_bandit(0.8), ConstantActor([0.8]), cfg, np.zeros(1), 0,
                      np.random.default_rng(0), return_info=True)
    assert info.elite_from_policy[0] > 0


def test_plan_is_pure():
    model, actor = random_nets(6)
    before = {k: v.tobytes() for k, v in {**model.store.values, **actor.store.values}.items()}
    cfg = PlannerConfig(population=32, elites=4)
    warm = PlanDistribution(np.full((5, 2), 0.1), np.full((5, 2), 0.3))
    warm_copy = warm.copy()
    a1, d1 = plan(model, actor, cfg, np.ones(4), 0, np.random.default_rng(9), warm_start=warm)
    a2, d2 = plan(model, actor, cfg, np.ones(4), 0, np.random.default_rng(9), warm_start=warm)
    after = {k: v.tobytes() for k, v in {**model.store.values, **actor.store.values}.items()}
    assert before == after
    assert a1.tobytes() == a2.tobytes() and d1.mean.tobytes() == d2.mean.tobytes()
    assert warm.mean.tobytes() == warm_copy.mean.tobytes()


def test_warm_start_shifts_mean_and_resets_std():
    cfg = PlannerConfig(horizon=4, population=32, elites=4, policy_fraction=0.0)
    model = StubModel(lambda z, a: -((a - 0.5) ** 2).sum(axis=-1))
    _, nxt, = plan(model, ConstantActor([-0.7]), cfg, np.zeros(1), 0, np.random.default_rng(1))
    assert nxt.mean.shape == (4, 1)
    assert nxt.mean[-1, 0] == pytest.approx(-0.7)
    np.testing.assert_array_equal(nxt.std, cfg.init_std)


def test_median_best_elite_score_non_decreasing():
    cfg = PlannerConfig(population=64, elites=6)
    model, actor = random_nets(7)
    z0 = np.random.default_rng(8).standard_normal(4)
    curves = [plan(model, actor, cfg, z0, 0, np.random.default_rng(s), return_info=True)[2].best_scores
              for s in range(25)]
    med = np.median(np.array(curves), axis=0)
    assert np.all(np.diff(med) >= -1e-12)
