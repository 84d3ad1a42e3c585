"""Policy-guided MPPI planning in latent space.

Each iteration scores ``population`` Gaussian action sequences plus
``num_policy`` sequences produced by rolling the actor through the learned
dynamics, keeps the top ``elites`` and refits the Gaussian with
exponentially weighted elite statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .world_model import Actor, WorldModel


@dataclass
class PlannerConfig:
    iterations: int = 6
    horizon: int = 5
    population: int = 128
    elites: int = 8
    policy_fraction: float = 0.05
    temperature: float = 0.5
    gamma: float = 0.99
    min_std: float = 0.05
    init_std: float = 0.5
    policy_jitter: float = 0.05
    jitter_policy: bool = True

    def __post_init__(self):
        if self.horizon < 1 or self.iterations < 1:
            raise ValueError("horizon and iterations must be >= 1")
        if not 1 <= self.elites <= self.population + self.num_policy:
            raise ValueError("elites must lie in [1, population + policy trajectories]")
        if self.policy_fraction < 0:
            raise ValueError("policy_fraction must be >= 0")

    @property
    def num_policy(self) -> int:
        # round half up: 0.05 * 512 = 25.6 -> 26
        return int(math.floor(self.policy_fraction * self.population + 0.5))


FULL_SCALE_PLANNER = dict(iterations=6, horizon=5, population=512, elites=12,
                          policy_fraction=0.05, temperature=0.5)


@dataclass
class PlanDistribution:
    mean: np.ndarray  # (horizon, action_dim)
    std: np.ndarray

    def copy(self) -> "PlanDistribution":
        return PlanDistribution(self.mean.copy(), self.std.copy())


def score_trajectories(model: WorldModel, actor: Actor, z0, actions, head: int,
                       gamma: float, context=None) -> np.ndarray:
    """Discounted model return of each action sequence, bootstrapped with the critic.

    ``actions`` is (n, L, action_dim); every row starts from ``z0``.
    """
    n, L, _ = actions.shape
    z = np.broadcast_to(z0, (n, len(z0))).copy()
    total = np.zeros(n)
    disc = 1.0
    for t in range(L):
        a = actions[:, t]
        total += disc * model.predict_reward(z, a)
        z = model.predict_next(z, a, head)
        disc *= gamma
    total += disc * model.q_value(z, actor(z, context))
    return total


def score_trajectory(model: WorldModel, actor: Actor, z0, actions, head: int,
                     gamma: float = 0.99, context=None) -> float:
    return float(score_trajectories(model, actor, z0, np.asarray(actions)[None], head,
                                    gamma, context)[0])


def policy_rollouts(model: WorldModel, actor: Actor, z0, n: int, horizon: int, head: int,
                    rng: np.random.Generator, jitter: float, context=None) -> np.ndarray:
    z = np.broadcast_to(z0, (n, len(z0))).copy()
    out = np.empty((n, horizon, actor.action_dim))
    for t in range(horizon):
        a = actor(z, context)
        if jitter > 0:
            a = np.clip(a + jitter * rng.standard_normal(a.shape), -1.0, 1.0)
        out[:, t] = a
        z = model.predict_next(z, a, head)
    return out


@dataclass
class PlanInfo:
    best_scores: list[float]
    num_scored: list[int]
    elite_from_policy: list[int]


def plan(model: WorldModel, actor: Actor, cfg: PlannerConfig, z0, head: int,
         rng: np.random.Generator, warm_start: PlanDistribution | None = None,
         context=None, return_info: bool = False):
    """Returns ``(first action, distribution for the next decision step)``.

    The returned distribution is already shifted one step forward in time,
    its last step filled with the actor's action at the predicted terminal
    latent of the current mean.  Only the mean carries over; the std is
    reset to ``init_std`` so that every decision step re-explores.
    """
    A = actor.action_dim
    L = cfg.horizon
    z0 = np.asarray(z0, dtype=np.float64)
    if warm_start is None:
        mean = np.zeros((L, A))
        std = np.full((L, A), cfg.init_std)
    else:
        mean, std = warm_start.mean.copy(), np.maximum(warm_start.std, cfg.min_std)
    n_pi = cfg.num_policy
    info = PlanInfo([], [], [])

    for _ in range(cfg.iterations):
        noise = rng.standard_normal((cfg.population, L, A))
        samples = np.clip(mean + std * noise, -1.0, 1.0)
        if n_pi:
            pol = policy_rollouts(model, actor, z0, n_pi, L, head, rng,
                                  cfg.policy_jitter if cfg.jitter_policy else 0.0, context)
            samples = np.concatenate([samples, pol])
        scores = score_trajectories(model, actor, z0, samples, head, cfg.gamma, context)
        elite_idx = np.argsort(-scores, kind="stable")[: cfg.elites]
        elite_scores = scores[elite_idx]
        elites = samples[elite_idx]
        w = np.exp(cfg.temperature * (elite_scores - elite_scores.max()))
        w /= w.sum()
        mean = np.einsum("k,kla->la", w, elites)
        std = np.sqrt(np.einsum("k,kla->la", w, (elites - mean) ** 2))
        std = np.maximum(std, cfg.min_std)
        mean = np.clip(mean, -1.0, 1.0)
        info.best_scores.append(float(elite_scores[0]))
        info.num_scored.append(len(samples))
        info.elite_from_policy.append(int(np.sum(elite_idx >= cfg.population)))

    action = np.clip(mean[0], -1.0, 1.0)

    # shift for the next decision step
    z = z0[None]
    for t in range(L):
        z = model.predict_next(z, mean[t][None], head)
    tail = actor(z, context)[0]
    nxt = PlanDistribution(np.concatenate([mean[1:], tail[None]]), np.full((L, A), cfg.init_std))
    if return_info:
        return action, nxt, info
    return action, nxt
