"""Snapshot policy ensemble, diversity regularizer and zero-shot head selection.

Snapshot ``h`` of the live actor is taken at env step ``h * snapshot_interval``
and defines segment ``h``: transitions collected until the next snapshot
carry ``segment_id = h`` and train dynamics head ``h``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn_core as nn
from .envs import Env
from .world_model import Actor, WorldModel


class EmptyEnsembleError(RuntimeError):
    pass


@dataclass
class MCLConfig:
    num_heads: int = 4
    alpha: float = 0.1
    snapshot_interval: int = 5000
    sigma_explore: float = 0.2

    def __post_init__(self):
        if self.num_heads < 1:
            raise ValueError("num_heads must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.snapshot_interval < 1:
            raise ValueError("snapshot_interval must be >= 1")


class PolicyEnsemble:
    def __init__(self, actor: Actor, cfg: MCLConfig):
        self.actor = actor
        self.cfg = cfg
        self.snapshots: list[dict[str, np.ndarray]] = []
        self.snapshot_steps: list[int] = []

    @property
    def size(self) -> int:
        return len(self.snapshots)

    @property
    def segment_id(self) -> int:
        return max(self.size - 1, 0)

    def maybe_snapshot(self, t: int) -> dict[str, np.ndarray] | None:
        h = self.size
        if h >= self.cfg.num_heads or t != self.cfg.snapshot_interval * h:
            return None
        snap = self.actor.store.snapshot()
        for arr in snap.values():
            arr.setflags(write=False)
        self.snapshots.append(snap)
        self.snapshot_steps.append(t)
        return snap

    def snapshot_action(self, i: int, z, context=None) -> np.ndarray:
        return self.actor(z, context, params=self.snapshots[i])

    def average_action(self, z, context=None) -> np.ndarray:
        if not self.snapshots:
            raise EmptyEnsembleError("average policy needs at least one snapshot")
        total = self.snapshot_action(0, z, context)
        for i in range(1, self.size):
            total = total + self.snapshot_action(i, z, context)
        return total / self.size

    def divergence(self, z, action, context=None):
        """Per-sample ``||avg(z) - action||^2 / (2 sigma^2)``.

        The KL between two Gaussians of common covariance ``sigma^2 I`` centred
        at the ensemble-average action and the live action.  ``action`` may
        be a tape tensor; the average is a constant.
        """
        avg = self.average_action(np.asarray(z), context)
        return nn.square(action - avg).sum(axis=-1) / (2.0 * self.cfg.sigma_explore ** 2)

    def diversity_fn(self, context=None) -> Callable | None:
        if not self.snapshots:
            return None
        return lambda z, a: self.divergence(z, a, context)


def maybe_snapshot(ensemble: PolicyEnsemble, t: int):
    return ensemble.maybe_snapshot(t)


def average_action(ensemble: PolicyEnsemble, z, context=None):
    return ensemble.average_action(z, context)


def diversity_divergence(ensemble: PolicyEnsemble, actor: Actor, z, context=None,
                         params=None):
    return ensemble.divergence(z, actor(z, context, params), context)


def run_policy_episode(env: Env, model: WorldModel, policy: Callable, seed: int,
                       on_step: Callable | None = None) -> float:
    """Roll out ``policy(z) -> action`` for one episode; returns the extrinsic return."""
    state = env.reset(seed)
    total = 0.0
    done = False
    while not done:
        action = np.asarray(policy(model.encode(state)))
        res = env.step(action)
        total += res.reward
        if on_step is not None:
            on_step(state, action, res)
        state, done = res.next_state, res.done
    return total


def select_head(model: WorldModel, ensemble: PolicyEnsemble, env: Env, seed: int,
                context=None, on_step: Callable | None = None,
                on_episode_start: Callable | None = None) -> tuple[int, list[float]]:
    """Zero-shot choice of the dynamics head for ``env.task``.

    Snapshot ``h`` acts (deterministically, without planning) for one episode
    from the same initial state; the head with the highest return wins,
    ties going to the lowest index.
    """
    if env.reward_free:
        raise ValueError("head selection needs an environment with a task")
    if ensemble.size == 0:
        raise EmptyEnsembleError("no snapshots to evaluate")
    returns = []
    for h in range(min(ensemble.size, model.cfg.num_heads)):
        if on_episode_start is not None:
            on_episode_start(h)
        ret = run_policy_episode(
            env, model, lambda z, h=h: ensemble.snapshot_action(h, z, context), seed, on_step
        )
        returns.append(ret)
    return int(np.argmax(returns)), returns
