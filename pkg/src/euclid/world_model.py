"""Latent world model: encoder, multi-headed dynamics, reward, critic and actor.

The model parameters (encoder, dynamics backbone, every head, reward,
critic) share one :class:`ParamStore`; the actor has its own.  Lagged
copies of the encoder and critic provide the consistency and TD targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import nn_core as nn
from .nn_core import DenseNet, ParamStore, TargetTracker, Tensor


class HeadIndexError(IndexError):
    pass


class BatchError(ValueError):
    pass


@dataclass
class ModelConfig:
    latent_dim: int = 16
    hidden_dim: int = 128
    enc_hidden_dim: int = 128
    num_heads: int = 4
    c_reward: float = 0.5
    c_consistency: float = 2.0
    c_value: float = 0.1
    gamma: float = 0.99
    rollout_horizon: int = 5
    # None: every step of the rollout counts equally; otherwise step i weighs rho**i
    rho: float | None = None
    target_period: int = 2
    target_blend: float = 0.01
    # single affine encoder and dynamics, no activations
    linear: bool = False

    def __post_init__(self):
        if self.num_heads < 1:
            raise ValueError("num_heads must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if min(self.c_reward, self.c_consistency, self.c_value) < 0:
            raise ValueError("loss coefficients must be non-negative")


class WorldModel:
    def __init__(self, state_dim: int, action_dim: int, cfg: ModelConfig, rng: np.random.Generator):
        self.state_dim, self.action_dim, self.cfg = state_dim, action_dim, cfg
        L, A, Hd = cfg.latent_dim, action_dim, cfg.hidden_dim
        if cfg.linear:
            self.encoder = DenseNet("enc", (state_dim, L))
            self.backbone = DenseNet("dyn.backbone", (L + A, Hd))
        else:
            self.encoder = nn.mlp("enc", state_dim, cfg.enc_hidden_dim, L)
            self.backbone = DenseNet("dyn.backbone", (L + A, Hd, Hd), out_act="elu")
        self.heads = [DenseNet(f"dyn.head{h}", (Hd, L)) for h in range(cfg.num_heads)]
        self.reward_net = nn.mlp("rew", L + A, Hd, 1)
        self.critic = nn.mlp("q", L + A, Hd, 1)

        self.store = ParamStore()
        for net in (self.encoder, self.backbone, *self.heads, self.reward_net, self.critic):
            self.store.add_net(net, rng)
        self.target = TargetTracker.of(
            self.store, self.encoder.param_names() + self.critic.param_names(),
            period=cfg.target_period, blend=cfg.target_blend,
        )

    # parameter groups --------------------------------------------------
    def group_names(self, group: str) -> list[str]:
        if group == "encoder":
            return self.encoder.param_names()
        if group == "dynamics":
            names = self.backbone.param_names()
            for head in self.heads:
                names += head.param_names()
            return names
        if group == "reward":
            return self.reward_net.param_names()
        if group == "critic":
            return self.critic.param_names()
        raise KeyError(group)

    def trainable_names(self, head: int) -> list[str]:
        self._check_head(head)
        return (self.encoder.param_names() + self.backbone.param_names()
                + self.heads[head].param_names() + self.reward_net.param_names()
                + self.critic.param_names())

    def _check_head(self, head: int) -> None:
        if not 0 <= head < self.cfg.num_heads:
            raise HeadIndexError(f"head {head} outside [0, {self.cfg.num_heads})")

    # forward pieces ------------------------------------------------------
    def encode(self, state, params: Mapping | None = None):
        return self.encoder(self.store if params is None else params, state)

    def encode_target(self, state):
        return self.encoder(self.target, state)

    def predict_next(self, z, a, head: int, params: Mapping | None = None):
        self._check_head(head)
        p = self.store if params is None else params
        return self.heads[head](p, self.backbone(p, nn.concat([z, a])))

    def predict_reward(self, z, a, params: Mapping | None = None):
        out = self.reward_net(self.store if params is None else params, nn.concat([z, a]))
        return out[..., 0]

    def q_value(self, z, a, params: Mapping | None = None):
        out = self.critic(self.store if params is None else params, nn.concat([z, a]))
        return out[..., 0]

    def q_target(self, z, a):
        return self.critic(self.target, np.concatenate([z, a], axis=-1))[..., 0]


class Actor:
    """Deterministic tanh-bounded policy over ``latent ++ context``.

    ``context_dim`` is non-zero only for skill-conditioned exploration.
    """

    def __init__(self, latent_dim: int, action_dim: int, hidden_dim: int,
                 rng: np.random.Generator, context_dim: int = 0):
        self.latent_dim, self.action_dim, self.context_dim = latent_dim, action_dim, context_dim
        self.net = nn.mlp("pi", latent_dim + context_dim, hidden_dim, action_dim, out_act="tanh")
        self.store = ParamStore()
        self.store.add_net(self.net, rng)

    def inputs(self, z, context=None):
        if self.context_dim == 0:
            return z
        if context is None:
            raise nn.ShapeError("this actor needs a context vector")
        zv = nn.value_of(z)
        context = np.broadcast_to(context, zv.shape[:-1] + (self.context_dim,))
        return nn.concat([z, context])

    def __call__(self, z, context=None, params: Mapping | None = None):
        return self.net(self.store if params is None else params, self.inputs(z, context))


def policy_action(actor: Actor, z, context=None, params=None):
    return actor(z, context, params)


def encode(model: WorldModel, state):
    return model.encode(state)


def predict_next(model: WorldModel, z, a, head: int):
    return model.predict_next(z, a, head)


def predict_reward(model: WorldModel, z, a):
    return model.predict_reward(z, a)


def q_value(model: WorldModel, z, a):
    return model.q_value(z, a)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


@dataclass
class LossResult:
    total: float
    parts: dict[str, float]
    grads: dict[str, np.ndarray] = field(default_factory=dict)


def _check_batch(model: WorldModel, states, actions, rewards, next_states):
    H1 = model.cfg.rollout_horizon + 1
    if states.ndim != 3 or states.shape[1] != H1:
        raise BatchError(f"expected windows of {H1} transitions, got shape {states.shape}")
    B = states.shape[0]
    if actions.shape != (B, H1, model.action_dim) or next_states.shape != states.shape:
        raise BatchError("actions/next_states do not match the states array")
    if rewards.shape != (B, H1):
        raise BatchError(f"rewards must have shape {(B, H1)}, got {rewards.shape}")
    if not np.all(np.isfinite(rewards)):
        raise BatchError("rewards contain missing values; supply intrinsic rewards in pre-training")


def td_targets(model: WorldModel, actor: Actor, next_states, rewards, contexts=None):
    """Value targets ``r + gamma * Q^-(z', pi(z'))`` with ``z' = E^-(s')``; no gradient."""
    z_next = model.encode_target(next_states)
    a_next = actor(z_next, contexts)
    return rewards + model.cfg.gamma * model.q_target(z_next, a_next), z_next


def model_loss(model: WorldModel, actor: Actor, states, actions, rewards, next_states,
               head: int, contexts=None, params: Mapping | None = None,
               with_grad: bool = True) -> LossResult:
    """Temporally composed reward + consistency + value loss on one head.

    Arrays are (batch, rollout_horizon + 1, ...).  The first latent is the
    online encoding of ``states[:, 0]``; later latents come from rolling the
    chosen head forward open loop on the logged actions.  Losses are summed
    over the window and averaged over the batch.
    """
    _check_batch(model, states, actions, rewards, next_states)
    model._check_head(head)
    cfg = model.cfg
    names = model.trainable_names(head)
    if params is None:
        params = model.store.leaves(names) if with_grad else model.store

    targets, z_tgt = td_targets(model, actor, next_states, rewards, contexts)

    # open-loop rollout first, then reward and critic once on the stacked
    # window; rows are ordered step-major: row i * B + b is (step i, sample b)
    B, H1 = rewards.shape
    time_major = lambda x: np.swapaxes(x, 0, 1).reshape(B * H1, *x.shape[2:])  # noqa: E731
    z = model.encode(states[:, 0], params)
    latents, preds = [], []
    for i in range(H1):
        latents.append(z)
        z = model.predict_next(z, actions[:, i], head, params)
        preds.append(z)
    Z, Z_pred, A = nn.concat(latents, axis=0), nn.concat(preds, axis=0), time_major(actions)
    w = (np.ones(H1) if cfg.rho is None else cfg.rho ** np.arange(H1)).repeat(B) / B

    l_rew = (nn.square(model.predict_reward(Z, A, params) - time_major(rewards)) * w).sum()
    l_cons = (nn.square(Z_pred - time_major(z_tgt)).sum(axis=-1) * w).sum()
    l_val = (nn.square(model.q_value(Z, A, params) - time_major(targets)) * w).sum()
    loss = cfg.c_reward * l_rew + cfg.c_consistency * l_cons + cfg.c_value * l_val
    parts = {
        "reward": float(nn.value_of(l_rew)),
        "consistency": float(nn.value_of(l_cons)),
        "value": float(nn.value_of(l_val)),
    }
    grads = {}
    if with_grad and isinstance(loss, Tensor):
        grads = nn.backward(loss, {k: v for k, v in params.items() if isinstance(v, Tensor)})
    return LossResult(float(nn.value_of(loss)), parts, grads)


def actor_loss(actor: Actor, model: WorldModel, latents, contexts=None, diversity=None,
               alpha: float = 0.0, params: Mapping | None = None,
               with_grad: bool = True) -> LossResult:
    """``mean(-Q(z, pi(z))) + alpha * mean(divergence)``; only the actor gets gradients.

    ``diversity`` is a callable ``(z, action) -> per-sample divergence`` or
    None (no ensemble yet, or fine-tuning), in which case the term is 0.
    """
    if params is None:
        params = actor.store.leaves() if with_grad else actor.store
    latents = np.asarray(latents)
    a = actor(latents, contexts, params)
    q = model.q_value(latents, a)
    loss = -q.mean()
    div_mean = 0.0
    if diversity is not None and alpha != 0.0:
        div = diversity(latents, a).mean()
        div_mean = float(nn.value_of(div))
        loss = loss + alpha * div
    elif diversity is not None:
        div_mean = float(np.mean(nn.value_of(diversity(latents, nn.value_of(a)))))
    parts = {"q": float(np.mean(nn.value_of(q))), "divergence": div_mean}
    grads = {}
    if with_grad and isinstance(loss, Tensor):
        grads = nn.backward(loss, {k: v for k, v in params.items() if isinstance(v, Tensor)})
    return LossResult(float(nn.value_of(loss)), parts, grads)


def train_model(model: WorldModel, actor: Actor, states, actions, rewards, next_states,
                head: int, lr: float, contexts=None) -> LossResult:
    res = model_loss(model, actor, states, actions, rewards, next_states, head, contexts)
    model.store.adam_step(res.grads, lr)
    model.target.update(model.store)
    return res


def train_actor(actor: Actor, model: WorldModel, latents, lr: float, contexts=None,
                diversity=None, alpha: float = 0.0) -> LossResult:
    res = actor_loss(actor, model, latents, contexts, diversity, alpha)
    actor.store.adam_step(res.grads, lr)
    return res
