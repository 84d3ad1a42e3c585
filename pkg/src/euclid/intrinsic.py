"""Intrinsic rewards for reward-free pre-training.

Three backbones, all operating on target-encoder latents:

* ``disagreement`` - variance across an ensemble of forward models,
* ``apt`` - k-nearest-neighbour particle entropy over the batch,
* ``diayn`` - log-likelihood of the active skill under a discriminator.
"""

from __future__ import annotations

import math

import numpy as np

from . import nn_core as nn
from .nn_core import ParamStore

APT_EPS = 1e-6


# --------------------------------------------------------------------------
# Disagreement
# --------------------------------------------------------------------------


class DisagreementEnsemble:
    def __init__(self, latent_dim: int, action_dim: int, hidden_dim: int,
                 rng: np.random.Generator, size: int = 5):
        self.size = size
        self.members = [nn.mlp(f"dis{i}", latent_dim + action_dim, hidden_dim, latent_dim)
                        for i in range(size)]
        self.store = ParamStore()
        for net in self.members:
            self.store.add_net(net, rng)

    def predictions(self, z, a, params=None) -> np.ndarray:
        p = self.store if params is None else params
        x = np.concatenate([z, a], axis=-1)
        return np.stack([net(p, x) for net in self.members])


def disagreement_reward(ensemble: DisagreementEnsemble, z, a) -> np.ndarray:
    """Population variance across members, averaged over latent dimensions."""
    preds = ensemble.predictions(z, a)
    return preds.var(axis=0).mean(axis=-1)


def disagreement_loss(ensemble: DisagreementEnsemble, z, a, z_next, member_batches,
                      params=None, with_grad=True) -> tuple:
    """Sum over members of their mean squared prediction error on their own index set.

    ``member_batches[i]`` indexes the rows member ``i`` trains on; an empty
    set leaves that member out of the loss entirely.
    """
    if params is None:
        params = ensemble.store.leaves() if with_grad else ensemble.store
    x = np.concatenate([z, a], axis=-1)
    losses = []
    total = None
    for net, idx in zip(ensemble.members, member_batches):
        if len(idx) == 0:
            losses.append(float("nan"))
            continue
        err = nn.square(net(params, x[idx]) - z_next[idx]).sum(axis=-1).mean()
        losses.append(float(nn.value_of(err)))
        total = err if total is None else total + err
    grads = {}
    if total is not None and with_grad and isinstance(total, nn.Tensor):
        grads = nn.backward(total, {k: v for k, v in params.items() if isinstance(v, nn.Tensor)})
    return (0.0 if total is None else float(nn.value_of(total))), losses, grads


def disagreement_update(ensemble: DisagreementEnsemble, z, a, z_next, rng: np.random.Generator,
                        lr: float, member_batches=None) -> list[float]:
    """One Adam step per member on independently bootstrapped rows of the batch."""
    n = len(z)
    if member_batches is None:
        member_batches = [rng.integers(n, size=n) for _ in range(ensemble.size)]
    _, losses, grads = disagreement_loss(ensemble, z, a, z_next, member_batches)
    ensemble.store.adam_step(grads, lr)
    return losses


# --------------------------------------------------------------------------
# APT
# --------------------------------------------------------------------------


def apt_reward(z, references, k: int = 12, eps: float = APT_EPS,
               exclude_self: bool = False) -> np.ndarray | float:
    """Particle-entropy reward.

    ``raw`` is the mean over the k nearest references of ``log(d^2 + eps)``;
    the reward is ``log(max(raw, 0) + 1)``.  ``z`` may be one latent or a
    batch.  With ``exclude_self`` the query set is the reference set and
    each point ignores its own zero distance.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    z = np.asarray(z, dtype=np.float64)
    refs = np.asarray(references, dtype=np.float64)
    single = z.ndim == 1
    zq = z[None] if single else z
    usable = len(refs) - (1 if exclude_self else 0)
    if usable < k or len(refs) <= k:
        raise ValueError(f"need more than k={k} reference latents, got {len(refs)}")
    d2 = (np.sum(zq * zq, axis=1)[:, None] + np.sum(refs * refs, axis=1)[None, :]
          - 2.0 * zq @ refs.T)
    d2 = np.maximum(d2, 0.0)
    if exclude_self:
        np.fill_diagonal(d2, np.inf)
    nearest = np.partition(d2, k - 1, axis=1)[:, :k]
    raw = np.log(nearest + eps).mean(axis=1)
    reward = np.log(np.maximum(raw, 0.0) + 1.0)
    return float(reward[0]) if single else reward


# --------------------------------------------------------------------------
# DIAYN
# --------------------------------------------------------------------------


class DIAYNState:
    def __init__(self, latent_dim: int, hidden_dim: int, rng: np.random.Generator,
                 skill_dim: int = 16, resample_every: int = 50):
        self.skill_dim = skill_dim
        self.resample_every = resample_every
        self.discriminator = nn.mlp("disc", latent_dim, hidden_dim, skill_dim)
        self.store = ParamStore()
        self.store.add_net(self.discriminator, rng)
        self.skill = 0

    def one_hot(self, skills) -> np.ndarray:
        return np.eye(self.skill_dim)[np.asarray(skills)]

    def maybe_resample(self, t: int, rng: np.random.Generator) -> int:
        if t % self.resample_every == 0:
            self.skill = int(rng.integers(self.skill_dim))
        return self.skill


def diayn_reward(state: DIAYNState, z, skills) -> np.ndarray:
    """``log q(w | z) + log(skill_dim)``: zero for an uninformed discriminator."""
    logp = nn.log_softmax(state.discriminator(state.store, np.asarray(z)))
    picked = np.take_along_axis(logp, np.asarray(skills)[..., None], axis=-1)[..., 0]
    return picked + math.log(state.skill_dim)


def diayn_loss(state: DIAYNState, z, skills, params=None, with_grad=True):
    """Cross-entropy of the discriminator on (latent, skill) pairs."""
    if params is None:
        params = state.store.leaves() if with_grad else state.store
    logp = nn.log_softmax(state.discriminator(params, np.asarray(z)))
    loss = -(logp * state.one_hot(skills)).sum(axis=-1).mean()
    grads = {}
    if with_grad and isinstance(loss, nn.Tensor):
        grads = nn.backward(loss, params)
    return float(nn.value_of(loss)), grads


def diayn_update(state: DIAYNState, z, skills, lr: float) -> float:
    loss, grads = diayn_loss(state, z, skills)
    state.store.adam_step(grads, lr)
    return loss


# --------------------------------------------------------------------------
# uniform interface for the training loop
# --------------------------------------------------------------------------


class Explorer:
    """Adapter giving the pre-training loop one shape for every backbone."""

    name = "none"
    context_dim = 0

    def rewards(self, z, a, z_next, skills) -> np.ndarray:
        raise NotImplementedError

    def update(self, z, a, z_next, skills, rng, lr) -> float:
        raise NotImplementedError

    def context(self, t: int, rng) -> tuple[np.ndarray | None, int]:
        return None, -1

    def fixed_context(self) -> np.ndarray | None:
        return None

    def contexts_for(self, skills) -> np.ndarray | None:
        return None

    def stores(self) -> dict[str, ParamStore]:
        return {}


class DisagreementExplorer(Explorer):
    name = "disagreement"

    def __init__(self, latent_dim, action_dim, hidden_dim, rng, size=5):
        self.ensemble = DisagreementEnsemble(latent_dim, action_dim, hidden_dim, rng, size)

    def rewards(self, z, a, z_next, skills):
        return disagreement_reward(self.ensemble, z, a)

    def update(self, z, a, z_next, skills, rng, lr):
        losses = disagreement_update(self.ensemble, z, a, z_next, rng, lr)
        return float(np.nanmean(losses))

    def stores(self):
        return {"explorer": self.ensemble.store}


class APTExplorer(Explorer):
    name = "apt"

    def __init__(self, k=12):
        self.k = k

    def rewards(self, z, a, z_next, skills):
        return apt_reward(z_next, z_next, self.k, exclude_self=True)

    def update(self, z, a, z_next, skills, rng, lr):
        return 0.0


class DIAYNExplorer(Explorer):
    name = "diayn"

    def __init__(self, latent_dim, hidden_dim, rng, skill_dim=16, resample_every=50):
        self.state = DIAYNState(latent_dim, hidden_dim, rng, skill_dim, resample_every)
        self.context_dim = skill_dim

    def rewards(self, z, a, z_next, skills):
        return diayn_reward(self.state, z_next, skills)

    def update(self, z, a, z_next, skills, rng, lr):
        return diayn_update(self.state, z_next, skills, lr)

    def context(self, t, rng):
        skill = self.state.maybe_resample(t, rng)
        return self.state.one_hot(skill), skill

    def fixed_context(self):
        # fine-tuning keeps skill 0
        return self.state.one_hot(0)

    def contexts_for(self, skills):
        return self.state.one_hot(np.maximum(skills, 0))

    def stores(self):
        return {"explorer": self.state.store}


def make_explorer(name: str, latent_dim: int, action_dim: int, hidden_dim: int,
                  rng: np.random.Generator, **kw) -> Explorer:
    if name == "disagreement":
        return DisagreementExplorer(latent_dim, action_dim, hidden_dim, rng, kw.get("ensemble_size", 5))
    if name == "apt":
        return APTExplorer(kw.get("apt_k", 12))
    if name == "diayn":
        return DIAYNExplorer(latent_dim, hidden_dim, rng, kw.get("skill_dim", 16),
                             kw.get("skill_every", 50))
    raise ValueError(f"unknown explorer {name!r}; choose disagreement, apt or diayn")
