"""Pre-training and fine-tuning loops, evaluation, checkpoints and metrics."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn_core as nn
from .config import REUSE_COMPONENTS, ConfigError, RunConfig
from .envs import Env, make_env
from .intrinsic import Explorer, make_explorer
from .mcl import PolicyEnsemble, select_head
from .nn_core import ParamStore
from .planner import plan
from .replay import NotEnoughDataError, ReplayBuffer, Transition
from .world_model import Actor, WorldModel, train_actor, train_model

log = logging.getLogger(__name__)

METRICS_HEADER = ["phase", "step", "task", "return", "loss_reward", "loss_consistency",
                  "loss_value", "loss_actor", "intrinsic_mean", "selected_head", "wall_ms"]
CHECKPOINT_VERSION = 1


class CheckpointMismatchError(ValueError):
    pass


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


class MetricsWriter:
    """Append-only CSV with the fixed header; ``wall_ms`` is 0 unless enabled."""

    def __init__(self, path, log_wall_clock: bool = False):
        self.path = Path(path) if path is not None else None
        self.rows: list[dict] = []
        self.log_wall_clock = log_wall_clock
        self._t0 = time.perf_counter()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRICS_HEADER)

    def write(self, phase, step, task="", ret=None, losses=None, intrinsic=None, selected_head=None):
        losses = losses or {}
        wall = int((time.perf_counter() - self._t0) * 1000) if self.log_wall_clock else 0
        row = {
            "phase": phase, "step": step, "task": task or "",
            "return": _fmt(ret), "loss_reward": _fmt(losses.get("reward")),
            "loss_consistency": _fmt(losses.get("consistency")),
            "loss_value": _fmt(losses.get("value")), "loss_actor": _fmt(losses.get("actor")),
            "intrinsic_mean": _fmt(intrinsic),
            "selected_head": "" if selected_head is None else str(selected_head),
            "wall_ms": str(wall),
        }
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([row[k] for k in METRICS_HEADER])


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x))


# --------------------------------------------------------------------------
# agent state
# --------------------------------------------------------------------------


class Streams:
    """Independent generators derived from one seed."""

    NAMES = ("init", "act", "replay", "explorer", "planner", "env")

    def __init__(self, seed: int, phase: str):
        tag = {"pt": 0, "ft": 1, "eval": 2}[phase]
        children = np.random.SeedSequence([seed, tag]).spawn(len(self.NAMES))
        for name, ss in zip(self.NAMES, children):
            setattr(self, name, np.random.default_rng(ss))
        self.env_base = int(np.random.SeedSequence([seed, tag, 7]).generate_state(1)[0])


@dataclass
class Agent:
    cfg: RunConfig
    env_name: str
    state_dim: int
    action_dim: int
    model: WorldModel
    actor: Actor
    ensemble: PolicyEnsemble
    explorer: Explorer
    selected_head: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def build(cls, cfg: RunConfig, env: Env, rng: np.random.Generator) -> "Agent":
        sd, ad = env.state_dim, env.action_dim
        model = WorldModel(sd, ad, cfg.model_config(), rng)
        explorer = make_explorer(cfg.explorer, cfg.latent_dim, ad, cfg.explorer_hidden, rng,
                                 ensemble_size=cfg.ensemble_size, apt_k=cfg.apt_k,
                                 skill_dim=cfg.skill_dim, skill_every=cfg.skill_every)
        actor = Actor(cfg.latent_dim, ad, cfg.hidden_dim, rng, context_dim=explorer.context_dim)
        ensemble = PolicyEnsemble(actor, cfg.mcl_config())
        return cls(cfg, env.name, sd, ad, model, actor, ensemble, explorer)

    # checkpointing ------------------------------------------------------
    def to_tensors(self) -> dict[str, np.ndarray]:
        t = {}
        t.update(self.model.store.to_tensors("model"))
        t.update({f"target/{k}": v for k, v in self.model.target.shadow.items()})
        t["target/@count"] = np.array(float(self.model.target.count))
        t.update(self.actor.store.to_tensors("actor"))
        for i, snap in enumerate(self.ensemble.snapshots):
            t.update({f"snapshot{i}/{k}": v for k, v in snap.items()})
        for name, store in self.explorer.stores().items():
            t.update(store.to_tensors(name))
        return t

    def metadata(self, phase: str) -> dict:
        cfg = self.cfg
        return {
            "version": CHECKPOINT_VERSION, "phase": phase, "env": self.env_name,
            "state_dim": self.state_dim, "action_dim": self.action_dim,
            "latent_dim": cfg.latent_dim, "hidden_dim": cfg.hidden_dim,
            "enc_hidden_dim": cfg.enc_hidden_dim, "num_heads": cfg.num_heads,
            "linear_model": cfg.linear_model, "explorer": cfg.explorer,
            "explorer_hidden": cfg.explorer_hidden, "ensemble_size": cfg.ensemble_size,
            "skill_dim": cfg.skill_dim, "context_dim": self.actor.context_dim,
            "snapshot_steps": list(self.ensemble.snapshot_steps),
            "selected_head": self.selected_head, **self.meta,
        }

    def save(self, path, phase: str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        nn.write_checkpoint(path, self.to_tensors(), self.metadata(phase))
        return path


def check_compatible(cfg: RunConfig, meta: dict) -> None:
    expected = {
        "env": cfg.env, "latent_dim": cfg.latent_dim, "hidden_dim": cfg.hidden_dim,
        "enc_hidden_dim": cfg.enc_hidden_dim, "num_heads": cfg.num_heads,
        "linear_model": cfg.linear_model, "explorer": cfg.explorer,
    }
    bad = {k: (meta.get(k), v) for k, v in expected.items() if meta.get(k) != v}
    if bad:
        detail = ", ".join(f"{k}: checkpoint {a!r} vs config {b!r}" for k, (a, b) in bad.items())
        raise CheckpointMismatchError(f"checkpoint does not match config ({detail})")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatchError(f"unsupported checkpoint version {meta.get('version')!r}")


def _copy_values(dst: ParamStore, tensors: dict, prefix: str, names) -> None:
    dst.load_values({k: tensors[f"{prefix}/{k}"] for k in names})


def load_agent(cfg: RunConfig, checkpoint, env: Env, rng: np.random.Generator,
               reuse: dict[str, bool] | None = None) -> tuple[Agent, dict]:
    """Fresh agent from ``rng``, then overwrite the components selected in ``reuse``."""
    tensors, meta = nn.read_checkpoint(checkpoint)
    check_compatible(cfg, meta)
    if meta["state_dim"] != env.state_dim or meta["action_dim"] != env.action_dim:
        raise CheckpointMismatchError("checkpoint dimensions do not match the environment")
    agent = Agent.build(cfg, env, rng)
    reuse = reuse if reuse is not None else {c: True for c in REUSE_COMPONENTS}
    model = agent.model
    for comp in ("encoder", "dynamics", "reward", "critic"):
        if not reuse[comp]:
            continue
        names = model.group_names(comp)
        _copy_values(model.store, tensors, "model", names)
        for k in names:
            if k in model.target:
                model.target.shadow[k] = np.array(tensors[f"target/{k}"])
    if reuse["actor"]:
        _copy_values(agent.actor.store, tensors, "actor", agent.actor.store.keys())
    for i, _ in enumerate(meta.get("snapshot_steps", [])):
        snap = {k: np.array(tensors[f"snapshot{i}/{k}"]) for k in agent.actor.store.keys()}
        for arr in snap.values():
            arr.setflags(write=False)
        agent.ensemble.snapshots.append(snap)
    agent.ensemble.snapshot_steps = list(meta.get("snapshot_steps", []))
    for name, store in agent.explorer.stores().items():
        store.load_values({k: tensors[f"{name}/{k}"] for k in store.keys()})
    agent.selected_head = int(meta.get("selected_head", 0))
    return agent, meta


# --------------------------------------------------------------------------
# pre-training
# --------------------------------------------------------------------------


@dataclass
class RunResult:
    checkpoint: Path | None
    metrics: list[dict]
    episode_returns: list[float] = field(default_factory=list)
    selected_head: int | None = None
    head_returns: list[float] = field(default_factory=list)
    gradient_steps: int = 0
    agent: Agent | None = None
    evaluation: "EvalResult | None" = None

    @property
    def score(self) -> float:
        """Mean return over the episodes completed after head selection."""
        return float(np.mean(self.episode_returns)) if self.episode_returns else float("nan")


def _make_env(cfg: RunConfig, task):
    return make_env(cfg.env, task=task, episode_length=cfg.episode_length or None,
                    action_repeat=cfg.action_repeat)


def _noisy(action, std, rng):
    if std <= 0:
        return np.clip(action, -1.0, 1.0)
    return np.clip(action + std * rng.standard_normal(action.shape), -1.0, 1.0)


def pt_update(agent: Agent, replay: ReplayBuffer, streams: Streams, lr: float) -> dict | None:
    """One model + actor update on a segment batch; None while data is insufficient."""
    cfg, model, ens = agent.cfg, agent.model, agent.ensemble
    H = cfg.rollout_horizon
    segments = list(range(max(ens.size, 1)))
    if cfg.segment_mix == "current":
        segments = [ens.segment_id]
    available = replay.segments_with_data(H, segments)
    if not available:
        return None
    seg = available[int(streams.replay.integers(len(available)))]
    batch = replay.sample_sequences(cfg.batch_size, H, streams.replay, segment_filter=seg)
    B, H1 = batch.rewards.shape
    flat = lambda x: x.reshape(B * H1, *x.shape[2:])  # noqa: E731
    z_t = model.encode_target(flat(batch.states))
    zn_t = model.encode_target(flat(batch.next_states))
    a = flat(batch.actions)
    skills = flat(batch.skills)
    r_int = np.asarray(agent.explorer.rewards(z_t, a, zn_t, skills)).reshape(B, H1)
    # the explorer fits one transition per window: rows 0, H1, 2*H1, ...
    first = slice(None, None, H1)
    agent.explorer.update(z_t[first], a[first], zn_t[first], skills[first],
                          streams.explorer, cfg.explorer_lr)
    contexts = agent.explorer.contexts_for(batch.skills)
    res = train_model(model, agent.actor, batch.states, batch.actions, r_int,
                      batch.next_states, head=seg, lr=lr, contexts=contexts)
    latents = model.encode(flat(batch.states))
    flat_ctx = None if contexts is None else flat(contexts)
    ares = train_actor(agent.actor, model, latents, lr, flat_ctx,
                       diversity=ens.diversity_fn(flat_ctx), alpha=ens.cfg.alpha)
    return {**res.parts, "actor": ares.total, "intrinsic": float(r_int.mean()), "head": seg}


def pretrain(cfg: RunConfig, out_dir=None, metrics_name="metrics.csv") -> RunResult:
    """Reward-free pre-training; writes ``pt.ckpt`` and the metrics CSV under ``out_dir``."""
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    streams = Streams(cfg.seed, "pt")
    env = _make_env(cfg, None)
    agent = Agent.build(cfg, env, streams.init)
    ens = agent.ensemble
    replay = ReplayBuffer(cfg.buffer_capacity, env.state_dim, env.action_dim)
    metrics = MetricsWriter(out / metrics_name if out else None, cfg.log_wall_clock)

    episode, step_in_ep = 0, 0
    state = env.reset(streams.env_base + episode)
    ep_ret_count, last = 0, {}
    grad_steps = 0
    for t in range(cfg.pt_steps):
        ens.maybe_snapshot(t)
        ctx, skill = agent.explorer.context(t, streams.act)
        z = agent.model.encode(state)
        action = _noisy(agent.actor(z, ctx), cfg.expl_noise, streams.act)
        res = env.step(action)
        if res.reward is not None:
            raise RuntimeError("environment leaked an extrinsic reward during pre-training")
        replay.push(Transition(state, action, None, res.next_state, ens.segment_id,
                               episode, step_in_ep, skill), ensemble_size=ens.size)
        step_in_ep += 1
        state = res.next_state
        if res.done:
            episode += 1
            ep_ret_count += 1
            step_in_ep = 0
            state = env.reset(streams.env_base + episode)
        if t >= cfg.pt_seed_steps and (t - cfg.pt_seed_steps) % cfg.update_every == 0:
            for _ in range(cfg.updates_per_step):
                upd = pt_update(agent, replay, streams, cfg.pt_lr)
                if upd is not None:
                    last = upd
                    grad_steps += 1
        if (t + 1) % cfg.metrics_every == 0:
            metrics.write("pt", t + 1, "", None, last, last.get("intrinsic"))
    if ens.size == 0:
        ens.maybe_snapshot(0)
    agent.meta = {"pt_steps": cfg.pt_steps}
    ckpt = agent.save(out / "pt.ckpt", "pt") if out else None
    return RunResult(ckpt, metrics.rows, gradient_steps=grad_steps, agent=agent)


# --------------------------------------------------------------------------
# fine-tuning
# --------------------------------------------------------------------------


def ft_update(agent: Agent, replay: ReplayBuffer, streams: Streams, lr: float,
              context) -> dict | None:
    cfg, model = agent.cfg, agent.model
    try:
        batch = replay.sample_sequences(cfg.batch_size, cfg.rollout_horizon, streams.replay)
    except NotEnoughDataError:
        return None
    B, H1 = batch.rewards.shape
    contexts = None if context is None else np.broadcast_to(context, (B, H1, len(context)))
    res = train_model(model, agent.actor, batch.states, batch.actions, batch.rewards,
                      batch.next_states, head=agent.selected_head, lr=lr, contexts=contexts)
    latents = model.encode(batch.states.reshape(B * H1, -1))
    ares = train_actor(agent.actor, model, latents, lr, context)
    return {**res.parts, "actor": ares.total}


def finetune(cfg: RunConfig, checkpoint=None, out_dir=None,
             metrics_name="metrics.csv") -> RunResult:
    """Fine-tune on ``cfg.task`` starting from ``checkpoint`` (or from scratch when None).

    Components whose reuse flag is off are freshly initialised.  Zero-shot
    head selection runs when the dynamics are reused and snapshots exist.
    """
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    streams = Streams(cfg.seed, "ft")
    env = _make_env(cfg, cfg.task)
    if checkpoint is not None:
        agent, meta = load_agent(cfg, checkpoint, env, streams.init, cfg.reuse())
        if meta.get("phase") != "pt":
            raise CheckpointMismatchError("fine-tuning needs a pre-training checkpoint")
    else:
        agent = Agent.build(cfg, env, streams.init)
    context = agent.explorer.fixed_context()
    metrics = MetricsWriter(out / metrics_name if out else None, cfg.log_wall_clock)
    replay = ReplayBuffer(cfg.buffer_capacity, env.state_dim, env.action_dim)

    episode = 0
    t = 0
    head_returns: list[float] = []
    agent.selected_head = 0
    select = checkpoint is not None and cfg.reuse_dynamics and agent.ensemble.size > 0
    if select:
        # zero-shot episodes count against the step budget and seed the replay
        cursor = {"episode": 0, "step": 0}

        def record(state, action, res):
            nonlocal t
            replay.push(Transition(state, action, res.reward, res.next_state, 0,
                                   cursor["episode"], cursor["step"]))
            cursor["step"] += 1
            t += 1

        def start(h):
            cursor["episode"], cursor["step"] = h, 0

        agent.selected_head, head_returns = select_head(
            agent.model, agent.ensemble, env, streams.env_base, context, record, start)
        episode = len(head_returns)
        if cfg.reuse_actor:
            agent.actor.store = ParamStore(agent.ensemble.snapshots[agent.selected_head])
        metrics.write("ft", t, cfg.task, max(head_returns), None, None, agent.selected_head)

    state = env.reset(streams.env_base + episode)
    step_in_ep, ep_ret = 0, 0.0
    dist = None
    returns: list[float] = []
    last: dict = {}
    grad_steps = 0
    while t < cfg.ft_steps:
        z = agent.model.encode(state)
        if t < cfg.ft_seed_steps:
            action = _noisy(agent.actor(z, context), cfg.expl_noise, streams.act)
        else:
            action, dist = plan(agent.model, agent.actor, cfg.planner_config(), z,
                                agent.selected_head, streams.planner, dist, context)
        res = env.step(action)
        replay.push(Transition(state, action, res.reward, res.next_state, 0, episode, step_in_ep))
        ep_ret += res.reward
        step_in_ep += 1
        state = res.next_state
        if res.done:
            returns.append(ep_ret)
            episode += 1
            step_in_ep, ep_ret, dist = 0, 0.0, None
            state = env.reset(streams.env_base + episode)
        if t >= cfg.ft_seed_steps and (t - cfg.ft_seed_steps) % cfg.update_every == 0:
            for _ in range(cfg.updates_per_step):
                upd = ft_update(agent, replay, streams, cfg.ft_lr, context)
                if upd is not None:
                    last = upd
                    grad_steps += 1
        t += 1
        if t % cfg.metrics_every == 0:
            metrics.write("ft", t, cfg.task, returns[-1] if returns else None, last, None,
                          agent.selected_head)

    agent.meta = {"task": cfg.task, "ft_steps": cfg.ft_steps}
    ckpt = agent.save(out / "ft.ckpt", "ft") if out else None
    result = RunResult(ckpt, metrics.rows, returns, agent.selected_head, head_returns,
                       grad_steps, agent)
    if cfg.eval_episodes > 0:
        ev = result.evaluation = evaluate_agent(agent, cfg, cfg.eval_episodes)
        metrics.write("eval", cfg.ft_steps, cfg.task, ev.mean, None, None, agent.selected_head)
    if out:
        summary = {"episode_returns": returns, "selected_head": agent.selected_head,
                   "head_returns": head_returns, "score": result.score,
                   "gradient_steps": grad_steps,
                   "eval_mean": None if result.evaluation is None else result.evaluation.mean}
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return result


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


@dataclass
class EvalResult:
    returns: list[float]
    mean: float
    ci95: float  # half-width of the normal-approximation interval


def confidence_interval(values) -> tuple[float, float]:
    """Mean and ``1.96 * sd / sqrt(n)`` with the sample (n - 1) standard deviation."""
    x = np.asarray(values, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("no values")
    mean = float(x.mean())
    if len(x) < 2:
        return mean, 0.0
    return mean, float(1.96 * x.std(ddof=1) / math.sqrt(len(x)))


def evaluate_agent(agent: Agent, cfg: RunConfig, episodes: int, fixed_start: bool = False,
                   seed: int | None = None) -> EvalResult:
    """Planning episodes without training or exploration noise."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    streams = Streams(cfg.seed if seed is None else seed, "eval")
    env = _make_env(cfg, cfg.task)
    context = agent.explorer.fixed_context()
    pcfg = cfg.planner_config()
    returns = []
    for ep in range(episodes):
        ep_seed = streams.env_base + (0 if fixed_start else ep)
        rng = np.random.default_rng([streams.env_base, 0 if fixed_start else ep])
        state = env.reset(ep_seed)
        dist, total, done = None, 0.0, False
        while not done:
            z = agent.model.encode(state)
            action, dist = plan(agent.model, agent.actor, pcfg, z, agent.selected_head,
                                rng, dist, context)
            res = env.step(action)
            total += res.reward
            state, done = res.next_state, res.done
        returns.append(total)
    mean, ci = confidence_interval(returns)
    return EvalResult(returns, mean, ci)


def evaluate(cfg: RunConfig, checkpoint, episodes: int, out_dir=None,
             fixed_start: bool = False) -> EvalResult:
    streams = Streams(cfg.seed, "eval")
    env = _make_env(cfg, cfg.task)
    agent, _ = load_agent(cfg, checkpoint, env, streams.init)
    res = evaluate_agent(agent, cfg, episodes, fixed_start)
    if out_dir is not None:
        metrics = MetricsWriter(Path(out_dir) / "metrics.csv", cfg.log_wall_clock)
        metrics.write("eval", episodes, cfg.task, res.mean, None, None, agent.selected_head)
        (Path(out_dir) / "eval.json").write_text(json.dumps(
            {"returns": res.returns, "mean": res.mean, "ci95": res.ci95}, indent=2))
    return res


def select_head_only(cfg: RunConfig, checkpoint, out_dir=None) -> tuple[int, list[float]]:
    """Zero-shot head selection on ``cfg.task`` for a pre-training checkpoint."""
    streams = Streams(cfg.seed, "ft")
    env = _make_env(cfg, cfg.task)
    agent, _ = load_agent(cfg, checkpoint, env, streams.init)
    head, rets = select_head(agent.model, agent.ensemble, env, streams.env_base,
                             agent.explorer.fixed_context())
    if out_dir is not None:
        metrics = MetricsWriter(Path(out_dir) / "metrics.csv", cfg.log_wall_clock)
        metrics.write("ft", 0, cfg.task, max(rets), None, None, head)
    return head, rets


__all__ = ["pretrain", "finetune", "evaluate", "evaluate_agent", "select_head_only",
           "confidence_interval", "MetricsWriter", "METRICS_HEADER", "Agent", "load_agent",
           "CheckpointMismatchError", "ConfigError", "RunResult", "EvalResult"]
