"""Flat ``key = value`` run configuration.

Every key is a field of :class:`RunConfig`.  Files may contain blank lines
and ``#`` comments; values are coerced to the field's type.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable

from .mcl import MCLConfig
from .planner import PlannerConfig
from .world_model import ModelConfig


class ConfigError(ValueError):
    pass


REUSE_COMPONENTS = ("encoder", "dynamics", "reward", "critic", "actor")


@dataclass
class RunConfig:
    # environment / task
    env: str = "pointmass"
    task: str = "reach_ne"
    episode_length: int = 0  # 0: environment default
    action_repeat: int = 1
    explorer: str = "disagreement"
    seed: int = 0

    # schedule
    pt_steps: int = 20000
    ft_steps: int = 10000
    pt_seed_steps: int = 0
    ft_seed_steps: int = 1000
    updates_per_step: int = 1
    update_every: int = 1  # env steps between update rounds
    pt_lr: float = 1e-4
    ft_lr: float = 1e-3
    explorer_lr: float = 1e-4
    expl_noise: float = 0.2
    batch_size: int = 256
    buffer_capacity: int = 100000
    segment_mix: str = "uniform"  # or "current"

    # world model
    latent_dim: int = 16
    hidden_dim: int = 128
    enc_hidden_dim: int = 128
    c_reward: float = 0.5
    c_consistency: float = 2.0
    c_value: float = 0.1
    gamma: float = 0.99
    rollout_horizon: int = 5
    rho: float = 0.0  # 0: unweighted sum over the window
    target_period: int = 2
    target_blend: float = 0.01
    linear_model: bool = False

    # multi-choice learning
    num_heads: int = 4
    alpha: float = 0.1
    snapshot_interval: int = 0  # 0: pt_steps // num_heads
    sigma_explore: float = 0.2

    # planner
    plan_iterations: int = 6
    plan_horizon: int = 5
    plan_population: int = 128
    plan_elites: int = 8
    plan_policy_fraction: float = 0.05
    plan_temperature: float = 0.5
    plan_min_std: float = 0.05
    plan_init_std: float = 0.5
    plan_policy_jitter: float = 0.05
    plan_jitter_policy: bool = True

    # exploration backbones
    ensemble_size: int = 5
    explorer_hidden: int = 64
    apt_k: int = 12
    skill_dim: int = 16
    skill_every: int = 50

    # fine-tuning reuse of pre-trained components
    reuse_encoder: bool = True
    reuse_dynamics: bool = True
    reuse_reward: bool = True
    reuse_critic: bool = True
    reuse_actor: bool = True

    # logging / evaluation
    metrics_every: int = 500
    eval_episodes: int = 0
    log_wall_clock: bool = False

    def validate(self) -> "RunConfig":
        checks = [
            (self.pt_steps >= 0 and self.ft_steps >= 0, "pt_steps and ft_steps must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.updates_per_step >= 0, "updates_per_step must be >= 0"),
            (self.update_every >= 1, "update_every must be >= 1"),
            (self.segment_mix in ("uniform", "current"), "segment_mix must be uniform or current"),
            (self.explorer in ("disagreement", "apt", "diayn"), f"unknown explorer {self.explorer!r}"),
            (self.rho >= 0, "rho must be >= 0"),
            (self.metrics_every >= 1, "metrics_every must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            self.model_config()
            self.mcl_config()
            self.planner_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            latent_dim=self.latent_dim, hidden_dim=self.hidden_dim,
            enc_hidden_dim=self.enc_hidden_dim, num_heads=self.num_heads,
            c_reward=self.c_reward, c_consistency=self.c_consistency, c_value=self.c_value,
            gamma=self.gamma, rollout_horizon=self.rollout_horizon,
            rho=self.rho or None, target_period=self.target_period,
            target_blend=self.target_blend, linear=self.linear_model,
        )

    def mcl_config(self) -> MCLConfig:
        interval = self.snapshot_interval or max(self.pt_steps // self.num_heads, 1)
        return MCLConfig(self.num_heads, self.alpha, interval, self.sigma_explore)

    def planner_config(self) -> PlannerConfig:
        return PlannerConfig(
            iterations=self.plan_iterations, horizon=self.plan_horizon,
            population=self.plan_population, elites=self.plan_elites,
            policy_fraction=self.plan_policy_fraction, temperature=self.plan_temperature,
            gamma=self.gamma, min_std=self.plan_min_std, init_std=self.plan_init_std,
            policy_jitter=self.plan_policy_jitter, jitter_policy=self.plan_jitter_policy,
        )

    def reuse(self) -> dict[str, bool]:
        return {c: getattr(self, f"reuse_{c}") for c in REUSE_COMPONENTS}

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(key: str, raw: str):
    f = _FIELDS[key]
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind})") from None


def parse_pairs(pairs: Iterable[str], source: str = "override") -> dict:
    out = {}
    for token in pairs:
        line = token.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: malformed key=value {token.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path=None, overrides: Iterable[str] = (), **explicit) -> RunConfig:
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_pairs(p.read_text().splitlines(), source=str(path)))
    values.update(parse_pairs(overrides))
    values.update({k: v for k, v in explicit.items() if v is not None})
    return RunConfig(**values).validate()
