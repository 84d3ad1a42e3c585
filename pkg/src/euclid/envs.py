"""Desk-scale control environments with a reward-free mode.

Each environment exposes the same dynamics to every downstream task; the
task only changes how a (state, action) pair is scored.  In reward-free mode
``step`` never reports a reward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class EpisodeStateError(RuntimeError):
    pass


class UnknownTaskError(KeyError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    episode_length: int
    action_repeat: int = 1
    tasks: tuple[str, ...] = ()

    def __post_init__(self):
        if self.episode_length <= 0 or self.action_repeat <= 0:
            raise ValueError("episode_length and action_repeat must be positive")


@dataclass
class StepResult:
    next_state: np.ndarray
    reward: float | None
    done: bool


class Env:
    """Fixed-horizon environment.

    ``task=None`` is the reward-free (pre-training) mode.  Subclasses supply
    ``_initial_state``, ``_dynamics`` and ``_task_reward``.
    """

    name = "env"
    state_dim = 0
    action_dim = 0
    default_episode_length = 200
    tasks: tuple[str, ...] = ()

    def __init__(self, task: str | None = None, episode_length: int | None = None,
                 action_repeat: int = 1):
        if task is not None and task not in self.tasks:
            raise UnknownTaskError(f"{self.name}: unknown task {task!r}; choose from {self.tasks}")
        self.task = task
        self.spec = EnvSpec(self.name, self.state_dim, self.action_dim,
                            episode_length or self.default_episode_length, action_repeat, self.tasks)
        self.state: np.ndarray | None = None
        self.t = 0
        self._done = True

    @property
    def reward_free(self) -> bool:
        return self.task is None

    def reset(self, seed: int | None = None) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self.state = self._initial_state(rng)
        self.t = 0
        self._done = False
        return self.state.copy()

    def set_state(self, state) -> None:
        self.state = np.array(state, dtype=np.float64)

    def step(self, action) -> StepResult:
        if self._done or self.state is None:
            raise EpisodeStateError("step() called on a finished episode; call reset() first")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (self.action_dim,):
            raise ValueError(f"action must have shape ({self.action_dim},), got {action.shape}")
        action = np.clip(action, -1.0, 1.0)
        total = 0.0
        for _ in range(self.spec.action_repeat):
            self.state = self._dynamics(self.state, action)
            if self.task is not None:
                total += self.downstream_reward(self.task, self.state, action)
        self.t += 1
        self._done = self.t >= self.spec.episode_length
        return StepResult(self.state.copy(), None if self.task is None else total, self._done)

    def downstream_reward(self, task: str, state, action=None) -> float:
        if task not in self.tasks:
            raise UnknownTaskError(f"{self.name}: unknown task {task!r}")
        return float(self._task_reward(task, np.asarray(state, dtype=np.float64), action))

    # subclass hooks
    def _initial_state(self, rng):
        raise NotImplementedError

    def _dynamics(self, state, action):
        raise NotImplementedError

    def _task_reward(self, task, state, action):
        raise NotImplementedError


class PointMassReach(Env):
    """2-D damped double integrator in the box [-1, 1]^2.

    State (x, y, vx, vy); action is an acceleration command.  Hitting a wall
    stops the motion along that axis.  Four reach goals sit at (+-0.7, +-0.7).
    """

    name = "pointmass"
    state_dim = 4
    action_dim = 2
    default_episode_length = 200
    tasks = ("reach_ne", "reach_nw", "reach_se", "reach_sw")
    dt = 0.05
    damping = 0.1
    bound = 1.0
    GOALS = {
        "reach_ne": (0.7, 0.7),
        "reach_nw": (-0.7, 0.7),
        "reach_se": (0.7, -0.7),
        "reach_sw": (-0.7, -0.7),
    }

    def _initial_state(self, rng):
        pos = rng.uniform(-0.1, 0.1, size=2)
        return np.concatenate([pos, np.zeros(2)])

    def _dynamics(self, state, action):
        pos, vel = state[:2], state[2:]
        vel = vel + self.dt * (action - self.damping * vel)
        pos = pos + self.dt * vel
        hit = np.abs(pos) > self.bound
        pos = np.clip(pos, -self.bound, self.bound)
        vel = np.where(hit, 0.0, vel)
        return np.concatenate([pos, vel])

    def _task_reward(self, task, state, action):
        dist = np.linalg.norm(state[:2] - np.asarray(self.GOALS[task]))
        return max(0.0, 1.0 - dist / 1.0)


class Pendulum(Env):
    """Torque-limited pendulum, angle 0 at the upright position.

    Observation (cos theta, sin theta, theta_dot); theta_dot is clipped to +-8.
    """

    name = "pendulum"
    state_dim = 3
    action_dim = 1
    default_episode_length = 250
    tasks = ("balance", "spin", "swing_left")
    dt = 0.05
    gravity = 10.0
    length = 1.0
    max_torque = 2.0
    max_speed = 8.0

    @staticmethod
    def angle(state) -> float:
        return math.atan2(state[1], state[0])

    def _initial_state(self, rng):
        theta = rng.uniform(-math.pi, math.pi)
        return np.array([math.cos(theta), math.sin(theta), 0.0])

    def _dynamics(self, state, action):
        theta, omega = self.angle(state), state[2]
        acc = (self.gravity / self.length) * math.sin(theta) + self.max_torque * action[0]
        omega = float(np.clip(omega + self.dt * acc, -self.max_speed, self.max_speed))
        theta = theta + self.dt * omega
        return np.array([math.cos(theta), math.sin(theta), omega])

    def _task_reward(self, task, state, action):
        theta = self.angle(state)
        if task == "balance":
            return (1.0 + math.cos(theta)) / 2.0
        if task == "spin":
            return float(np.clip(abs(state[2]) / 8.0, 0.0, 1.0))
        return (1.0 + math.sin(theta)) / 2.0


# Region A is x0 >= 0, region B is x0 < 0.  Both regimes contract toward the
# origin but rotate in opposite directions with different input gains.
TWO_MODE_MATRICES = {
    "A": (
        np.array([[0.95, 0.25], [-0.25, 0.95]]),
        np.array([[0.20, 0.00], [0.00, 0.20]]),
    ),
    "B": (
        np.array([[0.90, -0.40], [0.40, 0.90]]),
        np.array([[0.10, -0.15], [0.15, 0.10]]),
    ),
}


class TwoModeLinear(Env):
    """Piecewise-linear system whose matrices switch on the sign of the first coordinate.

    ``s' = clip(A_r s + B_r a, -2, 2)`` with ``r = region(s)``; see
    ``TWO_MODE_MATRICES`` for the published values.
    """

    name = "twomode"
    state_dim = 2
    action_dim = 2
    default_episode_length = 200
    tasks = ("mode_a", "mode_b")
    bound = 2.0

    @staticmethod
    def region(state) -> str:
        return "A" if state[0] >= 0.0 else "B"

    def _initial_state(self, rng):
        return rng.uniform(-1.0, 1.0, size=2)

    def _dynamics(self, state, action):
        A, B = TWO_MODE_MATRICES[self.region(state)]
        return np.clip(A @ state + B @ action, -self.bound, self.bound)

    def _task_reward(self, task, state, action):
        want = "A" if task == "mode_a" else "B"
        return 1.0 if self.region(state) == want else 0.0


ENVS = {cls.name: cls for cls in (PointMassReach, Pendulum, TwoModeLinear)}


def make_env(name: str, task: str | None = None, **kwargs) -> Env:
    try:
        cls = ENVS[name]
    except KeyError:
        raise UnknownTaskError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None
    return cls(task=task, **kwargs)
