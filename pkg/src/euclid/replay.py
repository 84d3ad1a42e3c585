"""Episode-structured replay with contiguous sub-trajectory sampling."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .nn_core import MAGIC, CheckpointError


class NotEnoughDataError(RuntimeError):
    pass


class InvalidTransitionError(ValueError):
    pass


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float | None
    next_state: np.ndarray
    segment_id: int = 0
    episode_id: int = 0
    step_index: int = 0
    skill: int = -1


@dataclass
class SequenceBatch:
    """``batch`` windows of ``horizon + 1`` transitions; arrays are (batch, horizon+1, ...)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray  # nan where absent
    next_states: np.ndarray
    segment_ids: np.ndarray
    skills: np.ndarray
    episode_ids: np.ndarray
    starts: np.ndarray

    def __len__(self):
        return self.states.shape[0]


class _Episode:
    __slots__ = ("episode_id", "n", "states", "actions", "rewards", "next_states",
                 "segments", "skills", "_valid")

    def __init__(self, episode_id, state_dim, action_dim, cap=64):
        self.episode_id = episode_id
        self.n = 0
        self.states = np.empty((cap, state_dim))
        self.actions = np.empty((cap, action_dim))
        self.rewards = np.empty(cap)
        self.next_states = np.empty((cap, state_dim))
        self.segments = np.empty(cap, dtype=np.int64)
        self.skills = np.empty(cap, dtype=np.int64)
        self._valid: dict = {}

    def append(self, tr: Transition):
        if self.n == len(self.rewards):
            for name in ("states", "actions", "rewards", "next_states", "segments", "skills"):
                arr = getattr(self, name)
                grown = np.empty((2 * len(arr),) + arr.shape[1:], dtype=arr.dtype)
                grown[: self.n] = arr[: self.n]
                setattr(self, name, grown)
        i = self.n
        self.states[i] = tr.state
        self.actions[i] = tr.action
        self.rewards[i] = np.nan if tr.reward is None else tr.reward
        self.next_states[i] = tr.next_state
        self.segments[i] = tr.segment_id
        self.skills[i] = tr.skill
        self.n += 1
        self._valid.clear()

    def valid_starts(self, horizon: int, segment: int | None) -> np.ndarray:
        key = (horizon, segment)
        if key not in self._valid:
            span = horizon + 1
            count = self.n - horizon
            if count <= 0:
                starts = np.empty(0, dtype=np.int64)
            elif segment is None:
                starts = np.arange(count)
            else:
                match = (self.segments[: self.n] == segment).astype(np.int64)
                run = np.convolve(match, np.ones(span, dtype=np.int64), mode="valid")
                starts = np.flatnonzero(run == span)
            self._valid[key] = starts
        return self._valid[key]


class ReplayBuffer:
    """Bounded FIFO store of transitions grouped by episode.

    Eviction drops whole episodes, oldest first, until the size fits the
    capacity again.  The episode currently being written is never evicted.
    """

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.episodes: list[_Episode] = []
        self.size = 0

    def __len__(self):
        return self.size

    def clear(self):
        self.episodes.clear()
        self.size = 0

    def push(self, tr: Transition, ensemble_size: int | None = None) -> None:
        if tr.segment_id < 0 or (ensemble_size is not None and tr.segment_id >= ensemble_size):
            raise InvalidTransitionError(
                f"segment_id {tr.segment_id} outside current ensemble of size {ensemble_size}"
            )
        if np.shape(tr.state) != (self.state_dim,) or np.shape(tr.next_state) != (self.state_dim,):
            raise InvalidTransitionError("state has the wrong dimension")
        if np.shape(tr.action) != (self.action_dim,):
            raise InvalidTransitionError("action has the wrong dimension")
        ep = self.episodes[-1] if self.episodes else None
        if ep is None or ep.episode_id != tr.episode_id:
            if tr.step_index != 0:
                raise InvalidTransitionError("a new episode must start at step_index 0")
            ep = _Episode(tr.episode_id, self.state_dim, self.action_dim)
            self.episodes.append(ep)
        elif tr.step_index != ep.n:
            raise InvalidTransitionError(
                f"episode {tr.episode_id}: expected step_index {ep.n}, got {tr.step_index}"
            )
        elif not np.array_equal(ep.next_states[ep.n - 1], tr.state):
            raise InvalidTransitionError(
                f"episode {tr.episode_id}: state does not continue from the previous next_state"
            )
        ep.append(tr)
        self.size += 1
        while self.size > self.capacity and len(self.episodes) > 1:
            self.size -= self.episodes.pop(0).n
        if self.size > self.capacity:
            raise InvalidTransitionError("capacity is smaller than a single episode")

    def sample_sequences(self, batch: int, horizon: int, rng: np.random.Generator,
                         segment_filter: int | None = None) -> SequenceBatch:
        """Uniform draw over all valid window start positions."""
        starts_per_ep = [ep.valid_starts(horizon, segment_filter) for ep in self.episodes]
        counts = np.array([len(s) for s in starts_per_ep], dtype=np.int64)
        total = int(counts.sum())
        if total == 0:
            what = "" if segment_filter is None else f" for segment {segment_filter}"
            raise NotEnoughDataError(f"no window of {horizon + 1} transitions{what}")
        flat = rng.integers(total, size=batch)
        bounds = np.cumsum(counts)
        ep_idx = np.searchsorted(bounds, flat, side="right")
        offsets = flat - (bounds[ep_idx] - counts[ep_idx])
        span = horizon + 1
        out = {
            "states": np.empty((batch, span, self.state_dim)),
            "actions": np.empty((batch, span, self.action_dim)),
            "rewards": np.empty((batch, span)),
            "next_states": np.empty((batch, span, self.state_dim)),
            "segment_ids": np.empty((batch, span), dtype=np.int64),
            "skills": np.empty((batch, span), dtype=np.int64),
        }
        starts = np.empty(batch, dtype=np.int64)
        episode_ids = np.empty(batch, dtype=np.int64)
        for b, (e, o) in enumerate(zip(ep_idx, offsets)):
            ep = self.episodes[e]
            s = starts_per_ep[e][o]
            sl = slice(s, s + span)
            out["states"][b] = ep.states[sl]
            out["actions"][b] = ep.actions[sl]
            out["rewards"][b] = ep.rewards[sl]
            out["next_states"][b] = ep.next_states[sl]
            out["segment_ids"][b] = ep.segments[sl]
            out["skills"][b] = ep.skills[sl]
            starts[b] = s
            episode_ids[b] = ep.episode_id
        return SequenceBatch(episode_ids=episode_ids, starts=starts, **out)

    def segments_with_data(self, horizon: int, segments) -> list[int]:
        return [s for s in segments
                if any(len(ep.valid_starts(horizon, s)) for ep in self.episodes)]

    # dump/load in the checkpoint's binary convention
    def dump(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<QII", self.capacity, self.state_dim, self.action_dim))
            fh.write(struct.pack("<I", len(self.episodes)))
            for ep in self.episodes:
                fh.write(struct.pack("<qI", ep.episode_id, ep.n))
                for arr in (ep.states, ep.actions, ep.rewards, ep.next_states):
                    fh.write(np.ascontiguousarray(arr[: ep.n], dtype="<f8").tobytes())
                for arr in (ep.segments, ep.skills):
                    fh.write(np.ascontiguousarray(arr[: ep.n], dtype="<i8").tobytes())

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        with open(path, "rb") as fh:
            data = fh.read()
        if data[: len(MAGIC)] != MAGIC:
            raise CheckpointError(f"{path}: bad magic/version")
        pos = len(MAGIC)
        capacity, sd, ad = struct.unpack_from("<QII", data, pos)
        pos += struct.calcsize("<QII")
        (n_eps,) = struct.unpack_from("<I", data, pos)
        pos += 4
        buf = cls(capacity, sd, ad)
        for _ in range(n_eps):
            eid, n = struct.unpack_from("<qI", data, pos)
            pos += struct.calcsize("<qI")
            ep = _Episode(eid, sd, ad, cap=max(n, 1))

            def grab(count, dtype):
                nonlocal pos
                arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
                pos += arr.nbytes
                return arr

            ep.states[:n] = grab(n * sd, "<f8").reshape(n, sd)
            ep.actions[:n] = grab(n * ad, "<f8").reshape(n, ad)
            ep.rewards[:n] = grab(n, "<f8")
            ep.next_states[:n] = grab(n * sd, "<f8").reshape(n, sd)
            ep.segments[:n] = grab(n, "<i8")
            ep.skills[:n] = grab(n, "<i8")
            ep.n = n
            buf.episodes.append(ep)
            buf.size += n
        return buf
