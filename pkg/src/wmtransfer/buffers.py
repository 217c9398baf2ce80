"""Expert / behavioral episode buffers, segment sampling and the JSONL dataset format."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .envs import Episode

EXPERT = "expert"
BEHAVIORAL = "behavioral"


class WarmingUp(RuntimeError):
    """Not enough data yet to draw a segment batch."""


class DatasetError(ValueError):
    pass


@dataclass
class SegmentBatch:
    """``B`` contiguous windows: states ``[B, H+1, s]``, actions ``[B, H, a]``.

    Deliberately carries no success flags, so nothing downstream can read an
    environment reward.
    """

    states: np.ndarray
    actions: np.ndarray
    episode_end: np.ndarray
    expert: np.ndarray

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    def __len__(self) -> int:
        return self.states.shape[0]


class ReplayBuffer:
    def __init__(self, role: str, capacity: int | None = None):
        if role not in (EXPERT, BEHAVIORAL):
            raise ValueError(f"unknown buffer role {role!r}")
        self.role = role
        self.capacity = capacity
        self.episodes: list[Episode] = []
        self.size = 0
        self._index: tuple[np.ndarray, np.ndarray] | None = None
        self._index_h = -1

    def __len__(self) -> int:
        return self.size

    @property
    def dims(self) -> tuple[int, int] | None:
        if not self.episodes:
            return None
        ep = self.episodes[0]
        return ep.states.shape[1], ep.actions.shape[1]

    def push_episode(self, episode: Episode) -> "ReplayBuffer":
        T = len(episode)
        if T == 0 or episode.states.shape[0] != T + 1:
            raise ValueError("episode needs T actions and T+1 states")
        if not episode.episode_end[-1]:
            raise ValueError("episode does not terminate")
        dims = self.dims
        if dims is not None and dims != (episode.states.shape[1], episode.actions.shape[1]):
            raise ValueError(f"episode dims {episode.states.shape[1], episode.actions.shape[1]} != buffer dims {dims}")
        self.episodes.append(episode)
        self.size += T
        if self.role == BEHAVIORAL and self.capacity is not None:
            while self.size > self.capacity and len(self.episodes) > 1:
                self.size -= len(self.episodes.pop(0))
        self._index = None
        return self

    def extend(self, episodes: Iterable[Episode]) -> "ReplayBuffer":
        for ep in episodes:
            self.push_episode(ep)
        return self

    def _windows(self, horizon: int) -> tuple[np.ndarray, np.ndarray]:
        if self._index is None or self._index_h != horizon:
            eps, starts = [], []
            for i, ep in enumerate(self.episodes):
                n = len(ep) - horizon + 1
                if n > 0:
                    eps.append(np.full(n, i))
                    starts.append(np.arange(n))
            if eps:
                self._index = (np.concatenate(eps), np.concatenate(starts))
            else:
                self._index = (np.zeros(0, dtype=int), np.zeros(0, dtype=int))
            self._index_h = horizon
        return self._index

    def num_windows(self, horizon: int) -> int:
        return len(self._windows(horizon)[0])

    def draw(self, n: int, horizon: int, rng: np.random.Generator):
        """``n`` uniformly drawn windows as (states, actions, episode_end)."""
        ep_idx, start_idx = self._windows(horizon)
        if len(ep_idx) == 0:
            raise WarmingUp(f"{self.role} buffer has no episode of length >= {horizon}")
        pick = rng.integers(0, len(ep_idx), size=n)
        s_dim, a_dim = self.dims
        states = np.empty((n, horizon + 1, s_dim))
        actions = np.empty((n, horizon, a_dim))
        ends = np.empty((n, horizon), dtype=bool)
        for row, k in enumerate(pick):
            ep = self.episodes[ep_idx[k]]
            t = start_idx[k]
            states[row] = ep.states[t:t + horizon + 1]
            actions[row] = ep.actions[t:t + horizon]
            ends[row] = ep.episode_end[t:t + horizon]
        return states, actions, ends


def sample_segments(expert: ReplayBuffer | None, behavioral: ReplayBuffer | None, batch: int,
                    horizon: int, expert_fraction: float, rng: np.random.Generator) -> SegmentBatch:
    """``ceil(expert_fraction * batch)`` rows from the expert buffer, the rest behavioral."""
    if not 0.0 <= expert_fraction <= 1.0:
        raise ValueError("expert_fraction must lie in [0, 1]")
    n_exp = math.ceil(expert_fraction * batch)
    n_beh = batch - n_exp
    parts = []
    if n_exp:
        if expert is None:
            raise WarmingUp("no expert buffer")
        parts.append(expert.draw(n_exp, horizon, rng))
    if n_beh:
        if behavioral is None:
            raise WarmingUp("no behavioral buffer")
        parts.append(behavioral.draw(n_beh, horizon, rng))
    states = np.concatenate([p[0] for p in parts])
    actions = np.concatenate([p[1] for p in parts])
    ends = np.concatenate([p[2] for p in parts])
    flags = np.concatenate([np.ones(n_exp, dtype=bool), np.zeros(n_beh, dtype=bool)])
    return SegmentBatch(states, actions, ends, flags)


# ------------------------------------------------------------ JSONL datasets


def episodes_to_lines(episodes: Sequence[Episode]) -> Iterable[str]:
    for e, ep in enumerate(episodes):
        for t in range(len(ep)):
            yield json.dumps({
                "task": ep.task,
                "episode": e,
                "t": t,
                "state": ep.states[t].tolist(),
                "action": ep.actions[t].tolist(),
                "next_state": ep.states[t + 1].tolist(),
                "success": bool(ep.success[t]),
                "episode_end": bool(ep.episode_end[t]),
            })


def save_dataset(path, episodes: Sequence[Episode]) -> None:
    """One transition per line; Python's float repr round-trips exactly."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for line in episodes_to_lines(episodes):
            fh.write(line)
            fh.write("\n")


_FIELDS = ("task", "episode", "t", "state", "action", "next_state", "success", "episode_end")


def load_dataset(path) -> list[Episode]:
    path = Path(path)
    episodes: list[Episode] = []
    cur: dict | None = None

    def close():
        if cur is not None:
            episodes.append(Episode(cur["task"], np.array(cur["states"]), np.array(cur["actions"]),
                                    np.array(cur["success"]), np.array(cur["ends"])))

    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict) or any(k not in rec for k in _FIELDS):
                    raise ValueError("missing fields")
                state = [float(x) for x in rec["state"]]
                action = [float(x) for x in rec["action"]]
                nxt = [float(x) for x in rec["next_state"]]
                if len(state) != len(nxt):
                    raise ValueError("state and next_state differ in length")
            except (ValueError, TypeError) as exc:
                raise DatasetError(f"{path}: line {lineno}: malformed record ({exc})") from None
            if cur is None or rec["episode"] != cur["id"]:
                close()
                if rec["t"] != 0:
                    raise DatasetError(f"{path}: line {lineno}: episode {rec['episode']} does not start at t=0")
                cur = {"id": rec["episode"], "task": rec["task"], "states": [state], "actions": [],
                       "success": [], "ends": []}
            elif rec["t"] != len(cur["actions"]) or state != cur["states"][-1]:
                raise DatasetError(f"{path}: line {lineno}: transition is not contiguous")
            cur["actions"].append(action)
            cur["states"].append(nxt)
            cur["success"].append(bool(rec["success"]))
            cur["ends"].append(bool(rec["episode_end"]))
    close()
    return episodes
