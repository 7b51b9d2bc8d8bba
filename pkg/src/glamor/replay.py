"""Circular trajectory storage with hindsight relabelling."""
from __future__ import annotations

import json
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class EmptyBufferError(RuntimeError):
    pass


@dataclass
class Trajectory:
    states: list[int]
    actions: list[int]
    pursued_goal: int
    achieved: bool = False
    tag: int | None = None

    def __post_init__(self):
        if len(self.states) != len(self.actions) + 1:
            raise ValueError("a trajectory needs exactly one more state than actions")

    def __len__(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class RelabeledExample:
    start: int
    goal: int
    actions: tuple[int, ...] = field(default=())  # ends with END

    @property
    def length(self) -> int:
        return len(self.actions) - 1


def num_pairs(length: int, max_horizon: int, self_pairs: bool = False) -> int:
    """Closed-form count of relabelled examples for a trajectory of ``length`` steps."""
    n = sum(length - d + 1 for d in range(1, min(length, max_horizon) + 1))
    return n + (length + 1 if self_pairs else 0)


def relabel(traj: Trajectory, max_horizon: int, end_token: int,
            self_pairs: bool = False) -> list[RelabeledExample]:
    """Every pair ``i < j`` with ``j - i <= max_horizon`` as ``(s_i, s_j, a_i..a_{j-1}, END)``.

    With ``self_pairs`` the zero-length examples ``(s_i, s_i, [END])`` are included too.
    """
    L = len(traj.actions)
    out = []
    lo = 0 if self_pairs else 1
    for i in range(L + 1):
        for d in range(lo, min(max_horizon, L - i) + 1):
            j = i + d
            out.append(RelabeledExample(int(traj.states[i]), int(traj.states[j]),
                                        tuple(traj.actions[i:j]) + (end_token,)))
    return out


class ReplayBuffer:
    """FIFO buffer of trajectories.

    A single collector writes and any number of samplers read; the lock makes
    every ``add`` and every batch atomic with respect to each other.
    """

    def __init__(self, capacity: int, max_horizon: int, end_token: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.max_horizon = int(max_horizon)
        self.end_token = int(end_token)
        self._items: deque[Trajectory] = deque()
        self._lock = threading.Lock()
        self.total_added = 0

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(list(self._items))

    def add(self, traj: Trajectory) -> Trajectory | None:
        """Store ``traj``; returns the evicted trajectory when the buffer was full."""
        with self._lock:
            evicted = None
            if len(self._items) == self.capacity:
                evicted = self._items.popleft()
            if traj.tag is None:
                traj.tag = self.total_added
            self._items.append(traj)
            self.total_added += 1
            return evicted

    def sample_batch(self, n: int, rng) -> list[RelabeledExample]:
        """Trajectory uniformly, then a valid ``(i, j)`` pair uniformly within it."""
        with self._lock:
            usable = [t for t in self._items if len(t.actions) > 0]
            if not usable:
                raise EmptyBufferError("no trajectory with at least one step")
            H = self.max_horizon
            out = []
            picks = rng.integers(len(usable), size=n)
            for k in picks:
                traj = usable[k]
                L = len(traj.actions)
                hmax = min(H, L)
                while True:
                    i = int(rng.integers(L))
                    d = int(rng.integers(1, hmax + 1))
                    if i + d <= L:
                        break
                j = i + d
                out.append(RelabeledExample(int(traj.states[i]), int(traj.states[j]),
                                            tuple(traj.actions[i:j]) + (self.end_token,)))
            return out

    def export_jsonl(self, path) -> None:
        """One trajectory per line: goal, states, actions, achieved."""
        with open(path, "w") as fh:
            for traj in self:
                fh.write(json.dumps({"goal": traj.pursued_goal, "states": list(map(int, traj.states)),
                                     "actions": list(map(int, traj.actions)),
                                     "achieved": bool(traj.achieved)}) + "\n")

    @classmethod
    def load_jsonl(cls, path, capacity: int, max_horizon: int, end_token: int) -> "ReplayBuffer":
        buf = cls(capacity, max_horizon, end_token)
        for line in Path(path).read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                buf.add(Trajectory(rec["states"], rec["actions"], rec["goal"],
                                   rec.get("achieved", False)))
        return buf


def examples_from(trajectories: Sequence[Trajectory], max_horizon: int, end_token: int):
    for traj in trajectories:
        yield from relabel(traj, max_horizon, end_token)


def pair_index(traj_len: int, max_horizon: int) -> np.ndarray:
    """All valid ``(i, j)`` pairs of a trajectory, one per row."""
    return np.array([(i, i + d) for i in range(traj_len)
                     for d in range(1, min(max_horizon, traj_len - i) + 1)], dtype=np.int64)
