"""Count-based autoregressive model over action tokens.

Contexts are stored as a trie: one root per ``(start, goal)`` pair (goal is -1
for the action prior) and one child per emitted token. Each node holds the
weighted count of every next token, END included. Predictions are the smoothed
frequencies ``(count + smoothing) / (total + smoothing * vocab)``.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from ..env import ContractViolation

UNSEEN = -1


class TabularSequenceModel:
    backend = "tabular"

    def __init__(self, num_states: int, num_actions: int, max_horizon: int,
                 goal_conditioned: bool, smoothing: float = 0.1):
        if smoothing <= 0:
            raise ValueError("smoothing must be positive")
        self.num_states = int(num_states)
        self.num_actions = int(num_actions)
        self.vocab = self.num_actions + 1
        self.end = self.num_actions
        self.max_horizon = int(max_horizon)
        self.goal_conditioned = bool(goal_conditioned)
        self.smoothing = float(smoothing)
        self.version = 0
        self._roots: dict[tuple[int, int], int] = {}
        self._child: dict[int, int] = {}
        self._counts = np.zeros((1024, self.vocab))
        self._size = 0
        self._uniform = np.full(self.vocab, -np.log(self.vocab))

    @property
    def role(self) -> str:
        return "inverse" if self.goal_conditioned else "prior"

    @property
    def num_nodes(self) -> int:
        return self._size

    # -- context handles ---------------------------------------------------

    def _root_key(self, start: int, goal: int | None) -> tuple[int, int]:
        if self.goal_conditioned:
            if goal is None:
                raise ContractViolation("inverse-dynamics model needs a goal")
            return int(start), int(goal)
        if goal is not None:
            raise ContractViolation("the action prior does not take a goal")
        return int(start), -1

    def root(self, start: int, goal: int | None = None) -> int:
        return self._roots.get(self._root_key(start, goal), UNSEEN)

    def child(self, handle: int, token: int) -> int:
        if handle == UNSEEN:
            return UNSEEN
        return self._child.get(handle * self.vocab + int(token), UNSEEN)

    def logprobs(self, handle: int) -> np.ndarray:
        if handle == UNSEEN:
            return self._uniform.copy()
        c = self._counts[handle] + self.smoothing
        return np.log(c) - np.log(c.sum())

    def token_logprobs(self, start: int, goal: int | None, prefix: Sequence[int]) -> np.ndarray:
        if len(prefix) > self.max_horizon:
            raise ContractViolation(
                f"prefix of length {len(prefix)} exceeds max_horizon {self.max_horizon}")
        h = self.root(start, goal)
        for tok in prefix:
            if tok == self.end:
                raise ContractViolation("prefix contains END")
            h = self.child(h, tok)
        return self.logprobs(h)

    def sequence_logprob(self, start: int, goal: int | None, tokens: Sequence[int]) -> float:
        if not tokens or tokens[-1] != self.end:
            raise ContractViolation("sequence must end with END")
        if len(tokens) - 1 > self.max_horizon:
            raise ContractViolation("sequence longer than max_horizon")
        h = self.root(start, goal)
        total = 0.0
        for tok in tokens:
            total += float(self.logprobs(h)[tok])
            h = self.child(h, tok)
        return total

    def context_count(self, start: int, goal: int | None = None) -> float:
        """Total weight of examples observed from this root context."""
        h = self.root(start, goal)
        return 0.0 if h == UNSEEN else float(self._counts[h].sum())

    # -- updates -------------------------------------------------------------

    def _new_node(self) -> int:
        if self._size == len(self._counts):
            grown = np.zeros((2 * len(self._counts), self.vocab))
            grown[:self._size] = self._counts
            self._counts = grown
        self._size += 1
        return self._size - 1

    def _get_root(self, key: tuple[int, int]) -> int:
        node = self._roots.get(key)
        if node is None:
            node = self._roots[key] = self._new_node()
        return node

    def _get_child(self, node: int, token: int) -> int:
        key = node * self.vocab + token
        nxt = self._child.get(key)
        if nxt is None:
            nxt = self._child[key] = self._new_node()
        return nxt

    def observe(self, start: int, goal: int | None, tokens: Sequence[int], weight: float = 1.0) -> None:
        """Add one example ``tokens`` (ending in END) with the given weight."""
        if not tokens or tokens[-1] != self.end:
            raise ContractViolation("sequence must end with END")
        if len(tokens) - 1 > self.max_horizon:
            raise ContractViolation("sequence longer than max_horizon")
        node = self._get_root(self._root_key(start, goal))
        counts = self._counts
        for tok in tokens[:-1]:
            counts[node, tok] += weight
            node = self._get_child(node, tok)
            counts = self._counts
        counts[node, self.end] += weight
        self.version += 1

    def observe_trajectory(self, states: Sequence[int], actions: Sequence[int],
                           max_horizon: int | None = None, weight: float = 1.0) -> None:
        """Count every hindsight-relabelled pair ``i < j <= i + H`` of one trajectory.

        Equivalent to calling ``observe`` on each relabelled example, but the
        prior walks each start index once.
        """
        H = self.max_horizon if max_horizon is None else min(max_horizon, self.max_horizon)
        L = len(actions)
        end = self.end
        if self.goal_conditioned:
            for i in range(L):
                last = min(L, i + H)
                s = int(states[i])
                for j in range(i + 1, last + 1):
                    node = self._get_root((s, int(states[j])))
                    for t in range(i, j):
                        self._counts[node, actions[t]] += weight
                        node = self._get_child(node, actions[t])
                    self._counts[node, end] += weight
        else:
            for i in range(L):
                last = min(L, i + H)
                node = self._get_root((int(states[i]), -1))
                for t in range(i, last):
                    # examples (i, j) with j > t pass through this node on actions[t]
                    self._counts[node, actions[t]] += weight * (last - t)
                    node = self._get_child(node, actions[t])
                    self._counts[node, end] += weight
        self.version += 1

    def observe_many(self, examples: Iterable, weight: float = 1.0) -> None:
        for ex in examples:
            self.observe(ex.start, ex.goal if self.goal_conditioned else None,
                         ex.actions, weight)

    # -- serialisation -------------------------------------------------------

    def state_arrays(self) -> tuple[dict, dict[str, np.ndarray]]:
        """``(meta, arrays)`` describing the model exactly; rows are sorted by key."""
        meta = {"backend": self.backend, "role": self.role, "num_states": self.num_states,
                "num_actions": self.num_actions, "max_horizon": self.max_horizon,
                "smoothing": self.smoothing}
        roots = np.array([[s, g, n] for (s, g), n in sorted(self._roots.items())],
                         dtype=np.int64).reshape(-1, 3)
        keys = np.fromiter(self._child.keys(), dtype=np.int64, count=len(self._child))
        kids = np.fromiter(self._child.values(), dtype=np.int64, count=len(self._child))
        order = np.argsort(keys, kind="stable")
        keys, kids = keys[order], kids[order]
        edges = np.stack([keys // self.vocab, keys % self.vocab, kids], axis=1)
        return meta, {"roots": roots, "edges": edges, "counts": self._counts[:self._size]}

    @classmethod
    def from_arrays(cls, meta: dict, arrays: dict) -> "TabularSequenceModel":
        model = cls(meta["num_states"], meta["num_actions"], meta["max_horizon"],
                    meta["role"] == "inverse", meta["smoothing"])
        counts = np.asarray(arrays["counts"], dtype=float).reshape(-1, model.vocab)
        model._counts = np.zeros((max(1024, len(counts)), model.vocab))
        model._counts[:len(counts)] = counts
        model._size = len(counts)
        model._roots = {(int(s), int(g)): int(n) for s, g, n in arrays["roots"].tolist()}
        edges = np.asarray(arrays["edges"], dtype=np.int64).reshape(-1, 3)
        keys = edges[:, 0] * model.vocab + edges[:, 1]
        model._child = dict(zip(keys.tolist(), edges[:, 2].tolist()))
        return model
