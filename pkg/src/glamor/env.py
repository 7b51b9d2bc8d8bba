"""Discrete episodic environments with indicator goal rewards, plus exact oracles.

All environments enumerate their states as integers ``0 .. num_states - 1``.
Grid states use row-major encoding ``id = y * width + x``. The action id
``num_actions`` is reserved for the END token and is never a legal move.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from typing import Sequence

import numpy as np

UP, RIGHT, DOWN, LEFT = range(4)
MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0))
ACTION_NAMES = ("up", "right", "down", "left")

FAIR, LOADED = 0, 1

KINDS = ("grid", "walled_grid", "die", "simon_says")


class ContractViolation(ValueError):
    """Raised when an operation is called outside its documented preconditions."""


def as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass(frozen=True)
class EnvSpec:
    num_states: int
    num_actions: int
    horizon: int
    slip_prob: float = 0.0
    kind: str = "grid"

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if not 0.0 <= self.slip_prob <= 1.0:
            raise ValueError(f"slip_prob must be in [0, 1], got {self.slip_prob}")
        if self.num_actions < 2:
            raise ValueError(f"need at least two actions, got {self.num_actions}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown env kind {self.kind!r}")


@dataclass(frozen=True)
class Transition:
    state: int
    action: int
    next_state: int


class DiscreteEnv:
    """Base class. Subclasses provide ``_base_transition`` and a start state.

    Instances are immutable after construction; every stochastic call takes the
    caller's generator, so separate threads only need separate generators.
    """

    spec: EnvSpec
    start_state: int

    @property
    def num_states(self) -> int:
        return self.spec.num_states

    @property
    def num_actions(self) -> int:
        return self.spec.num_actions

    @property
    def horizon(self) -> int:
        return self.spec.horizon

    @property
    def slip_prob(self) -> float:
        return self.spec.slip_prob

    @property
    def end_token(self) -> int:
        return self.spec.num_actions

    def _base_transition(self, state: int, action: int) -> np.ndarray:
        raise NotImplementedError

    def _check_action(self, action: int) -> None:
        if not 0 <= action < self.num_actions:
            raise ContractViolation(
                f"action {action} is not a real action (END={self.end_token})")

    def reset(self, rng=None) -> int:
        return self.start_state

    def step(self, state: int, action: int, rng) -> int:
        self._check_action(action)
        rng = as_rng(rng)
        if self.slip_prob > 0.0 and rng.random() < self.slip_prob:
            action = int(rng.integers(self.num_actions))
        probs = self._base_row(state, action)
        nonzero = np.flatnonzero(probs)
        if len(nonzero) == 1:
            return int(nonzero[0])
        return int(rng.choice(self.num_states, p=probs))

    def step_batch(self, states: np.ndarray, actions: np.ndarray, rng) -> np.ndarray:
        """Vectorised ``step`` for Monte-Carlo checks; slip is folded into the kernel."""
        rng = as_rng(rng)
        states = np.asarray(states)
        actions = np.asarray(actions)
        if np.any((actions < 0) | (actions >= self.num_actions)):
            raise ContractViolation("END or out-of-range action in batch")
        cum = self._cum_kernel[actions, states]
        u = rng.random(len(states))[:, None]
        nxt = (u < cum).argmax(axis=1)
        return nxt

    def _base_row(self, state: int, action: int) -> np.ndarray:
        return self._base_kernel[action, state]

    @cached_property
    def _base_kernel(self) -> np.ndarray:
        P = np.zeros((self.num_actions, self.num_states, self.num_states))
        for a in range(self.num_actions):
            for s in range(self.num_states):
                P[a, s] = self._base_transition(s, a)
        return P

    @cached_property
    def _kernel(self) -> np.ndarray:
        P = self._base_kernel
        p = self.slip_prob
        if p == 0.0:
            return P
        return (1.0 - p) * P + p * P.mean(axis=0, keepdims=True)

    @cached_property
    def _cum_kernel(self) -> np.ndarray:
        cum = np.cumsum(self._kernel, axis=2)
        cum[..., -1] = 1.0
        return cum

    def transition_matrix(self) -> np.ndarray:
        """Array ``P[a, s, s']`` including action slip."""
        return self._kernel

    @property
    def is_deterministic(self) -> bool:
        return bool(np.all(self._kernel.max(axis=2) == 1.0))

    @cached_property
    def reachable(self) -> frozenset[int]:
        return frozenset(reachable_states(self, self.start_state))

    @cached_property
    def goal_support(self) -> np.ndarray:
        """States that ``sample_goal`` draws from, uniformly."""
        return np.array(sorted(self.reachable - {self.start_state}), dtype=np.int64)

    def sample_goal(self, rng) -> int:
        support = self.goal_support
        return int(support[as_rng(rng).integers(len(support))])


class GridEnv(DiscreteEnv):
    """Four-connected grid. Moves into walls or off the grid leave the agent in place."""

    def __init__(self, width: int, height: int, start: tuple[int, int],
                 walls: Sequence[tuple[int, int]] = (), horizon: int = 20,
                 slip_prob: float = 0.0, kind: str | None = None):
        self.width = int(width)
        self.height = int(height)
        self.walls = frozenset((int(x), int(y)) for x, y in walls)
        if start in self.walls:
            raise ValueError("start cell is a wall")
        kind = kind or ("walled_grid" if self.walls else "grid")
        self.spec = EnvSpec(self.width * self.height, 4, horizon, slip_prob, kind)
        self.start_state = self.encode(*start)

    @classmethod
    def from_text(cls, text: str, horizon: int, slip_prob: float = 0.0) -> "GridEnv":
        """Parse a layout: one row per line, ``#`` wall, ``.`` floor, ``S`` start."""
        rows = [line.strip() for line in text.strip().splitlines() if line.strip()]
        if not rows or len({len(r) for r in rows}) != 1:
            raise ValueError("layout rows must be non-empty and of equal width")
        walls, start = [], None
        for y, row in enumerate(rows):
            for x, ch in enumerate(row):
                if ch == "#":
                    walls.append((x, y))
                elif ch == "S":
                    if start is not None:
                        raise ValueError("layout has more than one start cell")
                    start = (x, y)
                elif ch != ".":
                    raise ValueError(f"bad layout character {ch!r}")
        if start is None:
            raise ValueError("layout has no start cell")
        return cls(len(rows[0]), len(rows), start, walls, horizon, slip_prob,
                   kind="walled_grid")

    def encode(self, x: int, y: int) -> int:
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise ValueError(f"cell ({x}, {y}) outside the grid")
        return y * self.width + x

    def decode(self, state: int) -> tuple[int, int]:
        if not 0 <= state < self.num_states:
            raise ValueError(f"state {state} outside the grid")
        return state % self.width, state // self.width

    def move(self, state: int, action: int) -> int:
        x, y = self.decode(state)
        dx, dy = MOVES[action]
        nx, ny = x + dx, y + dy
        if not (0 <= nx < self.width and 0 <= ny < self.height) or (nx, ny) in self.walls:
            return state
        return self.encode(nx, ny)

    def step(self, state: int, action: int, rng) -> int:
        self._check_action(action)
        if self.slip_prob > 0.0:
            rng = as_rng(rng)
            if rng.random() < self.slip_prob:
                action = int(rng.integers(self.num_actions))
        return self.move(state, action)

    def _base_transition(self, state: int, action: int) -> np.ndarray:
        row = np.zeros(self.num_states)
        row[self.move(state, action)] = 1.0
        return row

    def render(self, marks: dict[int, str] | None = None) -> str:
        marks = marks or {}
        lines = []
        for y in range(self.height):
            row = []
            for x in range(self.width):
                s = self.encode(x, y)
                if s in marks:
                    row.append(marks[s])
                elif (x, y) in self.walls:
                    row.append("#")
                elif s == self.start_state:
                    row.append("S")
                else:
                    row.append(".")
            lines.append("".join(row))
        return "\n".join(lines)


class DieEnv(DiscreteEnv):
    """One-step MDP: state 0 is the pre-roll state, states 1..6 are die faces.

    Action ``FAIR`` lands uniformly on a face; ``LOADED`` always lands on 1.
    Faces are absorbing.
    """

    def __init__(self, slip_prob: float = 0.0):
        self.spec = EnvSpec(7, 2, 1, slip_prob, "die")
        self.start_state = 0

    def _base_transition(self, state: int, action: int) -> np.ndarray:
        row = np.zeros(7)
        if state != 0:
            row[state] = 1.0
        elif action == LOADED:
            row[1] = 1.0
        else:
            row[1:] = 1.0 / 6.0
        return row


class SimonSaysEnv(DiscreteEnv):
    """Match ``length`` uniformly random symbols out of ``num_symbols``.

    State 0 is a ready screen; its action is unconstrained and reveals the first
    symbol. State ``1 + (t - 1) * K + c`` shows symbol ``c`` at round ``t``; the
    next action must equal ``c``. One mismatch sends the game to the absorbing
    LOSE state; matching every round reaches the absorbing WIN state. A fixed,
    blindly executed sequence therefore wins with probability ``K ** -L``.
    """

    def __init__(self, num_symbols: int = 3, length: int = 3, slip_prob: float = 0.0):
        if num_symbols < 2 or length < 1:
            raise ValueError("need num_symbols >= 2 and length >= 1")
        self.num_symbols = K = int(num_symbols)
        self.length = L = int(length)
        self.win_state = 1 + L * K
        self.lose_state = 2 + L * K
        self.spec = EnvSpec(L * K + 3, K, L + 1, slip_prob, "simon_says")
        self.start_state = 0

    def display(self, round_: int, symbol: int) -> int:
        return 1 + (round_ - 1) * self.num_symbols + symbol

    def shown_symbol(self, state: int) -> int | None:
        if state == 0 or state >= self.win_state:
            return None
        return (state - 1) % self.num_symbols

    def _base_transition(self, state: int, action: int) -> np.ndarray:
        K, L = self.num_symbols, self.length
        row = np.zeros(self.num_states)
        if state in (self.win_state, self.lose_state):
            row[state] = 1.0
        elif state == 0:
            row[1:1 + K] = 1.0 / K
        else:
            round_ = (state - 1) // K + 1
            if action != self.shown_symbol(state):
                row[self.lose_state] = 1.0
            elif round_ == L:
                row[self.win_state] = 1.0
            else:
                first = self.display(round_ + 1, 0)
                row[first:first + K] = 1.0 / K
        return row

    @cached_property
    def goal_support(self) -> np.ndarray:
        return np.array([self.win_state], dtype=np.int64)

    def true_win_probability(self) -> float:
        return float(self.num_symbols) ** -self.length


def load_layout(name: str = "walled15.txt") -> str:
    return resources.files("glamor").joinpath("data", name).read_text()


def make_env(name: str, slip_prob: float = 0.0, **kwargs) -> DiscreteEnv:
    """Construct one of the shipped environments by name."""
    if name == "grid7":
        return GridEnv(7, 7, (3, 3), horizon=kwargs.get("horizon", 20), slip_prob=slip_prob)
    if name == "walled15":
        return GridEnv.from_text(load_layout(), horizon=kwargs.get("horizon", 40),
                                 slip_prob=slip_prob)
    if name == "die":
        return DieEnv(slip_prob)
    if name == "simon":
        return SimonSaysEnv(kwargs.get("num_symbols", 3), kwargs.get("length", 3), slip_prob)
    raise ValueError(f"unknown environment {name!r}")


ENV_NAMES = ("grid7", "walled15", "die", "simon")


# ---------------------------------------------------------------------------
# Oracles


def is_achieved(state: int, goal: int) -> bool:
    return int(state) == int(goal)


def reachable_states(env: DiscreteEnv, start: int) -> set[int]:
    support = env.transition_matrix().sum(axis=0) > 0
    seen = {int(start)}
    queue = deque([int(start)])
    while queue:
        s = queue.popleft()
        for nxt in np.flatnonzero(support[s]):
            nxt = int(nxt)
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen


def shortest_path_oracle(env: DiscreteEnv, start: int, goal: int) -> int | None:
    """BFS distance in steps, or ``None`` when the goal is unreachable."""
    if not env.is_deterministic:
        raise ContractViolation("shortest_path_oracle needs deterministic dynamics")
    dist = bfs_distances(env, start)
    d = dist[goal]
    return None if d < 0 else int(d)


def bfs_distances(env: DiscreteEnv, start: int) -> np.ndarray:
    """Distance from ``start`` to every state over the transition support; -1 if unreachable."""
    support = env.transition_matrix().sum(axis=0) > 0
    dist = np.full(env.num_states, -1, dtype=np.int64)
    dist[start] = 0
    queue = deque([int(start)])
    while queue:
        s = queue.popleft()
        for nxt in np.flatnonzero(support[s]):
            if dist[nxt] < 0:
                dist[nxt] = dist[s] + 1
                queue.append(int(nxt))
    return dist


def final_state_distribution(env: DiscreteEnv, start: int, actions: Sequence[int]) -> np.ndarray:
    """Distribution of the state reached after executing ``actions`` open-loop."""
    if len(actions) > env.horizon:
        raise ContractViolation(
            f"sequence of length {len(actions)} exceeds horizon {env.horizon}")
    if env.num_states > 10_000:
        raise ContractViolation("state space too large to enumerate")
    P = env.transition_matrix()
    dist = np.zeros(env.num_states)
    dist[start] = 1.0
    for a in actions:
        if not 0 <= a < env.num_actions:
            raise ContractViolation(f"action {a} is not a real action")
        dist = dist @ P[a]
    return dist


def exact_success_prob(env: DiscreteEnv, start: int, actions: Sequence[int], goal: int) -> float:
    """``p(s_k = goal | s_1 = start, do(actions))`` by forward dynamic programming."""
    return float(final_state_distribution(env, start, actions)[goal])


def hitting_probability(env: DiscreteEnv, start: int, goal: int, steps: int,
                        policy: np.ndarray | None = None) -> float:
    """Probability that a reactive policy visits ``goal`` within ``steps`` steps.

    ``policy[s, a]`` defaults to uniform. The goal is made absorbing, so this is
    the absorption probability of the product chain.
    """
    P = env.transition_matrix()
    if policy is None:
        policy = np.full((env.num_states, env.num_actions), 1.0 / env.num_actions)
    chain = np.einsum("sa,ast->st", policy, P)
    chain[goal] = 0.0
    chain[goal, goal] = 1.0
    dist = np.zeros(env.num_states)
    dist[start] = 1.0
    for _ in range(steps):
        dist = dist @ chain
    return float(dist[goal])
