"""Training loops, the GCSL baseline and the evaluation protocol."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .env import DiscreteEnv, bfs_distances, is_achieved
from .planner import GlamorActor, PlannerConfig, plan
from .replay import EmptyBufferError, ReplayBuffer, Trajectory
from .seqmodel import LossWeights, train_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EpsilonSchedule:
    eps_initial: float = 1.0
    eps_final: float = 0.1
    decay_steps: int = 30_000

    def value(self, step: int) -> float:
        if self.decay_steps <= 0 or step >= self.decay_steps:
            return self.eps_final
        frac = step / self.decay_steps
        return self.eps_initial + (self.eps_final - self.eps_initial) * frac

    @classmethod
    def constant(cls, eps: float) -> "EpsilonSchedule":
        return cls(eps, eps, 0)


# ---------------------------------------------------------------------------
# Evaluation


@dataclass(frozen=True)
class EvalRow:
    goal: int
    trial: int
    achieved: bool
    steps: int
    optimal: bool


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    @property
    def achievement_rate(self) -> float:
        return float(np.mean([r.achieved for r in self.rows])) if self.rows else 0.0

    @property
    def optimal_rate(self) -> float:
        return float(np.mean([r.optimal for r in self.rows])) if self.rows else 0.0

    def per_goal(self) -> dict[int, tuple[float, float]]:
        out: dict[int, list] = {}
        for r in self.rows:
            out.setdefault(r.goal, []).append(r)
        return {g: (float(np.mean([r.achieved for r in rs])), float(np.mean([r.optimal for r in rs])))
                for g, rs in out.items()}


class RandomActor:
    stops_on_goal = True

    def __init__(self, num_actions: int):
        self.num_actions = num_actions

    def act(self, state, goal, t, rng):
        return int(rng.integers(self.num_actions))


class OracleActor:
    """Greedy descent on exact BFS distance-to-goal (deterministic envs)."""

    stops_on_goal = True

    def __init__(self, env: DiscreteEnv):
        self.env = env
        P = env.transition_matrix()
        self._next = P.argmax(axis=2)  # [a, s]
        self._dist_cache: dict[int, np.ndarray] = {}

    def _dist_to(self, goal):
        if goal not in self._dist_cache:
            # reverse BFS over deterministic successors
            n = self.env.num_states
            dist = np.full(n, -1)
            dist[goal] = 0
            level = 0
            while True:
                new = [s for s in range(n)
                       if dist[s] < 0 and np.any(dist[self._next[:, s]] == level)]
                if not new:
                    break
                level += 1
                dist[new] = level
            self._dist_cache[goal] = dist
        return self._dist_cache[goal]

    def act(self, state, goal, t, rng):
        dist = self._dist_to(goal)
        succ = self._next[:, state]
        d = dist[succ].astype(float)
        d[d < 0] = np.inf
        return int(np.argmin(d))


def build_eval_goal_set(env: DiscreteEnv, n: int, rng) -> list[int]:
    """``n`` distinct goals drawn without replacement from the goal distribution's support."""
    support = env.goal_support
    if n > len(support):
        raise ValueError(f"asked for {n} goals but only {len(support)} are reachable")
    picks = rng.choice(len(support), size=n, replace=False)
    return sorted(int(support[i]) for i in picks)


def run_episode(env: DiscreteEnv, actor, goal: int, rng, dist_to_goal: int | None = None):
    s = env.reset(rng)
    t = 0
    first_hit = 0 if s == goal else None
    T = env.horizon
    while t < T:
        if actor.stops_on_goal and is_achieved(s, goal):
            break
        a = actor.act(s, goal, t, rng)
        if a is None:
            break
        s = env.step(s, a, rng)
        t += 1
        if first_hit is None and s == goal:
            first_hit = t
    achieved = is_achieved(s, goal)
    steps = t
    hit = t if actor.stops_on_goal else first_hit
    optimal = bool(achieved and dist_to_goal is not None and hit == dist_to_goal)
    return achieved, steps, optimal


def evaluate(env: DiscreteEnv, actor, goal_set: Sequence[int], trials: int, rng) -> EvalReport:
    """Run ``trials`` episodes per goal with exploration off."""
    if not goal_set:
        raise ValueError("goal_set must be non-empty")
    dist = bfs_distances(env, env.start_state)
    report = EvalReport()
    for g in goal_set:
        d = int(dist[g]) if dist[g] >= 0 else None
        for k in range(trials):
            achieved, steps, optimal = run_episode(env, actor, g, rng, d)
            report.rows.append(EvalRow(int(g), k, achieved, steps, optimal))
    return report


# ---------------------------------------------------------------------------
# GLAMOR training


@dataclass
class GlamorTrainConfig:
    steps: int = 20_000
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    eval_planner: PlannerConfig | None = None
    schedule: EpsilonSchedule = field(default_factory=EpsilonSchedule)
    replay_ratio: int = 4
    batch_size: int = 64
    min_steps_learn: int = 0
    alpha: float = 1.0
    tabular_update: str = "exhaustive"
    log_interval: int = 1000
    eval_interval: int = 0
    eval_trials: int = 2


@dataclass
class TrainResult:
    rows: list[dict]
    buffer: ReplayBuffer
    steps: int
    episodes: int


def _collect_open_loop(env, id_model, prior_model, cfg: PlannerConfig, goal, eps, rng, hooks):
    s = env.reset(rng)
    states, actions = [s], []
    A = env.num_actions
    if eps >= 1.0 or s == goal:
        open_loop: tuple[int, ...] = ()
    else:
        H = min(env.horizon, id_model.max_horizon)
        p = plan(id_model, prior_model, s, goal, replace(cfg, max_len=H), rng)
        open_loop = () if p.degenerate else p.actions[:-1]
    for t in range(env.horizon):
        if is_achieved(s, goal):
            break
        if hooks is not None:
            hooks(t)
        if t < len(open_loop):
            a = open_loop[t]
            if rng.random() < eps:
                a = int(rng.integers(A))
        else:
            a = int(rng.integers(A))
        s = env.step(s, a, rng)
        states.append(s)
        actions.append(a)
    return Trajectory(states, actions, goal, is_achieved(s, goal))


def _batch_losses(id_model, prior_model, buffer, n, rng):
    try:
        batch = buffer.sample_batch(n, rng)
    except EmptyBufferError:
        return math.nan, math.nan
    if id_model.backend == "tabular":
        ids = [-id_model.sequence_logprob(e.start, e.goal, e.actions) for e in batch]
        prs = [-prior_model.sequence_logprob(e.start, None, e.actions) for e in batch]
        return float(np.mean(ids)), float(np.mean(prs))
    starts = [e.start for e in batch]
    seqs = [e.actions for e in batch]
    return (float(id_model.nll(starts, [e.goal for e in batch], seqs).mean()),
            float(prior_model.nll(starts, None, seqs).mean()))


def glamor_train(env: DiscreteEnv, id_model, prior_model, buffer: ReplayBuffer,
                 config: GlamorTrainConfig, seed: int,
                 eval_goals: Sequence[int] | None = None,
                 hooks: Callable[[int], None] | None = None,
                 on_episode: Callable[[Trajectory], None] | None = None) -> TrainResult:
    """Collect open-loop episodes and fit both models, one trajectory per iteration.

    Each episode plans once from the initial state and follows that plan
    without replanning, replacing every action by a uniform one with
    probability epsilon; once the plan is exhausted the remaining steps are
    uniform. ``hooks(t)`` is called before every environment step.

    Tabular models are updated with ``tabular_update="exhaustive"`` by
    counting every relabelled pair of each new trajectory once (and removing
    the pairs of evicted trajectories), which makes the counts the exact
    maximum-likelihood fit of the buffer. ``"sampled"`` instead runs
    ``replay_ratio`` batches per environment step, like the neural backend.
    """
    data_rng, eval_rng, log_rng = (np.random.default_rng(s)
                                   for s in np.random.SeedSequence(seed).spawn(3))
    eval_cfg = config.eval_planner or config.planner
    tabular = id_model.backend == "tabular"
    exhaustive = tabular and config.tabular_update == "exhaustive"
    H = buffer.max_horizon
    weights = LossWeights(config.alpha)
    rows: list[dict] = []
    step = 0
    episodes = 0
    next_log = config.log_interval if config.log_interval > 0 else None
    next_eval = config.eval_interval if config.eval_interval > 0 else None
    last_losses = (math.nan, math.nan)

    def log_row(final=False):
        nonlocal next_eval, last_losses
        if exhaustive:
            last_losses = _batch_losses(id_model, prior_model, buffer, config.batch_size, log_rng)
        row = {"step": step, "eps": config.schedule.value(step),
               "id_loss": last_losses[0], "prior_loss": last_losses[1],
               "eval_achievement_rate": None, "eval_optimal_rate": None}
        due = next_eval is not None and step >= next_eval
        if eval_goals and (due or final):
            actor = GlamorActor(id_model, prior_model, eval_cfg, env.horizon)
            rep = evaluate(env, actor, eval_goals, config.eval_trials, eval_rng)
            row["eval_achievement_rate"] = rep.achievement_rate
            row["eval_optimal_rate"] = rep.optimal_rate
            while next_eval is not None and next_eval <= step:
                next_eval += config.eval_interval
        rows.append(row)
        log.debug("step %d eps %.3f losses %.3f/%.3f", step, row["eps"], *last_losses)

    while step < config.steps:
        eps = config.schedule.value(step)
        goal = env.sample_goal(data_rng)
        traj = _collect_open_loop(env, id_model, prior_model, config.planner, goal, eps,
                                  data_rng, hooks)
        episodes += 1
        n = len(traj.actions)
        step += n
        evicted = buffer.add(traj)
        if on_episode is not None:
            on_episode(traj)
        if exhaustive:
            for model in (id_model, prior_model):
                model.observe_trajectory(traj.states, traj.actions, H)
                if evicted is not None:
                    model.observe_trajectory(evicted.states, evicted.actions, H, weight=-1.0)
        elif step >= config.min_steps_learn:
            for _ in range(config.replay_ratio * n):
                try:
                    batch = buffer.sample_batch(config.batch_size, data_rng)
                except EmptyBufferError:
                    break
                last_losses = train_batch(id_model, prior_model, batch, weights)
        while next_log is not None and step >= next_log and step < config.steps:
            log_row()
            next_log += config.log_interval
    log_row(final=True)
    return TrainResult(rows, buffer, step, episodes)


# ---------------------------------------------------------------------------
# GCSL


class TabularGCSLPolicy:
    """``pi(a | s, g, h)`` from smoothed counts; ``h`` is the integer number of steps left."""

    def __init__(self, num_states: int, num_actions: int, max_horizon: int,
                 smoothing: float = 0.1):
        self.num_states = num_states
        self.num_actions = num_actions
        self.max_horizon = max_horizon
        self.smoothing = smoothing
        self._counts: dict[tuple[int, int, int], np.ndarray] = {}

    def probs(self, state: int, goal: int, h: int) -> np.ndarray:
        c = self._counts.get((int(state), int(goal), int(h)))
        if c is None:
            return np.full(self.num_actions, 1.0 / self.num_actions)
        c = c + self.smoothing
        return c / c.sum()

    def observe(self, state: int, action: int, goal: int, h: int, weight: float = 1.0) -> None:
        key = (int(state), int(goal), int(h))
        c = self._counts.get(key)
        if c is None:
            c = self._counts[key] = np.zeros(self.num_actions)
        c[action] += weight

    def observe_trajectory(self, states, actions, max_horizon: int | None = None,
                           weight: float = 1.0) -> None:
        """Relabel to ``(s_i, a_i, g = s_j, h = j - i)`` for every ``i < j <= i + H``."""
        H = self.max_horizon if max_horizon is None else max_horizon
        L = len(actions)
        for i in range(L):
            for j in range(i + 1, min(L, i + H) + 1):
                self.observe(states[i], actions[i], states[j], j - i, weight)

    def state_arrays(self) -> tuple[dict, dict[str, np.ndarray]]:
        keys = sorted(self._counts)
        meta = {"format": "glamor-gcsl", "version": 1, "num_states": self.num_states,
                "num_actions": self.num_actions, "max_horizon": self.max_horizon,
                "smoothing": self.smoothing}
        counts = np.array([self._counts[k] for k in keys], dtype=float).reshape(-1, self.num_actions)
        return meta, {"keys": np.array(keys, dtype=np.int64).reshape(-1, 3), "counts": counts}

    @classmethod
    def from_arrays(cls, meta: dict, arrays: dict) -> "TabularGCSLPolicy":
        if meta.get("format") != "glamor-gcsl":
            raise ValueError("not a GCSL checkpoint")
        pol = cls(meta["num_states"], meta["num_actions"], meta["max_horizon"], meta["smoothing"])
        for k, c in zip(arrays["keys"].tolist(), arrays["counts"]):
            pol._counts[tuple(k)] = np.array(c, dtype=float)
        return pol

    def sample(self, state, goal, h, rng) -> int:
        return int(rng.choice(self.num_actions, p=self.probs(state, goal, h)))

    def greedy(self, state, goal, h, rng) -> int:
        p = self.probs(state, goal, h)
        best = np.flatnonzero(p == p.max())
        return int(best[rng.integers(len(best))])


class GCSLActor:
    """Reactive GCSL policy conditioned on time remaining ``T - t``."""

    stops_on_goal = True

    def __init__(self, policy: TabularGCSLPolicy, horizon: int, greedy: bool = True):
        self.policy = policy
        self.horizon = horizon
        self.greedy = greedy

    def act(self, state, goal, t, rng):
        h = min(self.horizon - t, self.policy.max_horizon)
        if self.greedy:
            return self.policy.greedy(state, goal, h, rng)
        return self.policy.sample(state, goal, h, rng)


@dataclass
class GCSLTrainConfig:
    steps: int = 20_000
    schedule: EpsilonSchedule = field(default_factory=EpsilonSchedule)
    log_interval: int = 1000
    eval_interval: int = 0
    eval_trials: int = 2


def gcsl_train(env: DiscreteEnv, policy: TabularGCSLPolicy, buffer: ReplayBuffer,
               config: GCSLTrainConfig, seed: int,
               eval_goals: Sequence[int] | None = None,
               on_episode: Callable[[Trajectory], None] | None = None) -> TrainResult:
    """Reactive epsilon-greedy collection and imitation of every relabelled tuple."""
    data_rng, eval_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    H = buffer.max_horizon
    A = env.num_actions
    rows: list[dict] = []
    step = episodes = 0
    next_log = config.log_interval if config.log_interval > 0 else None
    next_eval = config.eval_interval if config.eval_interval > 0 else None

    def log_row(final=False):
        nonlocal next_eval
        row = {"step": step, "eps": config.schedule.value(step), "id_loss": None,
               "prior_loss": None, "eval_achievement_rate": None, "eval_optimal_rate": None}
        due = next_eval is not None and step >= next_eval
        if eval_goals and (due or final):
            rep = evaluate(env, GCSLActor(policy, env.horizon), eval_goals,
                           config.eval_trials, eval_rng)
            row["eval_achievement_rate"] = rep.achievement_rate
            row["eval_optimal_rate"] = rep.optimal_rate
            while next_eval is not None and next_eval <= step:
                next_eval += config.eval_interval
        rows.append(row)

    while step < config.steps:
        eps = config.schedule.value(step)
        goal = env.sample_goal(data_rng)
        s = env.reset(data_rng)
        states, actions = [s], []
        for t in range(env.horizon):
            if is_achieved(s, goal):
                break
            if data_rng.random() < eps:
                a = int(data_rng.integers(A))
            else:
                a = policy.sample(s, goal, min(env.horizon - t, H), data_rng)
            s = env.step(s, a, data_rng)
            states.append(s)
            actions.append(a)
        traj = Trajectory(states, actions, goal, is_achieved(s, goal))
        episodes += 1
        step += len(actions)
        evicted = buffer.add(traj)
        policy.observe_trajectory(traj.states, traj.actions, H)
        if evicted is not None:
            policy.observe_trajectory(evicted.states, evicted.actions, H, weight=-1.0)
        if on_episode is not None:
            on_episode(traj)
        while next_log is not None and step >= next_log and step < config.steps:
            log_row()
            next_log += config.log_interval
    log_row(final=True)
    return TrainResult(rows, buffer, step, episodes)


def gcsl_fit(policy: TabularGCSLPolicy, trajectories, max_horizon: int) -> TabularGCSLPolicy:
    for traj in trajectories:
        policy.observe_trajectory(traj.states, traj.actions, max_horizon)
    return policy


def gcsl_exact_map(env: DiscreteEnv, policy: np.ndarray, goal_dist: np.ndarray) -> np.ndarray:
    """One step of exact GCSL in a one-step MDP with perfect distillation.

    ``policy[g, a]`` is ``pi_t(a | g)`` for every state ``g``; ``goal_dist[g]``
    is ``p(g)``. Returns ``pi_{t+1}(a | g) = p(s=g | a) p_t(a) / p(s=g)`` with
    ``p_t(a) = sum_g' p(g') pi_t(a | g')``. Rows of goals that are never
    reached keep their previous value.
    """
    P = env.transition_matrix()[:, env.start_state, :]  # [a, s]
    p_action = goal_dist @ policy  # [a]
    joint = (P * p_action[:, None]).T  # [g, a] = p(s=g | a) p_t(a)
    norm = joint.sum(axis=1, keepdims=True)
    out = policy.copy()
    ok = norm[:, 0] > 0
    out[ok] = joint[ok] / norm[ok]
    return out
