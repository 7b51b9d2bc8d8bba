"""Desk-scale experiments. Each returns plain rows that the CLI writes as CSV."""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .agent import (EpsilonSchedule, GCSLActor, GlamorTrainConfig, TabularGCSLPolicy,
                    build_eval_goal_set, evaluate, gcsl_exact_map, gcsl_fit, glamor_train)
from .env import (FAIR, LOADED, DieEnv, DiscreteEnv, GridEnv, SimonSaysEnv, exact_success_prob,
                  make_env)
from .planner import GlamorActor, PlannerConfig, plan
from .replay import ReplayBuffer, Trajectory
from .seqmodel import make_models
from .seqmodel.checkpoint import models_checksum

FORMAT_VERSION = 1

# desk-scale step budgets per environment
DEFAULT_STEPS = {"grid7": 20_000, "walled15": 100_000, "die": 5_000, "simon": 20_000}


def write_csv(path, rows: Sequence[dict]) -> None:
    """Write rows with a leading ``format_version`` column; key order of the first row wins."""
    path = Path(path)
    fields = ["format_version"] + [k for k in rows[0] if k != "format_version"] if rows else ["format_version"]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({"format_version": FORMAT_VERSION, **{k: _fmt(v) for k, v in row.items()}})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def train_glamor(env: DiscreteEnv, seed: int, steps: int | None = None, backend: str = "tabular",
                 planner: PlannerConfig | None = None, schedule: EpsilonSchedule | None = None,
                 capacity: int = 100_000, eval_goals=None, **train_kw):
    """Fresh models trained with :func:`glamor_train`; returns ``(id, prior, result)``."""
    H = env.horizon
    idm, prior = make_models(backend, env.num_states, env.num_actions, H, seed=seed)
    buffer = ReplayBuffer(capacity, H, env.end_token)
    cfg = GlamorTrainConfig(
        steps=steps if steps is not None else 20_000,
        planner=planner or PlannerConfig(budget=50, max_len=H),
        schedule=schedule or EpsilonSchedule(), **train_kw)
    result = glamor_train(env, idm, prior, buffer, cfg, seed, eval_goals=eval_goals)
    return idm, prior, result


# ---------------------------------------------------------------------------
# heatmaps


@dataclass
class HeatmapGrid:
    width: int
    height: int
    values: np.ndarray  # [height, width], NaN where undefined

    def __post_init__(self):
        if self.values.shape != (self.height, self.width):
            raise ValueError("heatmap shape does not match grid")
        finite = self.values[~np.isnan(self.values)]
        if np.any((finite < 0) | (finite > 1)):
            raise ValueError("heatmap values must be rates in [0, 1]")

    def mean(self) -> float:
        return float(np.nanmean(self.values))

    def rows(self) -> list[dict]:
        return [{"x": x, "y": y, "rate": None if np.isnan(self.values[y, x]) else float(self.values[y, x])}
                for y in range(self.height) for x in range(self.width)]

    def to_pgm(self, scale: int = 255) -> str:
        """Plain-text portable graymap; undefined cells are black."""
        vals = np.nan_to_num(self.values, nan=0.0)
        lines = ["P2", f"{self.width} {self.height}", str(scale)]
        for y in range(self.height):
            lines.append(" ".join(str(int(round(v * scale))) for v in vals[y]))
        return "\n".join(lines) + "\n"


def heatmap_from_rates(env: GridEnv, rates: dict[int, float], start_value: float | None) -> HeatmapGrid:
    vals = np.full((env.height, env.width), np.nan)
    for g, r in rates.items():
        x, y = env.decode(g)
        vals[y, x] = r
    if start_value is not None:
        x, y = env.decode(env.start_state)
        vals[y, x] = start_value
    return HeatmapGrid(env.width, env.height, vals)


# ---------------------------------------------------------------------------
# compute sweep


def compute_sweep(env: GridEnv, idm, prior, budgets: Iterable[int], trials: int, seed: int,
                  goals: Sequence[int] | None = None, include_start: bool = False,
                  planner: PlannerConfig | None = None):
    """Evaluate one checkpoint at every planning budget.

    Returns ``(rows, heatmaps)`` where rows hold the per-budget aggregates and
    ``heatmaps[N] = (achievement, optimal)``. With ``include_start`` the start
    cell is reported as achieved at distance 0; otherwise it is left empty.
    """
    H = env.horizon
    base = planner or PlannerConfig(max_len=H)
    goals = list(goals) if goals is not None else [int(g) for g in env.goal_support]
    checksum = models_checksum(idm, prior)
    rows, heatmaps = [], {}
    for N in budgets:
        actor = GlamorActor(idm, prior, replace(base, budget=int(N)), H)
        rep = evaluate(env, actor, goals, trials, np.random.default_rng([seed, int(N)]))
        per_goal = rep.per_goal()
        start_val = 1.0 if include_start else None
        ach = heatmap_from_rates(env, {g: a for g, (a, _) in per_goal.items()}, start_val)
        opt = heatmap_from_rates(env, {g: o for g, (_, o) in per_goal.items()}, start_val)
        heatmaps[int(N)] = (ach, opt)
        rows.append({"seed": seed, "budget": int(N), "trials": trials, "goals": len(goals),
                     "achievement_rate": rep.achievement_rate, "optimal_rate": rep.optimal_rate,
                     "model_checksum": checksum})
    return rows, heatmaps


def monotone_within(means: Sequence[float], sigmas: Sequence[float], k: float = 2.0) -> bool:
    """``means[i+1] >= means[i] - k * sigma`` for consecutive entries, sigma of the difference."""
    for i in range(len(means) - 1):
        sigma = math.hypot(sigmas[i], sigmas[i + 1])
        if means[i + 1] < means[i] - k * sigma:
            return False
    return True


# ---------------------------------------------------------------------------
# termination and sparse comparisons share one checkpoint per seed


def compare_planners(env: DiscreteEnv, idm, prior, goals: Sequence[int], trials: int, seed: int,
                     conditions: dict[str, PlannerConfig]) -> list[dict]:
    checksum = models_checksum(idm, prior)
    rows = []
    for name, cfg in conditions.items():
        actor = GlamorActor(idm, prior, cfg, env.horizon)
        rep = evaluate(env, actor, goals, trials, np.random.default_rng([seed, 7]))
        rows.append({"seed": seed, "condition": name, "budget": cfg.budget, "mode": cfg.mode,
                     "termination": cfg.termination, "trials": trials, "goals": len(goals),
                     "achievement_rate": rep.achievement_rate, "optimal_rate": rep.optimal_rate,
                     "model_checksum": checksum})
    return rows


def walled_comparison(seed: int, steps: int = 100_000, num_goals: int = 30, trials: int = 4,
                      budget: int = 64) -> list[dict]:
    """Train one walled-grid model and run every sparse and termination condition on it.

    Guided proposals with shortest termination appear once, as ``guided``.
    A 1e5-step model needs a couple of GB, so callers running several seeds
    should give each call its own process.
    """
    env = make_env("walled15")
    H = env.horizon
    conditions = {**sparse_conditions(H, budget), **termination_conditions(H, budget)}
    conditions.pop("shortest")
    idm, prior, _ = train_glamor(env, seed, steps, log_interval=0)
    goals = build_eval_goal_set(env, num_goals, np.random.default_rng([seed, 5]))
    return compare_planners(env, idm, prior, goals, trials, seed, conditions)


def termination_conditions(horizon: int, budget: int = 50) -> dict[str, PlannerConfig]:
    return {t: PlannerConfig(budget=budget, max_len=horizon, termination=t)
            for t in ("shortest", "plan_end", "naive_end")}


def sparse_conditions(horizon: int, budget: int = 64) -> dict[str, PlannerConfig]:
    return {m: PlannerConfig(budget=budget, max_len=horizon, mode=m) for m in ("guided", "sparse")}


# ---------------------------------------------------------------------------
# off-policy


def offpolicy(env: DiscreteEnv, seed: int, steps: int, goals: Sequence[int], trials: int,
              planner: PlannerConfig | None = None) -> list[dict]:
    """GLAMOR and GCSL fitted to the same frozen uniform-random dataset."""
    H = env.horizon
    idm, prior, result = train_glamor(env, seed, steps, schedule=EpsilonSchedule.constant(1.0),
                                      log_interval=0)
    policy = gcsl_fit(TabularGCSLPolicy(env.num_states, env.num_actions, H),
                      result.buffer, H)
    eval_cfg = planner or PlannerConfig(budget=50, max_len=H)
    rng = np.random.default_rng([seed, 11])
    glamor_rep = evaluate(env, GlamorActor(idm, prior, eval_cfg, H), goals, trials, rng)
    gcsl_rep = evaluate(env, GCSLActor(policy, H), goals, trials, rng)
    n_traj = len(result.buffer)
    return [{"seed": seed, "algo": algo, "dataset_steps": result.steps, "dataset_trajectories": n_traj,
             "achievement_rate": rep.achievement_rate, "optimal_rate": rep.optimal_rate}
            for algo, rep in (("glamor", glamor_rep), ("gcsl", gcsl_rep))]


# ---------------------------------------------------------------------------
# causal correctness on Simon Says


def simon_expert_trajectory(env: SimonSaysEnv, rng) -> Trajectory:
    """Reactive expert: any action on the ready screen, then always press the shown symbol."""
    s = env.reset(rng)
    states, actions = [s], []
    for _ in range(env.horizon):
        if s == env.win_state:
            break
        shown = env.shown_symbol(s)
        a = int(rng.integers(env.num_actions)) if shown is None else shown
        s = env.step(s, a, rng)
        states.append(s)
        actions.append(a)
    return Trajectory(states, actions, env.win_state, s == env.win_state)


def simon_open_loop_trajectory(env: SimonSaysEnv, rng) -> Trajectory:
    """A full action sequence drawn before the episode and executed blindly."""
    seq = rng.integers(env.num_actions, size=env.horizon)
    s = env.reset(rng)
    states, actions = [s], []
    for a in seq:
        if s == env.win_state:
            break
        s = env.step(s, int(a), rng)
        states.append(s)
        actions.append(int(a))
    return Trajectory(states, actions, env.win_state, s == env.win_state)


def predicted_goal_prob(idm, prior, start: int, goal: int, actions: Sequence[int]) -> float:
    """``p(g | s, a) = p_id(a | s, g) p(g | s) / p_prior(a | s)`` from the fitted models."""
    tokens = list(actions) + [idm.end]
    p_goal = idm.context_count(start, goal) / max(prior.context_count(start), 1e-300)
    log_ratio = idm.sequence_logprob(start, goal, tokens) - prior.sequence_logprob(start, None, tokens)
    return float(math.exp(log_ratio) * p_goal)


def causal(seed: int, episodes: int, num_symbols: int = 3, length: int = 3) -> list[dict]:
    """Predicted versus true win probability of fixed sequences under two data regimes."""
    env = SimonSaysEnv(num_symbols, length)
    H = env.horizon
    seqs = list(itertools.product(range(env.num_actions), repeat=H))
    true = float(np.mean([_exact_success(env, s) for s in seqs]))
    rows = []
    for regime, collect in (("reactive_expert", simon_expert_trajectory),
                            ("open_loop", simon_open_loop_trajectory)):
        rng = np.random.default_rng([seed, 0 if regime == "open_loop" else 1])
        idm, prior = make_models("tabular", env.num_states, env.num_actions, H)
        for _ in range(episodes):
            traj = collect(env, rng)
            idm.observe_trajectory(traj.states, traj.actions, H)
            prior.observe_trajectory(traj.states, traj.actions, H)
        preds = [predicted_goal_prob(idm, prior, env.start_state, env.win_state, s) for s in seqs]
        rows.append({"seed": seed, "regime": regime, "episodes": episodes,
                     "num_sequences": len(seqs), "predicted_win": float(np.mean(preds)),
                     "empirical_do_win": true, "true_do_win": env.true_win_probability()})
    return rows


def _exact_success(env, seq):
    return exact_success_prob(env, env.start_state, seq, env.win_state)


# ---------------------------------------------------------------------------
# die: exact GCSL map versus the GLAMOR planner


def die_optimal_policy(env: DieEnv) -> np.ndarray:
    pi = np.zeros((env.num_states, env.num_actions))
    pi[:, FAIR] = 1.0
    pi[1] = 0.0
    pi[1, LOADED] = 1.0
    return pi


def die_exact_trace(iterations: int = 100, perturb: float = 0.0) -> list[dict]:
    """Iterate the exact GCSL map from the optimal policy under uniform goals."""
    env = DieEnv()
    goal_dist = np.zeros(env.num_states)
    goal_dist[1:7] = 1.0 / 6
    pi = die_optimal_policy(env)
    if perturb:
        pi[1] = (perturb, 1 - perturb)
    rows = [{"iteration": 0, "pi_loaded_g1": pi[1, LOADED], "pi_fair_g1": pi[1, FAIR],
             "ratio_fair_loaded_g1": pi[1, FAIR] / pi[1, LOADED]}]
    for t in range(1, iterations + 1):
        pi = gcsl_exact_map(env, pi, goal_dist)
        rows.append({"iteration": t, "pi_loaded_g1": pi[1, LOADED], "pi_fair_g1": pi[1, FAIR],
                     "ratio_fair_loaded_g1": pi[1, FAIR] / pi[1, LOADED]})
    return rows


def die_planner_choices(seed: int, steps: int = 5_000, repeats: int = 200,
                        budget: int = 16) -> list[dict]:
    """Train GLAMOR on the die and record how often each goal's plan picks each arm."""
    env = DieEnv()
    idm, prior, _ = train_glamor(env, seed, steps, log_interval=0,
                                 planner=PlannerConfig(budget=50, max_len=1))
    rng = np.random.default_rng([seed, 3])
    cfg = PlannerConfig(budget=budget, max_len=1)
    rows = []
    for g in range(1, 7):
        picks = [plan(idm, prior, env.start_state, g, cfg, rng).actions[0] for _ in range(repeats)]
        loaded = float(np.mean([a == LOADED for a in picks]))
        correct = loaded if g == 1 else float(np.mean([a == FAIR for a in picks]))
        rows.append({"seed": seed, "goal": g, "repeats": repeats, "freq_loaded": loaded,
                     "freq_correct": correct})
    return rows
