"""Train, evaluate and run experiments with goal-conditioned planners.

Every command writes ``<out>/config.json`` (the resolved configuration) before
doing any work, then its CSV artifacts. Exit codes: 0 success, 2 configuration
or usage error, 3 missing input artifact.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as ex
from .agent import (EpsilonSchedule, GCSLActor, GCSLTrainConfig, GlamorTrainConfig,
                    TabularGCSLPolicy, build_eval_goal_set, evaluate, gcsl_train, glamor_train)
from .config import ConfigError, RunConfig, load_config
from .env import GridEnv, make_env
from .planner import GlamorActor, PlannerConfig, trace_writer
from .replay import ReplayBuffer
from .seqmodel import make_models
from .seqmodel.checkpoint import (archive_digest, models_checksum, models_from_arrays, read_archive,
                                  save_models, write_archive)

log = logging.getLogger("glamor")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING = 0, 2, 3

# default goal-set sizes; grid7 uses every non-start cell
GOAL_SET_SIZE = {"grid7": 48, "walled15": 30, "die": 6, "simon": 1}


class MissingArtifact(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _env(cfg: RunConfig):
    return make_env(cfg.env, cfg.slip_prob)


def _steps(cfg: RunConfig) -> int:
    if cfg.steps is not None:
        return cfg.steps
    base = ex.DEFAULT_STEPS[cfg.env]
    return base * 5 if cfg.model == "neural" else base


def _planner(cfg: RunConfig, env, budget: int | None = None, **kw) -> PlannerConfig:
    p = cfg.planner
    return PlannerConfig(budget=budget if budget is not None else p.eval_budget,
                         temperature=p.temperature, gamma=p.gamma, clip_logp=p.clip_logp,
                         max_len=env.horizon, termination=kw.get("termination", p.termination),
                         mode=kw.get("mode", p.mode), use_prior=p.use_prior)


def _goals(cfg: RunConfig, env, seed: int) -> list[int]:
    n = cfg.eval_goals or min(GOAL_SET_SIZE[cfg.env], len(env.goal_support))
    return build_eval_goal_set(env, n, np.random.default_rng([seed, 0x60a1]))


def _checkpoint_path(cfg: RunConfig, seed: int) -> Path:
    return Path(cfg.checkpoint.format(seed=seed))


def _require_checkpoints(cfg: RunConfig) -> None:
    if not cfg.checkpoint:
        raise MissingArtifact("this command needs --checkpoint")
    for seed in cfg.seeds:
        path = _checkpoint_path(cfg, seed)
        if not path.is_file():
            raise MissingArtifact(f"checkpoint not found: {path}")


def _load_actor_models(cfg: RunConfig, seed: int):
    path = _checkpoint_path(cfg, seed)
    try:
        header, arrays = read_archive(path)
        if header.get("format") == "glamor-gcsl":
            return "gcsl", TabularGCSLPolicy.from_arrays(header, arrays)
        return "glamor", models_from_arrays(header, arrays)
    except (ValueError, KeyError) as exc:
        raise MissingArtifact(f"{path} is not a model checkpoint") from exc


def _glamor_models(cfg, seed):
    kind, obj = _load_actor_models(cfg, seed)
    if kind != "glamor":
        raise MissingArtifact("this command needs a GLAMOR model checkpoint")
    return obj


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig, out: Path) -> None:
    env = _env(cfg)
    H = env.horizon
    steps = _steps(cfg)
    s = cfg.schedule
    schedule = EpsilonSchedule(s.eps_initial, s.eps_final, s.decay_steps)
    for seed in cfg.seeds:
        run_dir = out / f"seed_{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        goals = _goals(cfg, env, seed)
        buffer = ReplayBuffer(cfg.capacity, H, env.end_token)
        counter = {"steps": 0, "next": cfg.checkpoint_interval}

        if cfg.algo == "gcsl":
            policy = TabularGCSLPolicy(env.num_states, env.num_actions, H)

            def save(path):
                write_archive(path, *policy.state_arrays())
        else:
            idm, prior = make_models(cfg.model, env.num_states, env.num_actions, H, seed=seed)

            def save(path):
                save_models(path, idm, prior)

        def on_episode(traj):
            counter["steps"] += len(traj.actions)
            if cfg.checkpoint_interval and counter["steps"] >= counter["next"]:
                save(run_dir / f"checkpoint_step{counter['steps']}.npz")
                counter["next"] += cfg.checkpoint_interval

        if cfg.algo == "gcsl":
            tcfg = GCSLTrainConfig(steps=steps, schedule=schedule, log_interval=cfg.log_interval,
                                   eval_interval=cfg.eval_interval, eval_trials=cfg.eval_trials)
            result = gcsl_train(env, policy, buffer, tcfg, seed, goals, on_episode=on_episode)
        else:
            tcfg = GlamorTrainConfig(
                steps=steps, planner=_planner(cfg, env, cfg.planner.budget),
                eval_planner=_planner(cfg, env), schedule=schedule,
                replay_ratio=cfg.replay_ratio, batch_size=cfg.batch_size,
                min_steps_learn=cfg.min_steps_learn, alpha=cfg.alpha,
                log_interval=cfg.log_interval, eval_interval=cfg.eval_interval,
                eval_trials=cfg.eval_trials)
            result = glamor_train(env, idm, prior, buffer, tcfg, seed, goals, on_episode=on_episode)
        ex.write_csv(run_dir / "metrics.csv", result.rows)
        save(run_dir / "model.npz")
        final = result.rows[-1]
        log.info("seed %d: %d steps, eval achievement %s optimal %s", seed, result.steps,
                 final["eval_achievement_rate"], final["eval_optimal_rate"])


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    env = _env(cfg)
    rows = []
    for seed in cfg.seeds:
        kind, obj = _load_actor_models(cfg, seed)
        if kind == "gcsl":
            actor, checksum = GCSLActor(obj, env.horizon), archive_digest(*obj.state_arrays())
        else:
            trace = trace_writer(out / f"trace_seed{seed}.jsonl") if cfg.trace else None
            actor = GlamorActor(*obj, _planner(cfg, env), env.horizon, trace=trace)
            checksum = models_checksum(*obj)
        goals = _goals(cfg, env, seed)
        rep = evaluate(env, actor, goals, cfg.eval_trials, np.random.default_rng([seed, 1]))
        ex.write_csv(out / f"episodes_seed{seed}.csv",
                     [{"seed": seed, "goal": r.goal, "trial": r.trial, "achieved": int(r.achieved),
                       "steps": r.steps, "optimal": int(r.optimal)} for r in rep.rows])
        rows.append({"seed": seed, "algo": kind, "goals": len(goals), "trials": cfg.eval_trials,
                     "achievement_rate": rep.achievement_rate, "optimal_rate": rep.optimal_rate,
                     "model_checksum": checksum})
    ex.write_csv(out / "eval.csv", rows)


def cmd_compute_sweep(cfg: RunConfig, out: Path) -> None:
    env = _env(cfg)
    if not isinstance(env, GridEnv):
        raise ConfigError("compute-sweep needs a grid environment")
    rows = []
    heat_dir = out / "heatmaps"
    heat_dir.mkdir(exist_ok=True)
    for seed in cfg.seeds:
        idm, prior = _glamor_models(cfg, seed)
        goals = [int(g) for g in env.goal_support] if cfg.eval_goals is None else _goals(cfg, env, seed)
        seed_rows, maps = ex.compute_sweep(env, idm, prior, cfg.budgets, cfg.eval_trials, seed,
                                           goals, cfg.include_start, _planner(cfg, env))
        rows.extend(seed_rows)
        for N, (ach, opt) in maps.items():
            for name, grid in (("achievement", ach), ("optimal", opt)):
                stem = heat_dir / f"seed{seed}_N{N}_{name}"
                ex.write_csv(stem.with_suffix(".csv"), grid.rows())
                stem.with_suffix(".pgm").write_text(grid.to_pgm())
    ex.write_csv(out / "compute_sweep.csv", rows)


def _compare(cfg: RunConfig, out: Path, conditions, name: str) -> None:
    env = _env(cfg)
    rows = []
    for seed in cfg.seeds:
        idm, prior = _glamor_models(cfg, seed)
        rows.extend(ex.compare_planners(env, idm, prior, _goals(cfg, env, seed), cfg.eval_trials,
                                        seed, conditions(env)))
    ex.write_csv(out / f"{name}.csv", rows)


def cmd_termination(cfg: RunConfig, out: Path) -> None:
    base = cfg.planner

    def conditions(env):
        return {t: _planner(cfg, env, base.eval_budget, termination=t)
                for t in ("shortest", "plan_end", "naive_end")}
    _compare(cfg, out, conditions, "termination")


def cmd_sparse(cfg: RunConfig, out: Path) -> None:
    def conditions(env):
        return {m: _planner(cfg, env, cfg.planner.eval_budget, mode=m) for m in ("guided", "sparse")}
    _compare(cfg, out, conditions, "sparse")


def cmd_offpolicy(cfg: RunConfig, out: Path) -> None:
    env = _env(cfg)
    rows = []
    for seed in cfg.seeds:
        rows.extend(ex.offpolicy(env, seed, _steps(cfg), _goals(cfg, env, seed), cfg.eval_trials,
                                 _planner(cfg, env)))
    ex.write_csv(out / "offpolicy.csv", rows)


def cmd_causal(cfg: RunConfig, out: Path) -> None:
    rows = []
    for seed in cfg.seeds:
        rows.extend(ex.causal(seed, cfg.episodes))
    ex.write_csv(out / "causal.csv", rows)


def cmd_die(cfg: RunConfig, out: Path) -> None:
    ex.write_csv(out / "die_exact_map.csv", ex.die_exact_trace(cfg.iterations))
    rows = []
    steps = cfg.steps or ex.DEFAULT_STEPS["die"]
    for seed in cfg.seeds:
        rows.extend(ex.die_planner_choices(seed, steps, budget=cfg.planner.eval_budget))
    ex.write_csv(out / "die_planner.csv", rows)


COMMANDS = {
    "train": (cmd_train, False),
    "eval": (cmd_eval, True),
    "compute-sweep": (cmd_compute_sweep, True),
    "termination": (cmd_termination, True),
    "sparse": (cmd_sparse, True),
    "offpolicy": (cmd_offpolicy, False),
    "causal": (cmd_causal, False),
    "die": (cmd_die, False),
}


# ---------------------------------------------------------------------------
# argument parsing


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _global_flags(parser: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    g = parser.add_argument_group("global options")
    g.add_argument("--config", default=S, help="JSON config file; flags override its values")
    g.add_argument("--seed", type=int, default=S, help="single seed (overrides seeds)")
    g.add_argument("--seeds", type=_int_list, default=S, help="comma-separated seeds")
    g.add_argument("--out", default=S, help="output directory")
    g.add_argument("--env", default=S, help="grid7, walled15, die or simon")
    g.add_argument("--model", default=S, choices=("tabular", "neural"))
    g.add_argument("-v", "--verbose", action="count", default=S)


# flag -> config key
FLAG_KEYS = {
    "env": "env", "model": "model", "out": "out", "seeds": "seeds", "algo": "algo",
    "steps": "steps", "slip": "slip_prob", "budget": "planner.budget",
    "eval_budget": "planner.eval_budget", "termination": "planner.termination",
    "mode": "planner.mode", "temperature": "planner.temperature", "gamma": "planner.gamma",
    "no_prior": None, "eps_final": "schedule.eps_final", "decay_steps": "schedule.decay_steps",
    "replay_ratio": "replay_ratio", "eval_goals": "eval_goals", "eval_trials": "eval_trials",
    "eval_interval": "eval_interval", "log_interval": "log_interval",
    "checkpoint_interval": "checkpoint_interval", "checkpoint": "checkpoint",
    "budgets": "budgets", "include_start": "include_start", "episodes": "episodes",
    "iterations": "iterations", "trace": "trace",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glamor", description=__doc__.splitlines()[0])
    _global_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    S = argparse.SUPPRESS

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _global_flags(p)
        return p

    def planner_flags(p):
        p.add_argument("--eval-budget", type=int, default=S, help="evaluation planner budget N")
        p.add_argument("--termination", default=S, choices=("shortest", "plan_end", "naive_end"))
        p.add_argument("--mode", default=S, choices=("guided", "sparse"))
        p.add_argument("--temperature", type=float, default=S)
        p.add_argument("--gamma", type=float, default=S)
        p.add_argument("--no-prior", action="store_true", default=S,
                       help="score with log p_id alone")
        p.add_argument("--eval-goals", type=int, default=S)
        p.add_argument("--eval-trials", type=int, default=S)

    def checkpoint_flag(p):
        p.add_argument("--checkpoint", required=True,
                       help="model checkpoint; '{seed}' is replaced by each seed")

    p = add("train", "train GLAMOR or GCSL")
    p.add_argument("--algo", default=S, choices=("glamor", "gcsl"))
    p.add_argument("--steps", type=int, default=S)
    p.add_argument("--slip", type=float, default=S)
    p.add_argument("--budget", type=int, default=S, help="training-time planner budget")
    p.add_argument("--eps-final", type=float, default=S)
    p.add_argument("--decay-steps", type=int, default=S)
    p.add_argument("--replay-ratio", type=int, default=S)
    p.add_argument("--eval-interval", type=int, default=S)
    p.add_argument("--log-interval", type=int, default=S)
    p.add_argument("--checkpoint-interval", type=int, default=S)
    planner_flags(p)

    p = add("eval", "evaluate a checkpoint on the fixed goal set")
    checkpoint_flag(p)
    planner_flags(p)
    p.add_argument("--trace", action="store_true", default=S,
                   help="write planner candidates to trace_seed<k>.jsonl")

    p = add("compute-sweep", "achievement and optimal-path heatmaps per planning budget")
    checkpoint_flag(p)
    planner_flags(p)
    p.add_argument("--budgets", type=_int_list, default=S)
    p.add_argument("--include-start", action="store_true", default=S,
                   help="report the start cell as achieved instead of leaving it empty")

    for name, text in (("termination", "compare shortest, plan_end and naive_end"),
                       ("sparse", "compare guided and sparse proposals")):
        p = add(name, text)
        checkpoint_flag(p)
        planner_flags(p)

    p = add("offpolicy", "GLAMOR and GCSL on one frozen uniform-random dataset")
    p.add_argument("--steps", type=int, default=S)
    planner_flags(p)

    p = add("causal", "Simon Says: predicted win probability per data regime")
    p.add_argument("--episodes", type=int, default=S)

    p = add("die", "exact GCSL map trace and GLAMOR planner choices on the die")
    p.add_argument("--iterations", type=int, default=S)
    p.add_argument("--steps", type=int, default=S)
    p.add_argument("--eval-budget", type=int, default=S)
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    ns = vars(args)
    out = {}
    if "seed" in ns:
        out["seeds"] = [ns["seed"]]
    for flag, key in FLAG_KEYS.items():
        if flag in ns and key is not None:
            out[key] = ns[flag]
    if ns.get("no_prior"):
        out["planner.use_prior"] = False
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", 0) > 1 else
                        logging.INFO if getattr(args, "verbose", 0) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler, needs_checkpoint = COMMANDS[args.command]
    try:
        cfg = load_config(getattr(args, "config", None), _overrides(args))
        if args.command == "compute-sweep" and cfg.env not in ("grid7", "walled15"):
            raise ConfigError("compute-sweep needs a grid environment")
        if needs_checkpoint:
            _require_checkpoints(cfg)
    except ConfigError as exc:
        print(f"glamor: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"glamor: {exc}", file=sys.stderr)
        return EXIT_MISSING
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"command": args.command, **cfg.to_dict()},
                                                indent=2) + "\n")
    try:
        handler(cfg, out)
    except MissingArtifact as exc:
        print(f"glamor: {exc}", file=sys.stderr)
        return EXIT_MISSING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
