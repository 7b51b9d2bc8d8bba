"""Run configuration: defaults, then a JSON file, then command-line flags."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .env import ENV_NAMES
from .planner import MODES, TERMINATIONS


class ConfigError(ValueError):
    pass


@dataclass
class PlannerSection:
    budget: int = 50
    eval_budget: int = 50
    temperature: float = 1.0
    gamma: float = 0.98
    clip_logp: float = -3.15
    termination: str = "shortest"
    mode: str = "guided"
    use_prior: bool = True


@dataclass
class ScheduleSection:
    eps_initial: float = 1.0
    eps_final: float = 0.1
    decay_steps: int = 30_000


@dataclass
class RunConfig:
    env: str = "grid7"
    slip_prob: float = 0.0
    model: str = "tabular"
    algo: str = "glamor"
    steps: int | None = None
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str | None = None
    planner: PlannerSection = field(default_factory=PlannerSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    replay_ratio: int = 4
    batch_size: int = 64
    capacity: int = 100_000
    alpha: float = 1.0
    min_steps_learn: int = 0
    log_interval: int = 1000
    eval_interval: int = 0
    eval_goals: int | None = None
    eval_trials: int = 20
    checkpoint_interval: int = 0
    checkpoint: str | None = None
    budgets: list[int] = field(default_factory=lambda: [1, 4, 16, 64, 256])
    include_start: bool = False
    episodes: int = 5000
    iterations: int = 100
    trace: bool = False

    def validate(self) -> "RunConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(bool(self.out), "an output directory is required (--out or \"out\" in the config)")
        need(self.env in ENV_NAMES, f"env must be one of {ENV_NAMES}")
        need(0.0 <= self.slip_prob <= 1.0, "slip_prob must lie in [0, 1]")
        need(self.model in ("tabular", "neural"), "model must be tabular or neural")
        need(self.algo in ("glamor", "gcsl"), "algo must be glamor or gcsl")
        need(self.algo == "glamor" or self.model == "tabular", "gcsl is tabular only")
        need(self.steps is None or self.steps >= 1, "steps must be >= 1")
        need(len(self.seeds) >= 1 and all(isinstance(s, int) and s >= 0 for s in self.seeds),
             "seeds must be a non-empty list of non-negative integers")
        p = self.planner
        need(p.budget >= 1 and p.eval_budget >= 1, "planner budgets must be >= 1")
        need(p.temperature > 0, "planner temperature must be positive")
        need(0.0 < p.gamma <= 1.0, "planner gamma must lie in (0, 1]")
        need(p.termination in TERMINATIONS, f"planner termination must be one of {TERMINATIONS}")
        need(p.mode in MODES, f"planner mode must be one of {MODES}")
        s = self.schedule
        need(0.0 <= s.eps_final <= s.eps_initial <= 1.0, "need 0 <= eps_final <= eps_initial <= 1")
        need(s.decay_steps >= 0, "decay_steps must be >= 0")
        need(self.replay_ratio >= 1 and self.batch_size >= 1, "replay_ratio and batch_size must be >= 1")
        need(self.capacity >= 1, "capacity must be >= 1")
        need(self.alpha >= 0, "alpha must be >= 0")
        need(self.eval_trials >= 1, "eval_trials must be >= 1")
        need(self.eval_goals is None or self.eval_goals >= 1, "eval_goals must be >= 1")
        need(min(self.log_interval, self.eval_interval, self.checkpoint_interval, self.min_steps_learn) >= 0,
             "intervals must be >= 0")
        need(len(self.budgets) >= 1 and all(b >= 1 for b in self.budgets), "budgets must be >= 1")
        need(self.episodes >= 1 and self.iterations >= 1, "episodes and iterations must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown} in {where or 'top level'}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}.{name}".lstrip("."))
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, overlaid by the JSON file at ``path``, overlaid by ``overrides``.

    ``overrides`` keys may use dots for nested sections (``planner.budget``).
    Values of ``None`` in ``overrides`` are ignored.
    """
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        *parents, leaf = key.split(".")
        node = data
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    try:
        return _build(RunConfig, data, "").validate()
    except TypeError as exc:
        raise ConfigError(f"badly typed config value: {exc}") from exc
