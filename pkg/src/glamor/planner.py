"""Random-shooting search over action sequences.

A sequence ``a_1..a_n, END`` scores ``sum_i z_i + n * log(gamma)`` where
``z_i = log p_id(a_i | s, g, a_<i) - log p_prior(a_i | s, a_<i)``. Up to a
constant per (start, goal) this is ``log p(s_n = g | s, do(a)) + n log gamma``
when the training data was collected open-loop.

Candidates are drawn autoregressively. Rather than rolling out ``N`` copies
one by one, the sampler keeps one node per distinct prefix together with the
number of candidates sharing it and splits that number multinomially at every
position. The resulting multiset of sequences has exactly the law of ``N``
independent draws, at a cost proportional to the number of distinct prefixes.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

TERMINATIONS = ("shortest", "plan_end", "naive_end")
MODES = ("guided", "sparse")


@dataclass(frozen=True)
class PlannerConfig:
    budget: int = 50
    temperature: float = 1.0
    gamma: float = 0.98
    clip_logp: float = -3.15
    max_len: int = 20
    termination: str = "shortest"
    mode: str = "guided"
    use_prior: bool = True

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.termination not in TERMINATIONS:
            raise ValueError(f"termination must be one of {TERMINATIONS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass(frozen=True)
class ScoredPlan:
    actions: tuple[int, ...]
    score: float
    per_token_z: tuple[float, ...]
    id_logps: tuple[float, ...] = field(default=(), compare=False)
    degenerate: bool = False
    pruned: int = 0

    @property
    def length(self) -> int:
        return len(self.actions) - 1


def z_scores(id_model, prior_model, start: int, goal: int, prefix=()) -> np.ndarray:
    """Per-token ``log p_id - log p_prior`` for the next position."""
    return (id_model.token_logprobs(start, goal, prefix)
            - prior_model.token_logprobs(start, None, prefix))


def score_sequence(id_model, prior_model, start: int, goal: int, actions, gamma: float) -> float:
    end = id_model.end
    if not actions or actions[-1] != end:
        raise ValueError("sequence must end with END")
    hid = id_model.root(start, goal)
    hpr = prior_model.root(start)
    total = 0.0
    for tok in actions:
        total += float(id_model.logprobs(hid)[tok] - prior_model.logprobs(hpr)[tok])
        if tok != end:
            hid = id_model.child(hid, tok)
            hpr = prior_model.child(hpr, tok)
    return total + (len(actions) - 1) * math.log(gamma)


def _allowed(pos: int, max_len: int, vocab: int, termination: str) -> np.ndarray:
    end = vocab - 1
    mask = np.ones(vocab, dtype=bool)
    if pos == max_len:
        mask[:end] = False
    elif pos == 0 or termination == "plan_end":
        # a plan of length zero is only meaningful at the goal, where no plan is needed
        mask[end] = False
    return mask


def plan(id_model, prior_model, start: int, goal: int, config: PlannerConfig, rng,
         trace: Callable[[dict], None] | None = None) -> ScoredPlan:
    """Best of ``config.budget`` sampled candidates; see the module docstring."""
    vocab = id_model.vocab
    end = vocab - 1
    max_len = min(config.max_len, id_model.max_horizon)
    log_gamma = math.log(config.gamma)
    guided = config.mode == "guided"
    inv_temp = 1.0 / config.temperature

    # (count, tokens, zs, id_logps, id_handle, prior_handle)
    frontier = [(config.budget, (), (), (), id_model.root(start, goal), prior_model.root(start))]
    best = None
    best_key = None
    pruned = 0
    root_z = None
    cand_id = 0
    for pos in range(max_len + 1):
        if not frontier:
            break
        allowed = _allowed(pos, max_len, vocab, config.termination)
        nxt = []
        for count, toks, zs, lps, hid, hpr in frontier:
            lp_id = id_model.logprobs(hid)
            z = lp_id - prior_model.logprobs(hpr) if config.use_prior else lp_id
            if pos == 0:
                root_z = z
            if guided:
                logits = np.where(allowed, z * inv_temp, -np.inf)
                w = np.exp(logits - logits.max())
            else:
                w = allowed.astype(float)
            draws = rng.multinomial(count, w / w.sum())
            for tok in np.flatnonzero(draws):
                tok = int(tok)
                c = int(draws[tok])
                ntoks = toks + (tok,)
                nz = zs + (float(z[tok]),)
                nl = lps + (float(lp_id[tok]),)
                if guided and lp_id[tok] < config.clip_logp:
                    pruned += c
                    if trace is not None:
                        trace({"candidate": cand_id, "count": c, "tokens": list(ntoks),
                               "z": list(nz), "score": None, "pruned": True})
                        cand_id += 1
                    continue
                if tok == end:
                    score = sum(nz) + (len(ntoks) - 1) * log_gamma
                    key = (-score, len(ntoks), ntoks)
                    if best_key is None or key < best_key:
                        best_key = key
                        best = ScoredPlan(ntoks, score, nz, nl, pruned=0)
                    if trace is not None:
                        trace({"candidate": cand_id, "count": c, "tokens": list(ntoks),
                               "z": list(nz), "score": score, "pruned": False})
                        cand_id += 1
                else:
                    nxt.append((c, ntoks, nz, nl, id_model.child(hid, tok),
                                prior_model.child(hpr, tok)))
        frontier = nxt
    if best is None:
        lp_end = float(id_model.logprobs(id_model.root(start, goal))[end])
        zend = float(root_z[end])
        return ScoredPlan((end,), zend, (zend,), (lp_end,), degenerate=True, pruned=pruned)
    return replace(best, pruned=pruned)


def trace_writer(path) -> Callable[[dict], None]:
    """Append planner trace records to a line-delimited JSON file."""
    fh = open(path, "a")

    def write(record: dict) -> None:
        fh.write(json.dumps(record) + "\n")
        fh.flush()

    return write


class GlamorActor:
    """Model-predictive control: replan every step, execute the first token.

    ``act`` returns ``None`` when a shortest-strategy plan starts with END,
    meaning the agent declares the episode over.
    """

    def __init__(self, id_model, prior_model, config: PlannerConfig, horizon: int,
                 trace: Callable[[dict], None] | None = None):
        self.id_model = id_model
        self.trace = trace
        self.prior_model = prior_model
        self.config = config
        self.horizon = int(horizon)
        self.num_actions = id_model.num_actions
        self.last_plan: ScoredPlan | None = None

    @property
    def stops_on_goal(self) -> bool:
        return self.config.termination == "shortest"

    def act(self, state: int, goal: int, t: int, rng) -> int | None:
        max_len = min(self.horizon - t, self.id_model.max_horizon)
        cfg = replace(self.config, max_len=max(1, max_len))
        trace = None
        if self.trace is not None:
            def trace(rec, _ctx={"state": int(state), "goal": int(goal), "t": int(t)}):
                self.trace({**_ctx, **rec})
        p = plan(self.id_model, self.prior_model, state, goal, cfg, rng, trace)
        self.last_plan = p
        first = p.actions[0]
        if first == self.id_model.end:
            if self.config.termination == "shortest":
                return None
            return int(rng.integers(self.num_actions))
        return first


def mpc_step(actor: GlamorActor, state: int, goal: int, t: int, rng) -> int | None:
    return actor.act(state, goal, t, rng)
