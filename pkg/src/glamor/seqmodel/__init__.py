"""Autoregressive models over action tokens in two roles.

The inverse-dynamics model conditions on ``(start, goal, prefix)``; the action
prior conditions on ``(start, prefix)`` only. Both predict the next token over
``num_actions + 1`` symbols, the last one being END.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..env import ContractViolation
from .recurrent import AdamW, RecurrentSequenceModel, joint_loss_and_grads, joint_parameters
from .tabular import TabularSequenceModel

__all__ = [
    "Context", "LossWeights", "TabularSequenceModel", "RecurrentSequenceModel",
    "AdamW", "make_models", "token_logprobs", "sequence_logprob", "train_batch",
]


@dataclass(frozen=True)
class Context:
    start: int
    goal: int | None = None
    prefix: tuple[int, ...] = field(default=())


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


def token_logprobs(model, context: Context) -> np.ndarray:
    """Log-distribution over the next token (real actions, then END)."""
    return model.token_logprobs(context.start, context.goal, context.prefix)


def sequence_logprob(model, start: int, goal: int | None, actions: Sequence[int]) -> float:
    return model.sequence_logprob(start, goal, actions)


def make_models(backend: str, num_states: int, num_actions: int, max_horizon: int,
                seed=None, smoothing: float = 0.1, d_embed: int = 32, d_hidden: int = 64,
                lr: float = 5e-4, weight_decay: float = 0.01):
    """Build an ``(inverse, prior)`` pair.

    Neural pairs share the state-embedding table and one AdamW optimiser,
    reachable as ``model.optimizer`` on both.
    """
    if backend == "tabular":
        return (TabularSequenceModel(num_states, num_actions, max_horizon, True, smoothing),
                TabularSequenceModel(num_states, num_actions, max_horizon, False, smoothing))
    if backend == "neural":
        rng = np.random.default_rng(seed)
        idm = RecurrentSequenceModel(num_states, num_actions, max_horizon, True,
                                     d_embed, d_hidden, rng=rng)
        prior = RecurrentSequenceModel(num_states, num_actions, max_horizon, False,
                                       d_embed, d_hidden,
                                       state_embed=idm.params["state_embed"], rng=rng)
        attach_optimizer(idm, prior, lr, weight_decay)
        return idm, prior
    raise ValueError(f"unknown backend {backend!r}")


def attach_optimizer(idm, prior, lr: float = 5e-4, weight_decay: float = 0.01) -> AdamW:
    opt = AdamW([arr for _, _, arr in joint_parameters(idm, prior)], lr=lr,
                weight_decay=weight_decay)
    idm.optimizer = prior.optimizer = opt
    return opt


def train_batch(id_model, prior_model, batch, weights: LossWeights = LossWeights()):
    """One update on a batch of relabelled examples; returns mean per-sequence NLLs.

    Tabular models add the batch to their counts and report the NLL under the
    parameters from before the update. Neural models take one AdamW step on
    ``NLL_id + alpha * NLL_prior``.
    """
    if not batch:
        raise ContractViolation("empty batch")
    if id_model.backend != prior_model.backend:
        raise ValueError("inverse and prior models must share a backend")
    if id_model.backend == "tabular":
        id_nll = [id_model.sequence_logprob(ex.start, ex.goal, ex.actions) for ex in batch]
        pr_nll = [prior_model.sequence_logprob(ex.start, None, ex.actions) for ex in batch]
        for ex in batch:
            id_model.observe(ex.start, ex.goal, ex.actions)
            prior_model.observe(ex.start, None, ex.actions)
        return -float(np.mean(id_nll)), -float(np.mean(pr_nll))
    _, id_nll, pr_nll, grads = joint_loss_and_grads(id_model, prior_model, batch, weights.alpha)
    id_model.optimizer.step(grads)
    id_model.version += 1
    prior_model.version += 1
    return float(id_nll.mean()), float(pr_nll.mean())
