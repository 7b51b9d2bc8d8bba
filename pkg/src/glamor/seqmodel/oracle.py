"""Exact next-token conditionals under a known behaviour policy.

Data model: a relabelled example starts at ``s1``, its length ``k`` is uniform
on ``1..H`` and its actions follow ``policy[s, a]`` through the true dynamics.
This is what exhaustive relabelling of long, non-terminating trajectories
produces, and it is exact for one-step environments.
"""
from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from ..env import DiscreteEnv


def uniform_policy(env: DiscreteEnv) -> np.ndarray:
    return np.full((env.num_states, env.num_actions), 1.0 / env.num_actions)


def _forward(env, policy, start, prefix):
    P = env.transition_matrix()
    alpha = np.zeros(env.num_states)
    alpha[start] = 1.0
    for a in prefix:
        alpha = (alpha * policy[:, a]) @ P[a]
    return alpha


def exact_conditional_oracle(env: DiscreteEnv, policy: np.ndarray, start: int,
                             goal: int | None, prefix: Sequence[int],
                             max_horizon: int) -> np.ndarray | None:
    """Exact next-token distribution (probabilities, END last), or ``None``.

    ``None`` means the context has zero probability under the behaviour policy,
    so the conditional is undefined.
    """
    H = int(max_horizon)
    d = len(prefix)
    A = env.num_actions
    P = env.transition_matrix()
    alpha = _forward(env, policy, start, prefix)
    weights = np.zeros(A + 1)
    if goal is None:
        if d >= 1:
            weights[A] = alpha.sum() / H
        if d < H:
            weights[:A] = (H - d) / H * (alpha @ policy)
    else:
        if d >= 1:
            weights[A] = alpha[goal] / H
        if d < H:
            chain = np.einsum("sa,ast->st", policy, P)
            # reach[s] = sum_{m=0}^{H-d-1} P(s_{m} = goal | s_0 = s) under the behaviour chain
            reach = np.zeros(env.num_states)
            col = np.zeros(env.num_states)
            col[goal] = 1.0
            for _ in range(H - d):
                reach += col
                col = chain @ col
            for a in range(A):
                weights[a] = (alpha * policy[:, a]) @ (P[a] @ reach) / H
    total = weights.sum()
    if total <= 0.0:
        return None
    return weights / total


def fit_exact(id_model, prior_model, env: DiscreteEnv, start: int, max_horizon: int,
              policy: np.ndarray | None = None, total_weight: float = 1e12) -> None:
    """Load tabular models with the expected counts of the relabelled dataset.

    Enumerates every action sequence of length ``1..H`` from ``start``, weights
    it by its behaviour probability and spreads it over reached goals. This is
    the infinite-data limit of training on the data model above.
    """
    H = int(max_horizon)
    A = env.num_actions
    P = env.transition_matrix()
    if policy is None:
        policy = uniform_policy(env)
    end = A
    for k in range(1, H + 1):
        for seq in itertools.product(range(A), repeat=k):
            alpha = np.zeros(env.num_states)
            alpha[start] = 1.0
            for a in seq:
                alpha = (alpha * policy[:, a]) @ P[a]
            mass = alpha.sum()
            if mass <= 0.0:
                continue
            tokens = list(seq) + [end]
            w = total_weight / H
            prior_model.observe(start, None, tokens, w * mass)
            for g in np.flatnonzero(alpha):
                id_model.observe(start, int(g), tokens, w * alpha[g])
