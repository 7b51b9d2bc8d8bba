"""Single-layer LSTM over action tokens, written against numpy with explicit BPTT.

Step 0 consumes ``[start_embed; goal_embed]`` (the goal half is zero for the
action prior); step ``t > 0`` consumes ``[token_embed(a_t); 0]``. The output
after step ``t`` is the distribution of token ``t + 1``. All arithmetic is in
float64 so that finite-difference checks are meaningful.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..env import ContractViolation

PARAM_NAMES = ("state_embed", "token_embed", "W", "b", "W_out", "b_out")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class RecurrentSequenceModel:
    backend = "neural"

    def __init__(self, num_states: int, num_actions: int, max_horizon: int,
                 goal_conditioned: bool, d_embed: int = 32, d_hidden: int = 64,
                 state_embed: np.ndarray | None = None, rng=None):
        rng = np.random.default_rng(rng)
        self.num_states = int(num_states)
        self.num_actions = int(num_actions)
        self.vocab = self.num_actions + 1
        self.end = self.num_actions
        self.max_horizon = int(max_horizon)
        self.goal_conditioned = bool(goal_conditioned)
        self.d_embed = d = int(d_embed)
        self.d_hidden = h = int(d_hidden)
        self.version = 0
        if state_embed is None:
            state_embed = rng.normal(0.0, 0.1, (2, self.num_states, d))
        elif state_embed.shape != (2, self.num_states, d):
            raise ValueError("shared state embedding has the wrong shape")
        n_in = 2 * d
        scale = 1.0 / np.sqrt(n_in + h)
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0  # forget gate starts open
        self.params = {
            "state_embed": state_embed,
            "token_embed": rng.normal(0.0, 0.1, (self.vocab, d)),
            "W": rng.uniform(-scale, scale, (4 * h, n_in + h)),
            "b": b,
            "W_out": rng.uniform(-1.0 / np.sqrt(h), 1.0 / np.sqrt(h), (self.vocab, h)),
            "b_out": np.zeros(self.vocab),
        }

    @property
    def role(self) -> str:
        return "inverse" if self.goal_conditioned else "prior"

    # -- single-context inference --------------------------------------------

    def _check_goal(self, goal):
        if self.goal_conditioned and goal is None:
            raise ContractViolation("inverse-dynamics model needs a goal")
        if not self.goal_conditioned and goal is not None:
            raise ContractViolation("the action prior does not take a goal")

    def _cell(self, x, h, c):
        p = self.params
        H = self.d_hidden
        z = p["W"] @ np.concatenate([x, h]) + p["b"]
        i = _sigmoid(z[:H])
        f = _sigmoid(z[H:2 * H])
        o = _sigmoid(z[2 * H:3 * H])
        g = np.tanh(z[3 * H:])
        c = f * c + i * g
        h = o * np.tanh(c)
        logp = _log_softmax(p["W_out"] @ h + p["b_out"])
        return h, c, logp

    def root(self, start: int, goal: int | None = None):
        self._check_goal(goal)
        d = self.d_embed
        x = np.zeros(2 * d)
        x[:d] = self.params["state_embed"][0, start]
        if goal is not None:
            x[d:] = self.params["state_embed"][1, goal]
        zeros = np.zeros(self.d_hidden)
        return self._cell(x, zeros, zeros)

    def child(self, handle, token: int):
        h, c, _ = handle
        x = np.zeros(2 * self.d_embed)
        x[:self.d_embed] = self.params["token_embed"][token]
        return self._cell(x, h, c)

    def logprobs(self, handle) -> np.ndarray:
        return handle[2].copy()

    def token_logprobs(self, start: int, goal: int | None, prefix: Sequence[int]) -> np.ndarray:
        if len(prefix) > self.max_horizon:
            raise ContractViolation(
                f"prefix of length {len(prefix)} exceeds max_horizon {self.max_horizon}")
        handle = self.root(start, goal)
        for tok in prefix:
            if tok == self.end:
                raise ContractViolation("prefix contains END")
            handle = self.child(handle, tok)
        return self.logprobs(handle)

    def sequence_logprob(self, start: int, goal: int | None, tokens: Sequence[int]) -> float:
        if not tokens or tokens[-1] != self.end:
            raise ContractViolation("sequence must end with END")
        if len(tokens) - 1 > self.max_horizon:
            raise ContractViolation("sequence longer than max_horizon")
        handle = self.root(start, goal)
        total = float(handle[2][tokens[0]])
        for prev, tok in zip(tokens[:-1], tokens[1:]):
            handle = self.child(handle, prev)
            total += float(handle[2][tok])
        return total

    # -- batched loss and gradients --------------------------------------------

    def loss_and_grads(self, starts, goals, sequences, scale: float = 1.0):
        """Per-sequence NLL and gradients of ``scale * mean(NLL)``.

        ``sequences`` are token lists ending in END. Gradients are returned for
        every entry of ``self.params``.
        """
        self._check_goal(None if goals is None else 0)
        p = self.params
        B = len(sequences)
        d, H, V = self.d_embed, self.d_hidden, self.vocab
        lengths = np.array([len(s) for s in sequences])
        if np.any(lengths < 1) or any(s[-1] != self.end for s in sequences):
            raise ContractViolation("sequence must end with END")
        if lengths.max() - 1 > self.max_horizon:
            raise ContractViolation("sequence longer than max_horizon")
        T = int(lengths.max())
        targets = np.full((T, B), self.end, dtype=np.int64)
        for b, seq in enumerate(sequences):
            targets[:len(seq), b] = seq
        mask = (np.arange(T)[:, None] < lengths[None, :]).astype(float)
        starts = np.asarray(starts, dtype=np.int64)

        X = np.zeros((T, B, 2 * d))
        X[0, :, :d] = p["state_embed"][0, starts]
        if goals is not None:
            goals = np.asarray(goals, dtype=np.int64)
            X[0, :, d:] = p["state_embed"][1, goals]
        X[1:, :, :d] = p["token_embed"][targets[:-1]]

        hs = np.zeros((T + 1, B, H))
        cs = np.zeros((T + 1, B, H))
        gates = np.zeros((T, B, 4 * H))
        logps = np.zeros((T, B, V))
        for t in range(T):
            z = np.concatenate([X[t], hs[t]], axis=1) @ p["W"].T + p["b"]
            i = _sigmoid(z[:, :H])
            f = _sigmoid(z[:, H:2 * H])
            o = _sigmoid(z[:, 2 * H:3 * H])
            g = np.tanh(z[:, 3 * H:])
            gates[t] = np.concatenate([i, f, o, g], axis=1)
            cs[t + 1] = f * cs[t] + i * g
            hs[t + 1] = o * np.tanh(cs[t + 1])
            logps[t] = _log_softmax(hs[t + 1] @ p["W_out"].T + p["b_out"])

        picked = np.take_along_axis(logps, targets[..., None], axis=2)[..., 0]
        nll = -(picked * mask).sum(axis=0)

        grads = {k: np.zeros_like(v) for k, v in p.items()}
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        coef = scale / B
        for t in reversed(range(T)):
            dlogits = np.exp(logps[t])
            dlogits[np.arange(B), targets[t]] -= 1.0
            dlogits *= (mask[t] * coef)[:, None]
            grads["W_out"] += dlogits.T @ hs[t + 1]
            grads["b_out"] += dlogits.sum(axis=0)
            dh = dlogits @ p["W_out"] + dh_next
            i, f, o, g = (gates[t, :, k * H:(k + 1) * H] for k in range(4))
            tc = np.tanh(cs[t + 1])
            do = dh * tc
            dc = dh * o * (1.0 - tc ** 2) + dc_next
            di = dc * g
            dg = dc * i
            df = dc * cs[t]
            dc_next = dc * f
            dz = np.concatenate([di * i * (1 - i), df * f * (1 - f),
                                 do * o * (1 - o), dg * (1 - g ** 2)], axis=1)
            inp = np.concatenate([X[t], hs[t]], axis=1)
            grads["W"] += dz.T @ inp
            grads["b"] += dz.sum(axis=0)
            dinp = dz @ p["W"]
            dx = dinp[:, :2 * d]
            dh_next = dinp[:, 2 * d:]
            if t == 0:
                np.add.at(grads["state_embed"][0], starts, dx[:, :d])
                if goals is not None:
                    np.add.at(grads["state_embed"][1], goals, dx[:, d:])
            else:
                np.add.at(grads["token_embed"], targets[t - 1], dx[:, :d])
        return nll, grads

    def nll(self, starts, goals, sequences) -> np.ndarray:
        return self.loss_and_grads(starts, goals, sequences)[0]

    # -- serialisation -------------------------------------------------------

    def state_arrays(self, include_state_embed: bool = True) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {"backend": self.backend, "role": self.role, "num_states": self.num_states,
                "num_actions": self.num_actions, "max_horizon": self.max_horizon,
                "d_embed": self.d_embed, "d_hidden": self.d_hidden}
        arrays = {k: v for k, v in self.params.items() if include_state_embed or k != "state_embed"}
        return meta, arrays

    @classmethod
    def from_arrays(cls, meta: dict, arrays: dict,
                    state_embed: np.ndarray | None = None) -> "RecurrentSequenceModel":
        if state_embed is None:
            state_embed = np.array(arrays["state_embed"], dtype=float)
        model = cls(meta["num_states"], meta["num_actions"], meta["max_horizon"],
                    meta["role"] == "inverse", meta["d_embed"], meta["d_hidden"],
                    state_embed=state_embed)
        for k in model.params:
            if k != "state_embed":
                model.params[k] = np.array(arrays[k], dtype=float)
        return model


class AdamW:
    """Adam with decoupled weight decay over a list of arrays updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float = 5e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            p *= 1.0 - self.lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def joint_parameters(id_model: RecurrentSequenceModel,
                     prior_model: RecurrentSequenceModel) -> list[tuple[str, int, np.ndarray]]:
    """Unique parameter arrays of both models as ``(name, owner, array)``.

    Owner 0 is the inverse model, 1 the prior; shared arrays appear once.
    """
    seen: set[int] = set()
    out = []
    for owner, model in enumerate((id_model, prior_model)):
        for name in PARAM_NAMES:
            arr = model.params[name]
            if id(arr) in seen:
                continue
            seen.add(id(arr))
            out.append((name, owner, arr))
    return out


def joint_loss_and_grads(id_model, prior_model, batch, alpha: float = 1.0):
    """Loss ``mean NLL_id + alpha * mean NLL_prior`` and gradients for the unique arrays."""
    starts = [ex.start for ex in batch]
    goals = [ex.goal for ex in batch]
    seqs = [ex.actions for ex in batch]
    id_nll, gid = id_model.loss_and_grads(starts, goals, seqs)
    pr_nll, gpr = prior_model.loss_and_grads(starts, None, seqs, scale=alpha)
    grads = []
    for name, owner, arr in joint_parameters(id_model, prior_model):
        g = gid[name] if owner == 0 else gpr[name]
        if owner == 0 and prior_model.params[name] is arr:
            g = g + gpr[name]
        grads.append(g)
    loss = id_nll.mean() + alpha * pr_nll.mean()
    return loss, id_nll, pr_nll, grads
