"""Property tests over the module invariants. Kept fast enough to run as one block."""
import math

import numpy as np
from hypothesis import given, settings, strategies as st

from glamor.agent import EpsilonSchedule, TabularGCSLPolicy
from glamor.planner import PlannerConfig, plan, score_sequence
from glamor.replay import ReplayBuffer, Trajectory, num_pairs, relabel
from glamor.seqmodel import make_models
from glamor.seqmodel.checkpoint import load_models, models_checksum, save_models

S, A, H = 6, 3, 4
END = A

seeds = st.integers(0, 2**31 - 1)
actions_st = st.lists(st.integers(0, A - 1), min_size=0, max_size=H)


def _random_traj(rng, length):
    return Trajectory([int(s) for s in rng.integers(0, S, length + 1)],
                      [int(a) for a in rng.integers(0, A, length)], pursued_goal=0)


def _fitted_pair(seed, n_traj=12):
    rng = np.random.default_rng(seed)
    idm, prior = make_models("tabular", S, A, H)
    for _ in range(n_traj):
        t = _random_traj(rng, int(rng.integers(1, 8)))
        idm.observe_trajectory(t.states, t.actions)
        prior.observe_trajectory(t.states, t.actions)
    return idm, prior


@settings(max_examples=40, deadline=None)
@given(seeds, actions_st, st.integers(0, S - 1), st.integers(0, S - 1))
def test_tabular_normalization(seed, prefix, s, g):
    idm, prior = _fitted_pair(seed)
    for lp in (idm.token_logprobs(s, g, prefix), prior.token_logprobs(s, None, prefix)):
        assert np.all(np.isfinite(lp))
        assert abs(math.fsum(np.exp(lp)) - 1.0) < 1e-9


_NEURAL = make_models("neural", S, A, H, seed=0, d_embed=4, d_hidden=6)


@settings(max_examples=25, deadline=None)
@given(actions_st, st.integers(0, S - 1), st.integers(0, S - 1))
def test_neural_normalization(prefix, s, g):
    idm, prior = _NEURAL
    for lp in (idm.token_logprobs(s, g, prefix), prior.token_logprobs(s, None, prefix)):
        assert np.all(np.isfinite(lp))
        assert abs(math.fsum(np.exp(lp)) - 1.0) < 1e-9


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(0, 7), st.integers(1, 5), st.booleans())
def test_relabel_count_and_goal(seed, length, horizon, self_pairs):
    traj = _random_traj(np.random.default_rng(seed), length)
    ex = relabel(traj, horizon, END, self_pairs)
    assert len(ex) == num_pairs(length, horizon, self_pairs)
    for e in ex:
        assert e.actions[-1] == END and END not in e.actions[:-1]
        assert (0 if self_pairs else 1) <= e.length <= horizon
    # every example's goal is the state reached after its actions from some start index
    seqs = {(traj.states[i], traj.states[i + len(e.actions) - 1], e.actions)
            for e in ex for i in range(length + 1)
            if tuple(traj.actions[i:i + e.length]) + (END,) == e.actions}
    assert all((e.start, e.goal, e.actions) in seqs for e in ex)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 20))
def test_fifo_eviction(capacity, n):
    buf = ReplayBuffer(capacity, H, END)
    evicted = []
    for i in range(n):
        out = buf.add(Trajectory([0, 1], [0], pursued_goal=0, tag=i))
        if out is not None:
            evicted.append(out.tag)
    assert len(buf) == min(n, capacity)
    assert evicted == list(range(max(0, n - capacity)))
    assert [t.tag for t in buf] == list(range(max(0, n - capacity), n))


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(1, 40), st.integers(0, S - 1), st.integers(0, S - 1),
       st.sampled_from(["shortest", "plan_end", "naive_end"]))
def test_pruning_soundness_and_score_additivity(seed, budget, s, g, termination):
    idm, prior = _fitted_pair(seed)
    cfg = PlannerConfig(budget=budget, max_len=H, gamma=0.9, termination=termination)
    records = []
    res = plan(idm, prior, s, g, cfg, np.random.default_rng(seed), trace=records.append)
    assert sum(r["count"] for r in records) == budget
    assert sum(r["count"] for r in records if r["pruned"]) == res.pruned
    for r in records:
        lps = [idm.token_logprobs(s, g, r["tokens"][:k])[tok] for k, tok in enumerate(r["tokens"])]
        if r["pruned"]:
            assert lps[-1] < cfg.clip_logp and min(lps[:-1], default=0.0) >= cfg.clip_logp
        else:
            assert min(lps) >= cfg.clip_logp
            exact = score_sequence(idm, prior, s, g, r["tokens"], cfg.gamma)
            assert abs(r["score"] - exact) < 1e-9
    assert abs(res.score - (sum(res.per_token_z) + res.length * math.log(cfg.gamma))) < 1e-9
    assert res.degenerate == (res.pruned == budget)
    if not res.degenerate:
        assert min(res.id_logps) >= cfg.clip_logp
        assert res.score == max(r["score"] for r in records if not r["pruned"])


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 500), st.lists(st.integers(0, 1000), min_size=2))
def test_epsilon_schedule_shape(a, b, decay, steps):
    hi, lo = max(a, b), min(a, b)
    sched = EpsilonSchedule(hi, lo, decay)
    vals = [sched.value(t) for t in sorted(steps)]
    assert all(x >= y - 1e-12 for x, y in zip(vals, vals[1:]))
    assert all(lo - 1e-12 <= v <= hi + 1e-12 for v in vals)
    assert sched.value(decay) == lo and sched.value(decay + 7) == lo
    if decay > 1:
        mid = sched.value(decay // 2)
        assert abs(mid - (hi + (lo - hi) * (decay // 2) / decay)) < 1e-12


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_tabular_checkpoint_round_trip(tmp_path_factory, seed):
    idm, prior = _fitted_pair(seed)
    path = tmp_path_factory.mktemp("ckpt") / "m.npz"
    digest = save_models(path, idm, prior)
    idm2, prior2 = load_models(path)
    assert models_checksum(idm2, prior2) == digest == models_checksum(idm, prior)
    rng = np.random.default_rng(seed)
    for _ in range(10):
        s, g = (int(x) for x in rng.integers(0, S, 2))
        prefix = [int(a) for a in rng.integers(0, A, int(rng.integers(0, H + 1)))]
        assert np.array_equal(idm.token_logprobs(s, g, prefix), idm2.token_logprobs(s, g, prefix))
        assert np.array_equal(prior.token_logprobs(s, None, prefix), prior2.token_logprobs(s, None, prefix))


def test_neural_checkpoint_round_trip(tmp_path):
    idm, prior = _NEURAL
    save_models(tmp_path / "n.npz", idm, prior)
    idm2, prior2 = load_models(tmp_path / "n.npz")
    assert idm2.params["state_embed"] is prior2.params["state_embed"]
    for prefix in ([], [0], [2, 1, 0]):
        assert np.allclose(idm.token_logprobs(1, 4, prefix), idm2.token_logprobs(1, 4, prefix),
                           atol=1e-12, rtol=0)


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(0, S - 1), st.integers(0, S - 1), st.integers(1, H))
def test_gcsl_policy_normalization(seed, s, g, h):
    pol = TabularGCSLPolicy(S, A, H)
    rng = np.random.default_rng(seed)
    for _ in range(5):
        t = _random_traj(rng, int(rng.integers(1, 8)))
        pol.observe_trajectory(t.states, t.actions)
    p = pol.probs(s, g, h)
    assert np.all(p > 0) and abs(math.fsum(p) - 1.0) < 1e-9
