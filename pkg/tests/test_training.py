import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import fd_mismatches, random_batches, random_params
from mohr import kernels
from mohr.data import InteractionDataset, RelationGraph, split_leave_one_out
from mohr.evaluation import evaluate_setting1
from mohr.model import Hyperparams, ModelParams, relation_probabilities
from mohr.synthetic import SyntheticSpec, generate_synthetic
from mohr.training import (AdamState, Batches, NumericAbort, Sampler, TrainConfig, adam_step, bias_penalty,
                           gradients, loss_item, loss_rel, loss_seq, norm_censor, sample_batch,
                           total_objective, train, train_variant)


@pytest.fixture(scope="module")
def small_synth():
    spec = SyntheticSpec(n_users=60, n_items=50, n_relations=3, seq_length=10, seed=4)
    ds, g, planted = generate_synthetic(spec)
    return split_leave_one_out(ds), g, planted


# ------------------------------------------------------------------ sampling

def test_single_user_forced_seq_record():
    sp = split_leave_one_out(InteractionDataset.from_sequences([[0, 1]], n_items=6))
    recs = sample_batch(sp, RelationGraph.empty(6), "seq", 200, seed=1)
    assert len(recs) == 200
    assert np.all(recs[:, :3] == [0, 0, 1])
    assert not np.isin(recs[:, 3], [0, 1]).any()


def test_no_relations_gives_empty_item_and_rel_batches(small_synth):
    sp, _, _ = small_synth
    g = RelationGraph.empty(sp.n_items)
    assert sample_batch(sp, g, "item", 64).shape == (0, 4)
    assert sample_batch(sp, g, "rel", 64).shape == (0, 4)


def test_item_negatives_uniform_over_admissible():
    sp = split_leave_one_out(InteractionDataset.from_sequences([[0, 1, 2, 0, 1]], n_items=3))
    g = RelationGraph.from_edges(["a"], 3, [(0, 0, 1)])
    recs = Sampler(sp, g, seed=9).sample_items(10000)
    assert np.all(recs[:, :3] == [0, 1, 1])
    counts = np.bincount(recs[:, 3], minlength=3)
    assert counts[1] == 0
    sd = math.sqrt(10000 * 0.25)
    assert abs(counts[0] - 5000) <= 3 * sd and abs(counts[2] - 5000) <= 3 * sd


def test_record_invariants(small_synth):
    sp, g, _ = small_synth
    s = Sampler(sp, g, seed=3)
    seq, items, rels = s.sample(2000)
    train_sets = [set(t.tolist()) for t in sp.train]
    for u, i, p, q in seq:
        assert q not in train_sets[u]
        t = sp.train[u]
        assert any(t[k] == i and t[k + 1] == p for k in range(len(t) - 1))
    assert np.all(g.has_edge(items[:, 0], items[:, 1] - 1, items[:, 2]))
    assert not np.any(g.has_edge(items[:, 0], items[:, 1] - 1, items[:, 3]))
    for u, i, rp, rn in rels:
        assert rp != rn and 0 <= rp <= g.n_relations and 0 <= rn <= g.n_relations
    # positive relation explains some training transition (u, i, next); negative explains none of them
    heads = {(int(u), int(a)): set() for u, t in enumerate(sp.train) for a in t}
    for u, t in enumerate(sp.train):
        for a, b in zip(t[:-1], t[1:]):
            heads[(u, int(a))].add(int(b))
    for u, i, rp, rn in rels[:300]:
        explained = [set(np.flatnonzero(g.relevance_mask([i], [b])[0]).tolist()) for b in heads[(u, i)]]
        assert any(rp in ex and rn not in ex for ex in explained)


def test_sampler_is_seeded(small_synth):
    sp, g, _ = small_synth
    a = Sampler(sp, g, seed=5).sample(100)
    b = Sampler(sp, g, seed=5).sample(100)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    # skipping a kind leaves the other streams untouched
    c = Sampler(sp, g, seed=5).sample(100, items=False)
    assert np.array_equal(a.seq, c.seq) and np.array_equal(a.rels, c.rels) and len(c.items) == 0


def test_negative_exclusion_full_avoids_held_out(small_synth):
    sp, g, _ = small_synth
    recs = Sampler(sp, g, seed=2, negative_exclusion="full").sample_seq(3000)
    full = [set(s.tolist()) for s in sp.sequences]
    assert all(q not in full[u] for u, _, _, q in recs)


# ------------------------------------------------------------------ losses

def test_zero_margin_loss_is_ln2():
    p = ModelParams.initialize(2, 4, 1, 3, seed=0, dtype=np.float64)
    p.item_vecs[:] = 0
    rec = np.array([[0, 0, 1, 2]])
    assert loss_seq(p, rec) == pytest.approx(math.log(2), abs=1e-15)
    assert loss_item(p, np.array([[0, 1, 1, 2]])) == pytest.approx(0.693147, abs=1e-6)


def test_large_margin_loss_vanishes():
    p = ModelParams.initialize(1, 3, 0, 2, seed=0, dtype=np.float64)
    p.item_bias[:] = [0.0, 1e3, -1e3]
    assert loss_seq(p, np.array([[0, 0, 1, 2]])) < 1e-300
    assert loss_item(p, np.array([[0, 0, 1, 2]])) == 0.0


def _sig_loss(x):
    return math.log1p(math.exp(-x)) if x > -30 else -x


def test_kernel_losses_match_scalar_oracle(backend, rng):
    for on_scores in (False, True):
        p = random_params(rng)
        b = random_batches(rng, p)
        want_s, want_i, want_r = [], [], []
        for u, i, a, c in b.seq:
            ti = p.item_vecs[i]
            pr = relation_probabilities(p, u, i)

            def r_star(t):
                s = p.item_bias[t] - sum((ti + p.user_vecs[u] - p.item_vecs[t]) ** 2)
                for r in range(p.n_relations + 1):
                    s += pr[r] * (p.item_bias[t] - sum((ti + p.rel_vecs[r] - p.item_vecs[t]) ** 2))
                return s
            want_s.append(_sig_loss(r_star(a) - r_star(c)))
        for i, r, a, c in b.items:
            f = lambda t: p.item_bias[t] - sum((p.item_vecs[i] + p.rel_vecs[r] - p.item_vecs[t]) ** 2)
            want_i.append(_sig_loss(f(a) - f(c)))
        for u, i, a, c in b.rels:
            sc = np.array([p.rel_bias[r] - sum((p.user_vecs[u] + p.item_vecs[i] - p.rel_vecs[r]) ** 2)
                           for r in range(p.n_relations + 1)])
            v = sc if on_scores else np.exp(sc) / np.exp(sc).sum()
            want_r.append(_sig_loss(v[a] - v[c]))
        g = p.zeros_like()
        got = kernels.accumulate_gradients(p, g, b.seq, b.items, b.rels, 1.0, 1.0, 1.0, on_scores)
        assert got == pytest.approx([np.mean(want_s), np.mean(want_i), np.mean(want_r)], rel=1e-12)
        assert loss_rel(p, b.rels, on_scores) == pytest.approx(np.mean(want_r), rel=1e-12)


def test_objective_special_cases(rng):
    p = random_params(rng)
    b = random_batches(rng, p)
    h0 = Hyperparams(alpha=0, beta=0, lam=0)
    assert total_objective(p, h0, b) == loss_seq(p, b.seq)
    z = p.zeros_like()
    assert bias_penalty(z) == 0.0
    assert total_objective(z, Hyperparams(lam=1.0), Batches.empty()) == 0.0
    h = Hyperparams(alpha=0.7, beta=2.0, lam=0.3)
    want = (loss_seq(p, b.seq) + 0.7 * loss_item(p, b.items) + 2.0 * loss_rel(p, b.rels)
            + 0.3 * (np.sum(p.item_bias ** 2) + np.sum(p.rel_bias ** 2)))
    assert total_objective(p, h, b) == pytest.approx(want, rel=1e-12)
    assert gradients(p, h, b)[1][3] == pytest.approx(want, rel=1e-12)


# ------------------------------------------------------------------ gradients

def test_empty_batches_zero_gradient(backend, rng):
    p = random_params(rng)
    g, losses = gradients(p, Hyperparams(lam=0.0), Batches.empty())
    assert all(not a.any() for a in g.arrays().values())
    assert not losses.any()


def test_bias_only_gradient_from_penalty(backend, rng):
    p = random_params(rng)
    g, _ = gradients(p, Hyperparams(lam=0.25), Batches.empty())
    assert g.item_bias == pytest.approx(0.5 * p.item_bias, rel=1e-15)
    assert g.rel_bias == pytest.approx(0.5 * p.rel_bias, rel=1e-15)
    assert not g.user_vecs.any() and not g.item_vecs.any() and not g.rel_vecs.any()


def test_finite_difference_gradients(backend):
    rng = np.random.default_rng(20)
    for c in range(20):
        flags = dict(bias_in_mixture=bool(c % 2), mixture=c % 5 != 4)
        p = random_params(rng, n_users=4, n_items=8, n_relations=3, dim=6, scale=1.0, **flags)
        b = random_batches(rng, p, n=7)
        h = Hyperparams(alpha=0.5 + rng.random(), beta=0.5 + rng.random(), lam=0.05)
        assert fd_mismatches(p, h, b, on_scores=c % 3 == 2) == [], f"config {c}"


# ------------------------------------------------------------------ adam and censoring

def test_zero_gradient_adam_is_noop(rng):
    p = random_params(rng)
    before = p.copy()
    st_ = AdamState.zeros(p)
    adam_step(p, st_, p.zeros_like(), 0.01, censor=False)
    assert st_.step == 1
    for k, v in p.arrays().items():
        assert np.array_equal(v, getattr(before, k))


def test_adam_first_step_is_learning_rate():
    p = ModelParams(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1), np.zeros(1))
    g = p.zeros_like()
    g.item_bias[:] = 1.0
    st_ = AdamState.zeros(p)
    adam_step(p, st_, g, 1e-3)
    assert p.item_bias[0] == pytest.approx(-1e-3, rel=1e-6)
    adam_step(p, st_, g, 1e-3)
    assert p.item_bias[0] == pytest.approx(-2e-3, rel=1e-6)


def test_adam_matches_recurrence_oracle(rng):
    p = random_params(rng, scale=0.1)
    ref = {k: v.astype(np.float64).copy() for k, v in p.arrays().items()}
    m = {k: np.zeros_like(v) for k, v in ref.items()}
    v2 = {k: np.zeros_like(v) for k, v in ref.items()}
    st_ = AdamState.zeros(p)
    lr = 0.01
    for t in range(1, 11):
        g = p.zeros_like()
        for k, a in g.arrays().items():
            a[...] = rng.normal(size=a.shape)
        adam_step(p, st_, g, lr, censor=False)
        for k in ref:
            gk = getattr(g, k)
            m[k] = 0.9 * m[k] + 0.1 * gk
            v2[k] = 0.999 * v2[k] + 0.001 * gk * gk
            ref[k] = ref[k] - lr * (m[k] / (1 - 0.9 ** t)) / (np.sqrt(v2[k] / (1 - 0.999 ** t)) + 1e-8)
    assert st_.step == 10
    for k, a in p.arrays().items():
        assert a == pytest.approx(ref[k], rel=1e-12, abs=1e-15)


def test_censor_examples():
    p = ModelParams(np.array([[2.0, 0.0], [0.3, 0.4]]), np.zeros((1, 2)), np.zeros((1, 2)),
                    np.zeros(1), np.zeros(1))
    norm_censor(p)
    assert p.user_vecs[0] == pytest.approx([1.0, 0.0])
    assert p.user_vecs[1].tolist() == [0.3, 0.4]


@given(st.integers(0, 2**32 - 1), st.sampled_from([np.float32, np.float64]))
def test_censor_random_matrix(seed, dtype):
    rng = np.random.default_rng(seed)
    x = (rng.normal(size=(50, 7)) * rng.exponential(2.0, size=(50, 1))).astype(dtype)
    p = ModelParams(x.copy(), x.copy(), x[:3].copy(), np.zeros(50, dtype), np.zeros(3, dtype))
    norm_censor(p)
    for a in (p.user_vecs, p.item_vecs, p.rel_vecs):
        assert np.linalg.norm(a.astype(np.float64), axis=1).max() <= 1 + 1e-9
    small = np.linalg.norm(x.astype(np.float64), axis=1) <= 1.0
    assert np.array_equal(p.user_vecs[small], x[small])


# ------------------------------------------------------------------ training loop

def test_zero_iterations_returns_initial(small_synth):
    sp, g, _ = small_synth
    p, log = train(sp, g, Hyperparams(iterations=0), TrainConfig(dim=4))
    init = ModelParams.initialize(sp.n_users, sp.n_items, g.n_relations, 4, seed=0)
    for k, v in p.arrays().items():
        assert np.array_equal(v, getattr(init, k))
    assert log.objectives == []


def test_training_is_deterministic(small_synth):
    sp, g, _ = small_synth
    h = Hyperparams(iterations=150, batch_size=64, learning_rate=0.01)
    a, la = train(sp, g, h, TrainConfig(dim=4, eval_every=50))
    b, lb = train(sp, g, h, TrainConfig(dim=4, eval_every=50))
    assert la.objectives == lb.objectives
    for k, v in a.arrays().items():
        assert np.array_equal(v, getattr(b, k))


def test_backends_train_alike(small_synth):
    sp, g, _ = small_synth
    h = Hyperparams(iterations=100, batch_size=64, learning_rate=0.01)
    out = {}
    prev = kernels.backend()
    try:
        for be in ("numba", "numpy"):
            kernels.set_backend(be)
            out[be] = train(sp, g, h, TrainConfig(dim=4, eval_every=1000))
    finally:
        kernels.set_backend(prev)
    (a, la), (b, lb) = out["numba"], out["numpy"]
    assert la.objective_array() == pytest.approx(lb.objective_array(), rel=1e-6, abs=1e-9)
    for k, v in a.arrays().items():
        assert v == pytest.approx(getattr(b, k), abs=1e-5)


def test_objective_decreases(small_synth):
    sp, g, _ = small_synth
    _, log = train(sp, g, Hyperparams(iterations=500, batch_size=128, learning_rate=0.003),
                   TrainConfig(dim=8, eval_every=10000))
    total = log.objective_array()[:, 4]
    assert total[400:500].mean() < total[0:100].mean()


def test_feasibility_after_every_step(small_synth):
    sp, g, _ = small_synth
    worst = []

    def check(step, params, losses):
        worst.append(max(np.linalg.norm(a.astype(np.float64), axis=1).max()
                         for a in (params.user_vecs, params.item_vecs, params.rel_vecs)))
        assert all(np.isfinite(a).all() for a in params.arrays().values())

    train(sp, g, Hyperparams(iterations=300, batch_size=64, learning_rate=0.05),
          TrainConfig(dim=4, eval_every=10000, step_callback=check))
    assert len(worst) == 300 and max(worst) <= 1 + 1e-9


def test_no_relations_alpha_beta_zero_equivalence(small_synth):
    """Single-task latent-only model vs. full model on a relation-free graph."""
    sp, _, _ = small_synth
    g0 = RelationGraph.empty(sp.n_items)
    h = Hyperparams(iterations=200, batch_size=64, learning_rate=0.01)
    cfg = TrainConfig(dim=6, eval_every=100, bias_in_mixture=False)
    pa, la = train_variant(sp, g0, h, "single-task-no-mixture", cfg)
    pb, lb = train_variant(sp, g0, h, "full", cfg)
    ta, tb = la.objective_array()[:, 1], lb.objective_array()[:, 1]
    assert np.array_equal(ta, tb)
    for k, v in pa.arrays().items():
        assert np.array_equal(v, getattr(pb, k))
    # with |R| = 0 the relation terms never contribute
    assert not lb.objective_array()[:, 2:4].any()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_abort(small_synth):
    sp, g, _ = small_synth
    with pytest.raises(NumericAbort):
        train(sp, g, Hyperparams(iterations=20, lam=1e300, learning_rate=1e30), TrainConfig(dim=4))


def test_early_stopping_keeps_best(small_synth):
    sp, g, _ = small_synth
    seen = []
    p, log = train(sp, g, Hyperparams(iterations=3000, batch_size=64, learning_rate=0.05),
                   TrainConfig(dim=4, eval_every=50, patience=2,
                               eval_callback=lambda row, params: seen.append(row["ndcg10"])))
    assert log.stopped_early
    assert len(seen) < 60
    best = max(seen)
    assert evaluate_setting1(p, sp, 100, seed=0, target="valid").ndcg10 == pytest.approx(best)
    assert log.best_step == log.evals[int(np.argmax(seen))]["step"]


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(position_sampling="sometimes")
    with pytest.raises(ValueError):
        TrainConfig(negative_exclusion="none")
    with pytest.raises(ValueError):
        TrainConfig(dim=0)
    assert replace(TrainConfig(), dim=3).dim == 3
