"""Multi-task training: triple sampling, losses, analytic gradients, Adam.

One step draws three batches (sequence, item-relation, next-relation records),
accumulates the gradient of

    T = T_S + alpha*T_I + beta*T_R + lam*(sum b_i^2 + sum b_r^2)

with each T_* a batch mean of ``-ln sigmoid(delta)``, takes an Adam step and
projects every embedding row back into the unit ball.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np

from . import kernels
from .data import DatasetSplit, RelationGraph
from .model import LATENT, Hyperparams, ModelParams, relation_probabilities, relation_scores, \
    score_item_given_relation, score_next_item, score_latent_only

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NumericAbort(RuntimeError):
    def __init__(self, message, batches=None):
        super().__init__(message)
        self.batches = batches


class Batches(NamedTuple):
    seq: np.ndarray
    items: np.ndarray
    rels: np.ndarray

    @classmethod
    def empty(cls) -> "Batches":
        z = np.zeros((0, 4), dtype=np.int64)
        return cls(z, z, z)


@dataclass
class TrainConfig:
    rel_loss_on_scores: bool = False
    position_sampling: str = "user"      # or "action"
    negative_exclusion: str = "train"    # or "full": also exclude held-out items
    eval_every: int = 1000
    patience: int = 20
    max_neg_attempts: int = 100
    bias_in_mixture: bool = True
    mixture: bool = True
    dim: int = 10
    step_callback: Callable | None = None
    eval_callback: Callable | None = None

    def __post_init__(self):
        if self.negative_exclusion not in ("train", "full"):
            raise ValueError(f"negative_exclusion must be 'train' or 'full', got {self.negative_exclusion!r}")
        if self.position_sampling not in ("user", "action"):
            raise ValueError(f"position_sampling must be 'user' or 'action', got {self.position_sampling!r}")
        if self.eval_every <= 0 or self.patience <= 0 or self.dim <= 0:
            raise ValueError("eval_every, patience and dim must be positive")


# ------------------------------------------------------------------ sampling

class Sampler:
    """Draws the three record kinds from a training split.

    Each kind has its own random stream, so skipping one kind never changes
    what the others draw.
    """

    def __init__(self, split: DatasetSplit, graph: RelationGraph, seed=0,
                 position_sampling: str = "user", max_neg_attempts: int = 100,
                 negative_exclusion: str = "train"):
        self.n_items = split.n_items
        self.n_rel = graph.n_relations
        self.graph = graph
        self.position_sampling = position_sampling
        self.max_neg_attempts = max_neg_attempts
        streams = np.random.SeedSequence([seed, 0x5EED]).spawn(3)
        self.rng_seq, self.rng_item, self.rng_rel = (np.random.default_rng(s) for s in streams)

        lengths = np.array([len(s) for s in split.train], dtype=np.int64)
        self.users = np.flatnonzero(lengths >= 2)
        n_trans = np.maximum(lengths - 1, 0)
        self.trans_offset = np.concatenate([[0], np.cumsum(n_trans)[:-1]])
        self.trans_count = n_trans
        self.trans_user = np.repeat(np.arange(len(lengths)), n_trans)
        heads, tails = [], []
        for s in split.train:
            if len(s) >= 2:
                heads.append(s[:-1])
                tails.append(s[1:])
        self.heads = np.concatenate(heads) if heads else np.zeros(0, dtype=np.int64)
        self.tails = np.concatenate(tails) if tails else np.zeros(0, dtype=np.int64)
        self.relevance = graph.relevance_mask(self.heads, self.tails)

        # items a sequence negative must avoid, as sorted keys u * n_items + item
        source = split.train if negative_exclusion == "train" else split.sequences
        keys = [u * self.n_items + np.unique(s) for u, s in enumerate(source) if len(s)]
        self.user_item_keys = np.sort(np.concatenate(keys)) if keys else np.zeros(0, dtype=np.int64)

        self.pairs = graph.pairs
        sizes = np.array([len(graph.related(i, e)) for i, e in self.pairs], dtype=np.int64)
        self.pair_offset = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        self.pair_size = sizes
        self.pair_nbrs = (np.concatenate([graph.related(i, e) for i, e in self.pairs])
                          if len(self.pairs) else np.zeros(0, dtype=np.int64))

    def _in_user(self, users, items):
        if not len(self.user_item_keys):
            return np.zeros(len(users), dtype=bool)
        key = users * self.n_items + items
        pos = np.minimum(np.searchsorted(self.user_item_keys, key), len(self.user_item_keys) - 1)
        return self.user_item_keys[pos] == key

    def _negatives(self, rng, excluded: Callable, n: int):
        neg = rng.integers(self.n_items, size=n)
        bad = excluded(np.arange(n), neg)
        attempts = 1
        while bad.any() and attempts < self.max_neg_attempts:
            idx = np.flatnonzero(bad)
            neg[idx] = rng.integers(self.n_items, size=len(idx))
            bad[idx] = excluded(idx, neg[idx])
            attempts += 1
        return neg, ~bad

    def _positions(self, rng, n):
        if self.position_sampling == "action":
            return rng.integers(len(self.heads), size=n)
        users = self.users[rng.integers(len(self.users), size=n)]
        k = np.floor(rng.random(n) * self.trans_count[users]).astype(np.int64)
        return self.trans_offset[users] + k

    def sample_seq(self, n: int) -> np.ndarray:
        if not len(self.heads) or n <= 0:
            return np.zeros((0, 4), dtype=np.int64)
        rng = self.rng_seq
        t = self._positions(rng, n)
        u = self.trans_user[t]
        neg, ok = self._negatives(rng, lambda idx, cand: self._in_user(u[idx], cand), n)
        return np.stack([u, self.heads[t], self.tails[t], neg], axis=1)[ok]

    def sample_items(self, n: int) -> np.ndarray:
        if not len(self.pairs) or n <= 0:
            return np.zeros((0, 4), dtype=np.int64)
        rng = self.rng_item
        p = rng.integers(len(self.pairs), size=n)
        i, e = self.pairs[p, 0], self.pairs[p, 1]
        k = np.floor(rng.random(n) * self.pair_size[p]).astype(np.int64)
        pos = self.pair_nbrs[self.pair_offset[p] + k]
        neg, ok = self._negatives(rng, lambda idx, cand: self.graph.has_edge(i[idx], e[idx], cand), n)
        return np.stack([i, e + 1, pos, neg], axis=1)[ok]

    def sample_rels(self, n: int) -> np.ndarray:
        if self.n_rel == 0 or not len(self.heads) or n <= 0:
            return np.zeros((0, 4), dtype=np.int64)
        rng = self.rng_rel
        t = self._positions(rng, n)
        mask = self.relevance[t]
        width = mask.shape[1]
        pos = np.argmax(np.where(mask, rng.random((n, width)), -1.0), axis=1)
        neg = np.argmax(np.where(~mask, rng.random((n, width)), -1.0), axis=1)
        ok = (~mask).any(axis=1)
        return np.stack([self.trans_user[t], self.heads[t], pos, neg], axis=1)[ok]

    def sample(self, n: int, items: bool = True, rels: bool = True) -> Batches:
        z = np.zeros((0, 4), dtype=np.int64)
        return Batches(self.sample_seq(n),
                       self.sample_items(n) if items else z,
                       self.sample_rels(n) if rels else z)


def sample_batch(split: DatasetSplit, graph: RelationGraph, kind: str, batch_size: int, seed=0,
                 **kwargs) -> np.ndarray:
    """One-off batch of ``kind`` in {"seq", "item", "rel"}; empty when the population is."""
    s = Sampler(split, graph, seed=seed, **kwargs)
    return {"seq": s.sample_seq, "item": s.sample_items, "rel": s.sample_rels}[kind](batch_size)


# ------------------------------------------------------------------ losses

def _neg_log_sigmoid(delta: float) -> float:
    # -ln sigmoid(x) = ln(1 + e^{-x})
    return float(np.logaddexp(0.0, -delta))


def _mean(values) -> float:
    return float(np.mean(values)) if len(values) else 0.0


def loss_seq(params: ModelParams, batch) -> float:
    score = score_next_item if params.mixture else score_latent_only
    return _mean([_neg_log_sigmoid(score(params, u, i, p) - score(params, u, i, q))
                  for u, i, p, q in np.asarray(batch).reshape(-1, 4)])


def loss_item(params: ModelParams, batch) -> float:
    return _mean([_neg_log_sigmoid(score_item_given_relation(params, i, r, p)
                                   - score_item_given_relation(params, i, r, q))
                  for i, r, p, q in np.asarray(batch).reshape(-1, 4)])


def loss_rel(params: ModelParams, batch, on_scores: bool = False) -> float:
    out = []
    for u, i, rp, rn in np.asarray(batch).reshape(-1, 4):
        vals = relation_scores(params, u, i) if on_scores else relation_probabilities(params, u, i)
        out.append(_neg_log_sigmoid(vals[rp] - vals[rn]))
    return _mean(out)


def bias_penalty(params: ModelParams) -> float:
    bi = params.item_bias.astype(np.float64)
    br = params.rel_bias.astype(np.float64)
    return float(bi @ bi + br @ br)


def total_objective(params: ModelParams, hyper: Hyperparams, batches: Batches,
                    rel_loss_on_scores: bool = False) -> float:
    return (loss_seq(params, batches.seq)
            + hyper.alpha * loss_item(params, batches.items)
            + hyper.beta * loss_rel(params, batches.rels, rel_loss_on_scores)
            + hyper.lam * bias_penalty(params))


def gradients(params: ModelParams, hyper: Hyperparams, batches: Batches,
              rel_loss_on_scores: bool = False, out: ModelParams | None = None):
    """Analytic gradient of :func:`total_objective`.

    Returns ``(grad, losses)`` where ``losses`` holds ``T_S, T_I, T_R, total``
    as computed inside the kernels (empty batches count as 0).
    """
    grad = params.zeros_like() if out is None else out
    if out is not None:
        for a in grad.arrays().values():
            a.fill(0.0)
    parts = kernels.accumulate_gradients(params, grad, batches.seq, batches.items, batches.rels,
                                         1.0, hyper.alpha, hyper.beta, rel_loss_on_scores)
    parts = np.nan_to_num(parts, nan=0.0)
    if hyper.lam:
        grad.item_bias += 2.0 * hyper.lam * params.item_bias
        grad.rel_bias += 2.0 * hyper.lam * params.rel_bias
    total = parts[0] + hyper.alpha * parts[1] + hyper.beta * parts[2] + hyper.lam * bias_penalty(params)
    return grad, np.array([parts[0], parts[1], parts[2], total])


# ------------------------------------------------------------------ updates

@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adam_step(params: ModelParams, state: AdamState, grad: ModelParams, learning_rate: float,
              censor: bool = True) -> tuple[ModelParams, AdamState]:
    """Bias-corrected Adam update in place, then unit-ball censoring."""
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.arrays().items():
        g = getattr(grad, name)
        m = getattr(state.m, name)
        v = getattr(state.v, name)
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        update = learning_rate * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        p[...] = (p.astype(np.float64) - update).astype(p.dtype)
    if censor:
        norm_censor(params)
    return params, state


def _censor_rows(x: np.ndarray) -> None:
    x64 = x.astype(np.float64)
    norms = np.sqrt(np.square(x64).sum(axis=1))
    over = norms > 1.0
    if not over.any():
        return
    x[over] = (x64[over] / norms[over, None]).astype(x.dtype)
    # rounding to float32 can land a hair outside the ball
    for _ in range(8):
        n2 = np.sqrt(np.square(x[over].astype(np.float64)).sum(axis=1))
        still = n2 > 1.0
        if not still.any():
            break
        idx = np.flatnonzero(over)[still]
        x[idx] = (x[idx].astype(np.float64) * (1.0 - 4.0 * np.finfo(x.dtype).eps)).astype(x.dtype)


def norm_censor(params: ModelParams) -> ModelParams:
    """Replace every embedding row by ``theta / max(||theta||, 1)``; biases untouched."""
    for x in (params.user_vecs, params.item_vecs, params.rel_vecs):
        _censor_rows(x)
    return params


# ------------------------------------------------------------------ loop

@dataclass
class TrainLog:
    objectives: list = field(default_factory=list)   # rows: step, T_S, T_I, T_R, total
    evals: list = field(default_factory=list)        # dicts: step, losses, auc, hr10, ndcg10
    best_step: int = 0
    stopped_early: bool = False

    def objective_array(self) -> np.ndarray:
        return np.asarray(self.objectives, dtype=np.float64).reshape(-1, 5)


def train(split: DatasetSplit, graph: RelationGraph, hyper: Hyperparams,
          config: TrainConfig | None = None, init: ModelParams | None = None):
    """Run ``hyper.iterations`` steps with validation-based early stopping.

    Returns ``(params, log)``; ``params`` are the best parameters seen at a
    validation check (or the final ones when no check ran).
    """
    from .evaluation import evaluate_setting1

    config = config or TrainConfig()
    if init is None:
        params = ModelParams.initialize(split.n_users, split.n_items, graph.n_relations, config.dim,
                                        seed=hyper.seed, bias_in_mixture=config.bias_in_mixture,
                                        mixture=config.mixture)
    else:
        params = init.copy().with_flags(bias_in_mixture=config.bias_in_mixture, mixture=config.mixture)
    log_ = TrainLog()
    sampler = Sampler(split, graph, seed=hyper.seed, position_sampling=config.position_sampling,
                      max_neg_attempts=config.max_neg_attempts, negative_exclusion=config.negative_exclusion)
    state = AdamState.zeros(params)
    grad = params.zeros_like()
    use_items = hyper.alpha > 0
    use_rels = hyper.beta > 0

    best, best_ndcg, bad = params.copy(), -math.inf, 0
    last = np.zeros(4)
    for step in range(1, hyper.iterations + 1):
        batches = sampler.sample(hyper.batch_size, items=use_items, rels=use_rels)
        grad, last = gradients(params, hyper, batches, config.rel_loss_on_scores, out=grad)
        if not np.all(np.isfinite(last)) or not all(np.isfinite(a).all() for a in grad.arrays().values()):
            raise NumericAbort(f"non-finite objective at step {step}: {last.tolist()}", batches)
        adam_step(params, state, grad, hyper.learning_rate)
        log_.objectives.append([step, *last])
        if config.step_callback is not None:
            config.step_callback(step, params, last)

        if step % config.eval_every == 0 or step == hyper.iterations:
            rep = evaluate_setting1(params, split, hyper.eval_negatives, seed=hyper.seed, target="valid")
            row = {"step": step, "T_S": last[0], "T_I": last[1], "T_R": last[2], "total": last[3],
                   "auc": rep.auc, "hr10": rep.hr10, "ndcg10": rep.ndcg10}
            log_.evals.append(row)
            log.info("step %d total %.4f val ndcg@10 %.4f", step, last[3], rep.ndcg10)
            if config.eval_callback is not None:
                config.eval_callback(row, params)
            if rep.ndcg10 > best_ndcg:
                best, best_ndcg, bad, log_.best_step = params.copy(), rep.ndcg10, 0, step
            else:
                bad += 1
                if bad >= config.patience:
                    log_.stopped_early = True
                    break
    if not log_.evals:
        return params, log_
    return best, log_


def train_variant(split, graph, hyper: Hyperparams, variant: str, config: TrainConfig | None = None):
    """Train one of the four component variants (see :data:`VARIANTS`)."""
    multi, mixture = VARIANTS[variant]
    config = replace(config or TrainConfig(), mixture=mixture)
    if not multi:
        hyper = replace(hyper, alpha=0.0, beta=0.0)
    return train(split, graph, hyper, config)


# variant -> (multi-task, mixture)
VARIANTS = {
    "full": (True, True),
    "single-task": (False, True),
    "no-mixture": (True, False),
    "single-task-no-mixture": (False, False),
}
