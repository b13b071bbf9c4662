"""Planted-model data for verification.

Parameters are drawn inside the unit ball, each explicit relation links an
item to its top ``neighbors`` items under the planted item-to-item score, and
every user's sequence is a walk where the next item is drawn with probability
proportional to ``exp(score / temperature)`` among items the user has not yet
visited. The output is *not* k-core filtered, so ids line up with the planted
parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .data import InteractionDataset, RelationGraph
from .model import ModelParams


@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int = 200
    n_items: int = 300
    n_relations: int = 3
    dim: int = 8
    seq_length: int = 20
    temperature: float = 0.1
    seed: int = 0
    neighbors: int = 10
    # planted magnitudes: each vector family is drawn in a ball of this radius
    user_radius: float = 1.0
    item_radius: float = 1.0
    rel_radius: float = 1.0
    item_bias_scale: float = 0.1
    rel_bias_scale: float = 0.5

    def __post_init__(self):
        for name in ("n_users", "n_items", "dim", "seq_length", "neighbors"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_relations < 0:
            raise ValueError("n_relations must be >= 0")
        for name in ("user_radius", "item_radius", "rel_radius"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.seq_length > self.n_items:
            raise ValueError("seq_length cannot exceed n_items (walks never revisit an item)")


def _in_ball(rng, n, dim, radius=1.0):
    x = rng.standard_normal((n, dim))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    # shrink a hair so float32 rounding stays inside the ball
    return x * rng.random((n, 1)) ** (1.0 / dim) * radius * (1.0 - 1e-6)


def planted_params(spec: SyntheticSpec, rng) -> ModelParams:
    return ModelParams(
        user_vecs=_in_ball(rng, spec.n_users, spec.dim, spec.user_radius),
        item_vecs=_in_ball(rng, spec.n_items, spec.dim, spec.item_radius),
        rel_vecs=_in_ball(rng, spec.n_relations + 1, spec.dim, spec.rel_radius),
        item_bias=rng.normal(0.0, spec.item_bias_scale, spec.n_items),
        rel_bias=rng.normal(0.0, spec.rel_bias_scale, spec.n_relations + 1),
    )


def top_neighbors(params: ModelParams, e: int, m: int, chunk: int = 512) -> np.ndarray:
    """``(n_items, m)`` best tails of every item under explicit relation ``e``."""
    n = params.n_items
    m = min(m, n - 1)
    I = params.item_vecs.astype(np.float64)
    out = np.empty((n, m), dtype=np.int64)
    for lo in range(0, n, chunk):
        heads = I[lo:lo + chunk] + params.rel_vecs[e + 1]
        d = np.square(heads[:, None, :] - I[None, :, :]).sum(-1)
        score = params.item_bias[None, :] - d
        score[np.arange(len(heads)), np.arange(lo, lo + len(heads))] = -np.inf
        ids = np.broadcast_to(np.arange(n), score.shape)
        # descending score, lower id on ties
        order = np.lexsort((ids, -score), axis=-1)[:, :m]
        out[lo:lo + chunk] = order
    return out


def next_item_probabilities(scores: np.ndarray, visited: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax of ``scores / temperature`` over unvisited items."""
    z = np.where(visited, -np.inf, scores / temperature)
    z = np.exp(z - z.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def sample_from(rng, probs: np.ndarray) -> np.ndarray:
    """One inverse-CDF draw per row of ``probs``."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    idx = (cdf < u[:, None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[1] - 1)


def generate_synthetic(spec: SyntheticSpec, chunk: int = 1024):
    """Return ``(dataset, graph, planted_params)``; deterministic in ``spec.seed``."""
    ss = np.random.SeedSequence([spec.seed, 0x51])
    r_params, r_walk = (np.random.default_rng(s) for s in ss.spawn(2))
    params = planted_params(spec, r_params).astype(np.float32)

    edges = []
    for e in range(spec.n_relations):
        nb = top_neighbors(params, e, spec.neighbors)
        heads = np.repeat(np.arange(spec.n_items), nb.shape[1])
        edges.extend(zip(heads.tolist(), [e] * len(heads), nb.ravel().tolist()))
    graph = RelationGraph.from_edges([f"rel{e}" for e in range(spec.n_relations)], spec.n_items, edges)

    seqs = np.empty((spec.n_users, spec.seq_length), dtype=np.int64)
    all_items = np.arange(spec.n_items)
    for lo in range(0, spec.n_users, chunk):
        users = np.arange(lo, min(lo + chunk, spec.n_users))
        visited = np.zeros((len(users), spec.n_items), dtype=bool)
        cur = r_walk.integers(spec.n_items, size=len(users))
        seqs[users, 0] = cur
        visited[np.arange(len(users)), cur] = True
        for t in range(1, spec.seq_length):
            scores = kernels.score_candidates(params, users, cur,
                                              np.broadcast_to(all_items, (len(users), spec.n_items)))
            cur = sample_from(r_walk, next_item_probabilities(scores, visited, spec.temperature))
            seqs[users, t] = cur
            visited[np.arange(len(users)), cur] = True

    dataset = InteractionDataset.from_sequences(list(seqs), n_items=spec.n_items)
    return dataset, graph, params
