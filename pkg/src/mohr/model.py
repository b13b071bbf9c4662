"""Parameters and scoring functions of the mixture-of-relations recommender.

All item-to-item, user-to-relation and sequential scores live in one
translational metric space: a head vector plus a translation vector should land
close to the tail vector.

Relation ids are plain integers over the full relation domain: ``LATENT`` (0)
is the latent transition and explicit relation ``e`` (0-based, as listed in a
:class:`~mohr.data.RelationGraph`) has id ``e + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

LATENT = 0


def explicit(e: int) -> int:
    """Relation id of the ``e``-th explicit relation."""
    return e + 1


@dataclass(frozen=True)
class Hyperparams:
    alpha: float = 1.0
    beta: float = 0.1
    lam: float = 1e-4
    learning_rate: float = 1e-3
    batch_size: int = 512
    iterations: int = 20000
    eval_negatives: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("alpha", "beta", "lam"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("batch_size", "eval_negatives"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0 (0 returns the initial parameters)")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class ModelParams:
    """Learnable tables plus the two structural scoring switches.

    ``rel_vecs`` and ``rel_bias`` have ``n_relations + 1`` rows, row 0 being
    the latent relation. ``bias_in_mixture`` controls whether the item bias is
    repeated inside every mixture component; ``mixture=False`` replaces the
    sequential scorer by the latent-only translation model.
    """

    user_vecs: np.ndarray
    item_vecs: np.ndarray
    rel_vecs: np.ndarray
    item_bias: np.ndarray
    rel_bias: np.ndarray
    bias_in_mixture: bool = True
    mixture: bool = True
    _names: tuple = field(default=("user_vecs", "item_vecs", "rel_vecs", "item_bias", "rel_bias"),
                          init=False, repr=False, compare=False)

    def __post_init__(self):
        k = self.item_vecs.shape[1]
        if self.user_vecs.shape[1] != k or self.rel_vecs.shape[1] != k:
            raise ValueError("embedding tables disagree on dimension")
        if self.item_bias.shape != (self.item_vecs.shape[0],):
            raise ValueError("item_bias must have one entry per item")
        if self.rel_bias.shape != (self.rel_vecs.shape[0],):
            raise ValueError("rel_bias must have one entry per relation")
        if self.rel_vecs.shape[0] < 1:
            raise ValueError("the latent relation row is required")

    @classmethod
    def initialize(cls, n_users: int, n_items: int, n_relations: int, dim: int,
                   seed=0, dtype=np.float32, **flags) -> "ModelParams":
        """Uniform draws in [-0.1/sqrt(K), 0.1/sqrt(K)], zero biases.

        Each table draws from its own child stream, so the latent relation row
        and the user/item tables do not depend on the number of relations.
        """
        ss = np.random.SeedSequence(seed)
        ru, ri, rr = (np.random.default_rng(s) for s in ss.spawn(3))
        a = 0.1 / np.sqrt(dim)
        return cls(
            user_vecs=ru.uniform(-a, a, size=(n_users, dim)).astype(dtype),
            item_vecs=ri.uniform(-a, a, size=(n_items, dim)).astype(dtype),
            rel_vecs=rr.uniform(-a, a, size=(n_relations + 1, dim)).astype(dtype),
            item_bias=np.zeros(n_items, dtype=dtype),
            rel_bias=np.zeros(n_relations + 1, dtype=dtype),
            **flags,
        )

    @property
    def n_users(self) -> int:
        return self.user_vecs.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_vecs.shape[0]

    @property
    def n_relations(self) -> int:
        """Number of explicit relations (the latent one excluded)."""
        return self.rel_vecs.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.item_vecs.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in self._names}

    def copy(self) -> "ModelParams":
        return replace(self, **{n: a.copy() for n, a in self.arrays().items()})

    def astype(self, dtype) -> "ModelParams":
        return replace(self, **{n: a.astype(dtype) for n, a in self.arrays().items()})

    def zeros_like(self, dtype=np.float64) -> "ModelParams":
        return replace(self, **{n: np.zeros(a.shape, dtype=dtype) for n, a in self.arrays().items()})

    def with_flags(self, **flags) -> "ModelParams":
        return replace(self, **flags)


def squared_distance(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    return float(_sqdist(x, y))


def _sqdist(head, tails):
    # every distance in this module goes through here so reductions match bitwise
    return np.square(head - tails).sum(axis=-1)


def _check_ids(params: ModelParams, u=None, i=None, r=None):
    if u is not None and not 0 <= u < params.n_users:
        raise IndexError(f"user id {u} out of range")
    if i is not None and not 0 <= i < params.n_items:
        raise IndexError(f"item id {i} out of range")
    if r is not None and not 0 <= r <= params.n_relations:
        raise IndexError(f"relation id {r} out of range")


def score_item_given_relation(params: ModelParams, i: int, r: int, i_prime: int) -> float:
    """``b_{i'} - d(theta_i + theta_r, theta_{i'})``."""
    _check_ids(params, i=i, r=r)
    _check_ids(params, i=i_prime)
    head = params.item_vecs[i].astype(np.float64) + params.rel_vecs[r]
    return float(params.item_bias[i_prime]) - squared_distance(head, params.item_vecs[i_prime])


def score_items_given_relation(params: ModelParams, i: int, r: int, items=None,
                               with_bias: bool = True) -> np.ndarray:
    """Vectorised :func:`score_item_given_relation` over ``items`` (all by default)."""
    _check_ids(params, i=i, r=r)
    tails = params.item_vecs if items is None else params.item_vecs[np.asarray(items)]
    head = params.item_vecs[i].astype(np.float64) + params.rel_vecs[r]
    out = -_sqdist(head, tails)
    if with_bias:
        bias = params.item_bias if items is None else params.item_bias[np.asarray(items)]
        out += bias
    return out


def relation_scores(params: ModelParams, u: int, i: int) -> np.ndarray:
    """``b_r - d(theta_u + theta_i, theta_r)`` for every relation id."""
    _check_ids(params, u=u, i=i)
    head = params.user_vecs[u].astype(np.float64) + params.item_vecs[i]
    return params.rel_bias.astype(np.float64) - _sqdist(head, params.rel_vecs)


def score_relation(params: ModelParams, u: int, i: int, r: int) -> float:
    _check_ids(params, u=u, i=i, r=r)
    head = params.user_vecs[u].astype(np.float64) + params.item_vecs[i]
    return float(params.rel_bias[r]) - squared_distance(head, params.rel_vecs[r])


def softmax(s: np.ndarray) -> np.ndarray:
    z = np.exp(s - np.max(s))
    return z / z.sum()


def relation_probabilities(params: ModelParams, u: int, i: int) -> np.ndarray:
    return softmax(relation_scores(params, u, i))


def score_next_items(params: ModelParams, u: int, i: int, items=None) -> np.ndarray:
    """Sequential score of each candidate next item after ``i`` for user ``u``.

    With ``params.mixture`` the score is the long-term preference term plus the
    probability-weighted sum of per-relation translation scores; otherwise it is
    the latent-only model ``b - d(i+u, i') - d(i+r0, i')``.
    """
    _check_ids(params, u=u, i=i)
    idx = np.arange(params.n_items) if items is None else np.asarray(items)
    tails = params.item_vecs[idx].astype(np.float64)
    bias = params.item_bias[idx].astype(np.float64)
    theta_i = params.item_vecs[i].astype(np.float64)

    pref = bias - _sqdist(theta_i + params.user_vecs[u], tails)

    if not params.mixture:
        return pref - _sqdist(theta_i + params.rel_vecs[LATENT], tails)

    probs = relation_probabilities(params, u, i)
    mix = np.zeros_like(pref)
    for r, p in enumerate(probs):
        comp = -_sqdist(theta_i + params.rel_vecs[r], tails)
        if params.bias_in_mixture:
            comp = comp + bias
        mix += p * comp
    return pref + mix


def score_next_item(params: ModelParams, u: int, i: int, i_prime: int) -> float:
    _check_ids(params, i=i_prime)
    return float(score_next_items(params, u, i, [i_prime])[0])


def score_latent_only(params: ModelParams, u: int, i: int, i_prime: int) -> float:
    """Latent-only translation score ``b - d(i+u, i') - d(i+r0, i')``."""
    _check_ids(params, u=u, i=i)
    _check_ids(params, i=i_prime)
    theta_i = params.item_vecs[i].astype(np.float64)
    tail = params.item_vecs[i_prime].astype(np.float64)
    return float(np.float64(params.item_bias[i_prime])
                 - _sqdist(theta_i + params.user_vecs[u], tail)
                 - _sqdist(theta_i + params.rel_vecs[LATENT], tail))


def parameter_count_for(n_users: int, n_items: int, n_relations: int, dim: int) -> int:
    return (n_users + n_items + n_relations + 1) * dim + n_items + n_relations + 1


def parameter_count(params: ModelParams) -> int:
    return parameter_count_for(params.n_users, params.n_items, params.n_relations, params.dim)


def scoring_cost(params: ModelParams) -> int:
    """Rough multiply-add count of one sequential score, O(K |R|)."""
    k, r = params.dim, params.n_relations + 1
    if not params.mixture:
        return 2 * 3 * k
    return 3 * k + r * (3 * k) + r * (3 * k) + 3 * r
