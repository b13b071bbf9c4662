"""Ranking metrics, relation-grouped layout evaluation and the ablation harness."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .data import DatasetSplit, RelationGraph
from .model import LATENT, ModelParams, relation_probabilities, score_items_given_relation

POLICIES = ("random", "model", "groundTruth")
LIST_SIZE = 10


@dataclass
class EvalReport:
    auc: float
    hr10: float
    ndcg10: float
    n_users: int
    excluded: int = 0
    layout_ndcg: dict = field(default_factory=dict)
    variant: str = "full"
    per_user: dict | None = None

    def __post_init__(self):
        for name in ("auc", "hr10", "ndcg10"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0) and not math.isnan(v):
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.hr10 + 1e-12 < self.ndcg10:
            raise ValueError("hr10 must dominate ndcg10")

    def to_dict(self) -> dict:
        d = {"variant": self.variant, "users": self.n_users, "excluded": self.excluded,
             "auc": self.auc, "hr10": self.hr10, "ndcg10": self.ndcg10}
        for k, v in self.layout_ndcg.items():
            d[f"layout_ndcg_{k}"] = v
        return d

    def to_kv(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.to_dict().items())


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def write_reports(reports, tsv_path=None, kv_path=None) -> None:
    rows = [r.to_dict() for r in reports]
    if tsv_path is not None:
        cols = list(dict.fromkeys(k for r in rows for k in r))
        lines = ["\t".join(cols)] + ["\t".join(_fmt(r.get(c, "")) for c in cols) for r in rows]
        Path(tsv_path).write_text("\n".join(lines) + "\n")
    if kv_path is not None:
        Path(kv_path).write_text("\n".join(r.to_kv() for r in reports))


def write_per_user(report: EvalReport, path) -> None:
    pu = report.per_user or {}
    cols = list(pu)
    with Path(path).open("w") as fh:
        fh.write("\t".join(cols) + "\n")
        for row in zip(*(pu[c] for c in cols)):
            fh.write("\t".join(_fmt(float(x)) if isinstance(x, (float, np.floating)) else str(x)
                               for x in row) + "\n")


# ------------------------------------------------------------------ protocol pieces

def user_rng(seed: int, user: int, stream: int = 0) -> np.random.Generator:
    """Per-user stream, independent of evaluation order and thread count."""
    return np.random.default_rng([seed, user, stream])


def sample_negatives(rng: np.random.Generator, n_items: int, exclude: np.ndarray, n: int) -> np.ndarray:
    """``n`` distinct items drawn uniformly from outside ``exclude`` (sorted unique)."""
    admissible = n_items - len(exclude)
    if admissible <= 0:
        return np.zeros(0, dtype=np.int64)
    if admissible <= n:
        return np.setdiff1d(np.arange(n_items), exclude)
    chosen: list[int] = []
    seen = set()
    excl = set(exclude.tolist())
    while len(chosen) < n:
        for c in rng.integers(n_items, size=2 * (n - len(chosen))).tolist():
            if c not in excl and c not in seen:
                seen.add(c)
                chosen.append(c)
                if len(chosen) == n:
                    break
    return np.asarray(chosen, dtype=np.int64)


def _targets(split: DatasetSplit, target: str):
    users, ctx, truth = [], [], []
    for u in range(split.n_users):
        if target == "test":
            if split.test[u] < 0:
                continue
            users.append(u)
            ctx.append(split.valid[u])
            truth.append(split.test[u])
        elif target == "valid":
            if split.valid[u] < 0 or not len(split.train[u]):
                continue
            users.append(u)
            ctx.append(split.train[u][-1])
            truth.append(split.valid[u])
        else:
            raise ValueError(f"unknown target {target!r}")
    return (np.asarray(users, dtype=np.int64), np.asarray(ctx, dtype=np.int64),
            np.asarray(truth, dtype=np.int64))


def build_candidates(split: DatasetSplit, users, truth, n_negatives: int, seed: int, stream: int):
    """Rows ``[truth, neg_1, ..., neg_n]`` padded with -1, plus the drop mask."""
    n_items = split.n_items
    rows = np.full((len(users), n_negatives + 1), -1, dtype=np.int64)
    for b, u in enumerate(users):
        exclude = np.unique(split.sequences[u])
        negs = sample_negatives(user_rng(seed, int(u), stream), n_items, exclude, n_negatives)
        rows[b, 0] = truth[b]
        rows[b, 1:1 + len(negs)] = negs
    keep = (rows[:, 1:] >= 0).any(axis=1)
    return rows, keep


def _score_rows(params, users, ctx, cands, threads: int | None = None):
    safe = np.where(cands >= 0, cands, 0)
    if not threads or threads <= 1 or len(users) < 2 * threads:
        return kernels.score_candidates(params, users, ctx, safe)
    chunks = np.array_split(np.arange(len(users)), threads)
    with ThreadPoolExecutor(threads) as ex:
        parts = list(ex.map(lambda ix: kernels.score_candidates(params, users[ix], ctx[ix], safe[ix]),
                            chunks))
    return np.concatenate(parts, axis=0)


def rank_metrics(scores: np.ndarray, valid: np.ndarray):
    """Per-row rank of column 0 among valid columns (ties ranked pessimistically).

    Returns ``(rank, auc, hr10, ndcg10)`` arrays.
    """
    gt = scores[:, :1]
    neg = scores[:, 1:]
    vneg = valid[:, 1:]
    above = ((neg > gt) & vneg).sum(1)
    ties = ((neg == gt) & vneg).sum(1)
    below = ((neg < gt) & vneg).sum(1)
    n_neg = vneg.sum(1)
    rank = 1 + above + ties
    auc = (below + 0.5 * ties) / np.maximum(n_neg, 1)
    hit = rank <= LIST_SIZE
    ndcg = np.where(hit, 1.0 / np.log2(rank + 1.0), 0.0)
    return rank, auc, hit.astype(np.float64), ndcg


def evaluate_setting1(params: ModelParams, split: DatasetSplit, n_negatives: int = 100, seed: int = 0,
                      target: str = "test", auc_mode: str = "sampled", threads: int | None = None,
                      keep_per_user: bool = False, variant: str = "full") -> EvalReport:
    """AUC, HR@10 and NDCG@10 of the held-out item against sampled negatives.

    The context item is the item right before the target (the validation item
    for test evaluation). ``auc_mode="full"`` computes AUC against every item
    the user never interacted with instead of the sampled ones.
    """
    if auc_mode not in ("sampled", "full"):
        raise ValueError(f"unknown auc mode {auc_mode!r}")
    users, ctx, truth = _targets(split, target)
    stream = 0 if target == "test" else 1
    cands, keep = build_candidates(split, users, truth, n_negatives, seed, stream)
    excluded = int((~keep).sum())
    users, ctx, truth, cands = users[keep], ctx[keep], truth[keep], cands[keep]
    if not len(users):
        return EvalReport(float("nan"), 0.0, 0.0, 0, excluded, variant=variant)
    scores = _score_rows(params, users, ctx, cands, threads)
    rank, auc, hit, ndcg = rank_metrics(scores, cands >= 0)
    if auc_mode == "full":
        auc = full_auc(params, split, users, ctx, truth, threads)
    per_user = None
    if keep_per_user:
        per_user = {"user": users, "context": ctx, "truth": truth, "rank": rank,
                    "auc": auc, "hr10": hit, "ndcg10": ndcg}
    return EvalReport(float(auc.mean()), float(hit.mean()), float(ndcg.mean()), len(users), excluded,
                      variant=variant, per_user=per_user)


def full_auc(params, split, users, ctx, truth, threads=None, chunk: int = 256) -> np.ndarray:
    all_items = np.arange(split.n_items)
    out = np.empty(len(users))
    for lo in range(0, len(users), chunk):
        sl = slice(lo, lo + chunk)
        scores = _score_rows(params, users[sl], ctx[sl], np.broadcast_to(all_items, (len(users[sl]), split.n_items)),
                             threads)
        for b, u in enumerate(users[sl]):
            row = scores[b]
            mask = np.ones(split.n_items, dtype=bool)
            mask[np.unique(split.sequences[u])] = False
            g = row[truth[lo + b]]
            neg = row[mask]
            out[lo + b] = ((neg < g).sum() + 0.5 * (neg == g).sum()) / max(len(neg), 1)
    return out


# ------------------------------------------------------------------ setting 2

def _ranked(items: np.ndarray, scores: np.ndarray, truth: int) -> np.ndarray:
    # descending score; among ties the ground truth goes last, then lower id first
    order = np.lexsort((items, items == truth, -scores))
    return items[order]


def relation_order(policy: str, probs: np.ndarray, truth_relations: set, rng=None) -> list[int]:
    n = len(probs)
    by_model = list(np.lexsort((np.arange(n), -probs)))
    if policy == "model":
        return [int(r) for r in by_model]
    if policy == "random":
        return [int(r) for r in rng.permutation(n)]
    if policy == "groundTruth":
        first = [r for r in by_model if r in truth_relations]
        return [int(r) for r in first + [r for r in by_model if r not in truth_relations]]
    raise ValueError(f"unknown policy {policy!r}")


def layout_position(order, lists: dict, latent_scores: np.ndarray, cands: np.ndarray, truth: int):
    """Position of ``truth`` in the flattened, de-duplicated layout (None if not shown).

    ``lists[r]`` is the already ranked and truncated list of an explicit
    relation; the latent list ranks every candidate not shown so far by the
    sequential score. ``cands`` must be sorted ascending, aligned with
    ``latent_scores``.
    """
    shown: set = set()
    pos = 0
    for r in order:
        if r == LATENT:
            rest = np.asarray([c for c in cands.tolist() if c not in shown], dtype=np.int64)
            if not len(rest):
                continue
            sc = latent_scores[np.searchsorted(cands, rest)]
            items = _ranked(rest, sc, truth)[:LIST_SIZE]
        else:
            items = lists.get(r, np.zeros(0, dtype=np.int64))
        for c in items.tolist():
            if c in shown:
                continue
            shown.add(c)
            pos += 1
            if c == truth:
                return pos
    return None


def explicit_lists(params: ModelParams, graph: RelationGraph, i: int, cands: np.ndarray, truth: int):
    lists = {}
    for e in range(graph.n_relations):
        members = cands[graph.has_edge(i, e, cands)]
        if not len(members):
            continue
        sc = score_items_given_relation(params, i, e + 1, members)
        lists[e + 1] = _ranked(members, sc, truth)[:LIST_SIZE]
    return lists


def evaluate_setting2(params: ModelParams, split: DatasetSplit, graph: RelationGraph, policy: str,
                      n_negatives: int = 100, seed: int = 0, threads: int | None = None,
                      return_per_user: bool = False):
    """Mean NDCG of the ground truth in a relation-grouped layout.

    Relations are ordered by ``policy`` (random, model probabilities, or
    ground-truth relations first); each shows at most ten candidates, drawn
    from the same candidate pool as :func:`evaluate_setting1`.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    users, ctx, truth = _targets(split, "test")
    cands, keep = build_candidates(split, users, truth, n_negatives, 0 if seed is None else seed, 0)
    users, ctx, truth, cands = users[keep], ctx[keep], truth[keep], cands[keep]
    latent = _score_rows(params, users, ctx, cands, threads)
    ndcg = np.zeros(len(users))
    for b, u in enumerate(users):
        i, g = int(ctx[b]), int(truth[b])
        row = cands[b][cands[b] >= 0]
        sc = latent[b][cands[b] >= 0]
        srt = np.argsort(row, kind="stable")
        row, sc = row[srt], sc[srt]
        probs = relation_probabilities(params, int(u), i)
        truth_rel = {e + 1 for e in range(graph.n_relations) if graph.has_edge(i, e, g)} or {LATENT}
        order = relation_order(policy, probs, truth_rel, user_rng(seed, int(u), 2))
        pos = layout_position(order, explicit_lists(params, graph, i, row, g), sc, row, g)
        ndcg[b] = 0.0 if pos is None else 1.0 / math.log2(pos + 1)
    mean = float(ndcg.mean()) if len(ndcg) else float("nan")
    return (mean, ndcg) if return_per_user else mean


# ------------------------------------------------------------------ ablations, inspection

def run_ablations(split: DatasetSplit, graph: RelationGraph, hyper, variants=("full",), config=None,
                  auc_mode: str = "sampled", policies=()) -> list[EvalReport]:
    """Train each component variant under identical seeds; report test metrics."""
    from .training import VARIANTS, train_variant

    reports = []
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
        params, _ = train_variant(split, graph, hyper, v, config)
        rep = evaluate_setting1(params, split, hyper.eval_negatives, seed=hyper.seed, auc_mode=auc_mode,
                                variant=v)
        for p in policies:
            rep.layout_ndcg[p] = evaluate_setting2(params, split, graph, p, hyper.eval_negatives, hyper.seed)
        reports.append(rep)
    return reports


def neighbor_dump(params: ModelParams, query: int, relation: int, top_n: int = 10,
                  with_bias: bool = True, exclude_query: bool = True) -> list[tuple[int, float]]:
    """Items nearest to ``theta_query + theta_relation``; ties broken by lower id."""
    scores = score_items_given_relation(params, query, relation, with_bias=with_bias)
    ids = np.arange(params.n_items)
    if exclude_query:
        keep = ids != query
        ids, scores = ids[keep], scores[keep]
    order = np.lexsort((ids, -scores))[:top_n]
    return [(int(ids[k]), float(scores[k])) for k in order]
