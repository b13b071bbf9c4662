"""Interaction logs, item relation graphs and the leave-one-out split.

File formats (tab separated, one record per line)::

    interactions:  user_raw_id  item_raw_id  timestamp_int
    relations:     head_item_raw_id  relation_name  tail_item_raw_id

Relation edges are directed as stored; list symmetric relations both ways.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import LATENT

log = logging.getLogger(__name__)

MIN_COUNT = 5
FILTER_MODES = ("iterative", "single", "none")


class DataError(ValueError):
    pass


class DegenerateDatasetError(DataError):
    pass


@dataclass
class InteractionDataset:
    """Per-user item sequences in time order, with raw <-> dense id maps.

    Dense ids follow the sorted order of the raw id strings, so they do not
    depend on the line order of the input file.
    """

    sequences: list[np.ndarray]
    timestamps: list[np.ndarray]
    user_ids: list[str]
    item_ids: list[str]
    user_index: dict[str, int] = field(default_factory=dict)
    item_index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.user_index:
            self.user_index = {raw: k for k, raw in enumerate(self.user_ids)}
        if not self.item_index:
            self.item_index = {raw: k for k, raw in enumerate(self.item_ids)}

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_actions(self) -> int:
        return int(sum(len(s) for s in self.sequences))

    def raw_sequences(self) -> dict[str, list[str]]:
        return {self.user_ids[u]: [self.item_ids[i] for i in s] for u, s in enumerate(self.sequences)}

    @classmethod
    def from_sequences(cls, sequences, n_items: int | None = None) -> "InteractionDataset":
        """Wrap dense sequences (raw ids are the decimal dense ids, zero padded)."""
        seqs = [np.asarray(s, dtype=np.int64) for s in sequences]
        if n_items is None:
            n_items = int(max((s.max() for s in seqs if len(s)), default=-1)) + 1
        uw = len(str(max(len(seqs) - 1, 0)))
        iw = len(str(max(n_items - 1, 0)))
        return cls(
            sequences=seqs,
            timestamps=[np.arange(len(s), dtype=np.int64) for s in seqs],
            user_ids=[f"u{u:0{uw}d}" for u in range(len(seqs))],
            item_ids=[f"i{i:0{iw}d}" for i in range(n_items)],
        )


def _read_tsv(path, ncols: int):
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != ncols:
                raise DataError(f"{path}:{lineno}: expected {ncols} tab-separated fields, got {len(parts)}")
            yield lineno, parts


def five_core(users: np.ndarray, items: np.ndarray, min_count: int = MIN_COUNT,
              mode: str = "iterative") -> np.ndarray:
    """Boolean mask of actions kept by the k-core rule.

    ``iterative`` repeats until every remaining user and item has at least
    ``min_count`` actions; ``single`` applies one pass on the raw counts;
    ``none`` keeps everything (used for planted data whose ids must not move).
    """
    if mode not in FILTER_MODES:
        raise ValueError(f"unknown filter mode {mode!r}")
    keep = np.ones(len(users), dtype=bool)
    if mode == "none":
        return keep
    nu = int(users.max()) + 1 if len(users) else 0
    ni = int(items.max()) + 1 if len(items) else 0
    while True:
        uc = np.bincount(users[keep], minlength=nu)
        ic = np.bincount(items[keep], minlength=ni)
        new = keep & (uc[users] >= min_count) & (ic[items] >= min_count)
        if mode == "single" or new.sum() == keep.sum():
            return new
        keep = new


def build_dataset(records, filter_mode: str = "iterative", min_count: int = MIN_COUNT) -> InteractionDataset:
    """``records`` is an iterable of ``(user_raw, item_raw, timestamp)`` in input order."""
    recs = list(records)
    if not recs:
        raise DegenerateDatasetError("dataset degenerate: no interactions")
    u_raw, i_raw, ts = zip(*recs)
    u_names, u_codes = np.unique(np.asarray(u_raw, dtype=object).astype(str), return_inverse=True)
    i_names, i_codes = np.unique(np.asarray(i_raw, dtype=object).astype(str), return_inverse=True)
    ts = np.asarray(ts, dtype=np.int64)
    keep = five_core(u_codes, i_codes, min_count, filter_mode)
    if not keep.any():
        raise DegenerateDatasetError(
            f"dataset degenerate: nothing left after {filter_mode} {min_count}-core filtering")

    order = np.flatnonzero(keep)
    u_keep, i_keep, t_keep = u_codes[order], i_codes[order], ts[order]
    users = np.unique(u_keep)
    items = np.unique(i_keep)
    u_map = np.full(len(u_names), -1, dtype=np.int64)
    u_map[users] = np.arange(len(users))
    i_map = np.full(len(i_names), -1, dtype=np.int64)
    i_map[items] = np.arange(len(items))
    du, di = u_map[u_keep], i_map[i_keep]

    # stable: timestamp ties keep input order
    perm = np.lexsort((np.arange(len(du)), t_keep, du))
    du, di, dt = du[perm], di[perm], t_keep[perm]
    bounds = np.flatnonzero(np.diff(du)) + 1
    return InteractionDataset(
        sequences=np.split(di, bounds),
        timestamps=np.split(dt, bounds),
        user_ids=[str(x) for x in u_names[users]],
        item_ids=[str(x) for x in i_names[items]],
    )


def load_interactions(path, filter_mode: str = "iterative", min_count: int = MIN_COUNT) -> InteractionDataset:
    records = []
    for lineno, (user, item, ts) in _read_tsv(path, 3):
        try:
            records.append((user, item, int(ts)))
        except ValueError:
            raise DataError(f"{path}:{lineno}: timestamp {ts!r} is not an integer") from None
    ds = build_dataset(records, filter_mode, min_count)
    log.info("loaded %d users, %d items, %d actions from %s", ds.n_users, ds.n_items, ds.n_actions, path)
    return ds


def write_interactions(dataset: InteractionDataset, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for u, (seq, ts) in enumerate(zip(dataset.sequences, dataset.timestamps)):
            user = dataset.user_ids[u]
            for i, t in zip(seq, ts):
                fh.write(f"{user}\t{dataset.item_ids[i]}\t{int(t)}\n")


@dataclass
class RelationGraph:
    """Directed typed item graph; ``adjacency[(item, e)]`` is a sorted id array.

    ``e`` indexes ``relation_names`` (0-based). In model relation ids the same
    relation is ``e + 1``; id 0 is the latent relation.
    """

    relation_names: list[str]
    n_items: int
    adjacency: dict[tuple[int, int], np.ndarray]
    dropped_edges: int = 0

    def __post_init__(self):
        R = max(len(self.relation_names), 1)
        keys = []
        for (i, e), nbrs in self.adjacency.items():
            keys.append((i * R + e) * self.n_items + np.asarray(nbrs, dtype=np.int64))
        self._keys = np.sort(np.concatenate(keys)) if keys else np.zeros(0, dtype=np.int64)
        pairs = sorted(k for k, v in self.adjacency.items() if len(v))
        self._pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)

    @property
    def n_relations(self) -> int:
        return len(self.relation_names)

    @property
    def n_edges(self) -> int:
        return len(self._keys)

    @property
    def pairs(self) -> np.ndarray:
        """``(item, e)`` rows with non-empty adjacency, sorted."""
        return self._pairs

    def related(self, i: int, e: int) -> np.ndarray:
        return self.adjacency.get((i, e), np.zeros(0, dtype=np.int64))

    def has_edge(self, heads, rels, tails) -> np.ndarray:
        """Vectorised membership ``tails in I[heads, rels]`` (``rels`` 0-based explicit)."""
        heads, rels, tails = np.broadcast_arrays(np.asarray(heads, dtype=np.int64),
                                                 np.asarray(rels, dtype=np.int64),
                                                 np.asarray(tails, dtype=np.int64))
        if not len(self._keys):
            return np.zeros(heads.shape, dtype=bool)
        R = max(self.n_relations, 1)
        key = (heads * R + rels) * self.n_items + tails
        pos = np.minimum(np.searchsorted(self._keys, key), len(self._keys) - 1)
        return self._keys[pos] == key

    def relevance_mask(self, heads, tails) -> np.ndarray:
        """``(n, R+1)`` mask of relevant relation ids for each transition.

        Column 0 (latent) is set exactly when no explicit relation links the pair.
        """
        heads = np.asarray(heads, dtype=np.int64)
        tails = np.asarray(tails, dtype=np.int64)
        mask = np.zeros((len(heads), self.n_relations + 1), dtype=bool)
        for e in range(self.n_relations):
            mask[:, e + 1] = self.has_edge(heads, e, tails)
        mask[:, LATENT] = ~mask[:, 1:].any(axis=1)
        return mask

    @classmethod
    def empty(cls, n_items: int) -> "RelationGraph":
        return cls([], n_items, {})

    @classmethod
    def from_edges(cls, relation_names, n_items: int, edges, dropped: int = 0) -> "RelationGraph":
        """``edges``: iterable of ``(head, e, tail)`` dense triples."""
        buckets: dict[tuple[int, int], list[int]] = {}
        for h, e, t in edges:
            if h == t:
                raise DataError(f"self-loop on item {h} for relation {relation_names[e]!r}")
            buckets.setdefault((int(h), int(e)), []).append(int(t))
        adjacency = {k: np.unique(np.asarray(v, dtype=np.int64)) for k, v in buckets.items()}
        return cls(list(relation_names), n_items, adjacency, dropped)


def load_relations(path, dataset: InteractionDataset, schema: list[str] | None = None) -> RelationGraph:
    """Read a relation TSV and map it onto ``dataset``'s dense item ids.

    Edges touching items absent from the dataset are dropped and counted in
    ``dropped_edges``. With ``schema`` set, unknown relation names are errors
    and the relation order follows the schema.
    """
    names: list[str] = list(schema) if schema is not None else []
    index = {n: k for k, n in enumerate(names)}
    edges = []
    dropped = 0
    for lineno, (head, rel, tail) in _read_tsv(path, 3):
        if head == tail:
            raise DataError(f"{path}:{lineno}: self-loop on item {head!r}")
        if rel not in index:
            if schema is not None:
                raise DataError(f"{path}:{lineno}: unknown relation {rel!r}")
            index[rel] = len(names)
            names.append(rel)
        h = dataset.item_index.get(head)
        t = dataset.item_index.get(tail)
        if h is None or t is None:
            dropped += 1
            continue
        edges.append((h, index[rel], t))
    graph = RelationGraph.from_edges(names, dataset.n_items, edges, dropped)
    if dropped:
        log.info("dropped %d relation edges with filtered endpoints", dropped)
    return graph


def write_relations(graph: RelationGraph, dataset: InteractionDataset, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for (i, e) in graph.pairs:
            for t in graph.related(i, e):
                fh.write(f"{dataset.item_ids[i]}\t{graph.relation_names[e]}\t{dataset.item_ids[t]}\n")


@dataclass
class DatasetSplit:
    """Leave-one-out partition. ``valid[u]``/``test[u]`` are -1 for users too
    short to evaluate (fewer than 3 actions); those keep everything in train."""

    train: list[np.ndarray]
    valid: np.ndarray
    test: np.ndarray
    sequences: list[np.ndarray]
    n_items: int

    @property
    def n_users(self) -> int:
        return len(self.train)

    def eval_users(self) -> np.ndarray:
        return np.flatnonzero(self.test >= 0)


def split_leave_one_out(dataset: InteractionDataset) -> DatasetSplit:
    train, valid, test = [], [], []
    for seq in dataset.sequences:
        if len(seq) < 3:
            train.append(seq.copy())
            valid.append(-1)
            test.append(-1)
        else:
            train.append(seq[:-2].copy())
            valid.append(int(seq[-2]))
            test.append(int(seq[-1]))
    return DatasetSplit(train, np.asarray(valid, dtype=np.int64), np.asarray(test, dtype=np.int64),
                        [s.copy() for s in dataset.sequences], dataset.n_items)


def relevant_relations(graph: RelationGraph, sequence, k: int) -> set[int]:
    """Relation ids explaining the step ``sequence[k] -> sequence[k+1]``.

    Returns ``{LATENT}`` when no explicit relation links the pair, otherwise
    the set of linking explicit relation ids.
    """
    sequence = np.asarray(sequence)
    if not 0 <= k < len(sequence) - 1:
        raise IndexError(f"position {k} out of range for a sequence of length {len(sequence)}")
    head, tail = int(sequence[k]), int(sequence[k + 1])
    found = {e + 1 for e in range(graph.n_relations)
             if len(graph.related(head, e)) and tail in set(graph.related(head, e).tolist())}
    return found or {LATENT}
