"""Command-line entry point: ``mohr {train,eval,synth,recommend,ablate}``.

Exit codes: 0 success, 1 configuration error, 2 data or checkpoint error,
3 numeric abort during training.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, build
from .data import (DataError, RelationGraph, load_interactions, load_relations, split_leave_one_out,
                   write_interactions, write_relations)
from .evaluation import POLICIES, EvalReport, evaluate_setting1, evaluate_setting2, write_reports
from .model import LATENT, relation_probabilities, score_next_items
from .synthetic import SyntheticSpec, generate_synthetic
from .training import VARIANTS, NumericAbort, train_variant

log = logging.getLogger("mohr")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


# ------------------------------------------------------------------ shared plumbing

def _load(cfg: RunConfig):
    ds = load_interactions(cfg.interactions, filter_mode=cfg.filter_mode)
    graph = load_relations(cfg.relations, ds) if cfg.relations else RelationGraph.empty(ds.n_items)
    return ds, graph, split_leave_one_out(ds)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _report(params, split, graph, cfg: RunConfig, variant: str | None = None) -> EvalReport:
    rep = evaluate_setting1(params, split, cfg.eval_negatives, seed=cfg.seed, auc_mode=cfg.auc_mode,
                            threads=cfg.threads, variant=variant or cfg.variant)
    if graph.n_relations:
        for pol in POLICIES:
            rep.layout_ndcg[pol] = evaluate_setting2(params, split, graph, pol, cfg.eval_negatives,
                                                     seed=cfg.seed, threads=cfg.threads)
    return rep


def _write_log(train_log, path: Path) -> None:
    with path.open("w") as fh:
        fh.write("step\tT_S\tT_I\tT_R\ttotal\n")
        for row in train_log.objectives:
            fh.write(f"{int(row[0])}\t" + "\t".join(f"{v:.6g}" for v in row[1:]) + "\n")
    if train_log.evals:
        cols = list(train_log.evals[0])
        with path.with_name("valid_log.tsv").open("w") as fh:
            fh.write("\t".join(cols) + "\n")
            for row in train_log.evals:
                fh.write("\t".join(f"{row[c]:.6g}" if isinstance(row[c], float) else str(row[c])
                                   for c in cols) + "\n")


# ------------------------------------------------------------------ commands

def cmd_train(cfg: RunConfig) -> int:
    cfg.validate()
    ds, graph, split = _load(cfg)
    hyper = cfg.hyperparams()
    params, train_log = train_variant(split, graph, hyper, cfg.variant, cfg.train_config())
    out = _out_dir(cfg)
    checkpoint.save(params, out / "model.ckpt")
    _write_log(train_log, out / "train_log.tsv")
    rep = _report(params, split, graph, cfg)
    write_reports([rep], out / "report.tsv", out / "report.kv")
    (out / "run.cfg").write_text(cfg.to_text())
    sys.stdout.write(rep.to_kv())
    return EXIT_OK


def cmd_eval(cfg: RunConfig, ckpt: str) -> int:
    cfg.validate()
    ds, graph, split = _load(cfg)
    mixture = VARIANTS[cfg.variant][1]
    try:
        params = checkpoint.load(ckpt, expect=(split.n_users, split.n_items, graph.n_relations),
                                 bias_in_mixture=cfg.bias_in_mixture, mixture=mixture)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {ckpt!r}: {exc.strerror}") from None
    rep = _report(params, split, graph, cfg)
    write_reports([rep], _out_dir(cfg) / "eval.tsv", None)
    sys.stdout.write(rep.to_kv())
    return EXIT_OK


def cmd_synth(args, seed: int, out: Path) -> int:
    spec_kw = {f.name: getattr(args, f.name) for f in fields(SyntheticSpec)
               if f.name not in ("seed", "dim") and getattr(args, f.name, None) is not None}
    if args.dim is not None:
        spec_kw["dim"] = int(args.dim)
    try:
        spec = SyntheticSpec(**{**spec_kw, "seed": seed})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    ds, graph, planted = generate_synthetic(spec)
    out.mkdir(parents=True, exist_ok=True)
    write_interactions(ds, out / "interactions.tsv")
    write_relations(graph, ds, out / "relations.tsv")
    checkpoint.save(planted, out / "planted.ckpt")
    print(f"wrote {ds.n_users} users, {ds.n_actions} actions, {graph.n_edges} edges to {out}")
    return EXIT_OK


def recommend_groups(params, graph: RelationGraph, u: int, i: int, top_n: int = 10,
                     exclude=()) -> list[tuple[str, float, list[tuple[int, float]]]]:
    """Relation groups ordered by P(r|u,i); each holds its ``top_n`` best items.

    Explicit groups draw from items related to ``i``; the latent group takes
    the best remaining items. Items already shown or in ``exclude`` are skipped.
    """
    scores = score_next_items(params, u, i)
    probs = relation_probabilities(params, u, i)
    order = sorted(range(graph.n_relations + 1), key=lambda r: (-probs[r], r))
    shown = set(int(x) for x in exclude) | {i}
    groups = []
    for r in order:
        if r == LATENT:
            pool = np.setdiff1d(np.arange(params.n_items), np.fromiter(shown, dtype=np.int64))
            name = "latent"
        else:
            pool = np.setdiff1d(graph.related(i, r - 1), np.fromiter(shown, dtype=np.int64))
            name = graph.relation_names[r - 1]
        if r != LATENT and not len(pool):
            continue
        top = pool[np.lexsort((pool, -scores[pool]))][:top_n]
        shown.update(int(x) for x in top)
        groups.append((name, float(probs[r]), [(int(x), float(scores[x])) for x in top]))
    return groups


def cmd_recommend(cfg: RunConfig, ckpt: str, user: str, item: str, top_n: int) -> int:
    cfg.validate()
    ds, graph, split = _load(cfg)
    params = checkpoint.load(ckpt, expect=(split.n_users, split.n_items, graph.n_relations),
                             bias_in_mixture=cfg.bias_in_mixture, mixture=VARIANTS[cfg.variant][1])
    if user not in ds.user_index:
        raise DataError(f"unknown user {user!r}")
    if item not in ds.item_index:
        raise DataError(f"unknown item {item!r}")
    u, i = ds.user_index[user], ds.item_index[item]
    for name, p, items in recommend_groups(params, graph, u, i, top_n, exclude=ds.sequences[u]):
        print(f"[{name}] P={p:.4f}")
        for rank, (x, s) in enumerate(items, 1):
            print(f"  {rank:2d}. {ds.item_ids[x]}\t{s:.4f}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, variants: list[str]) -> int:
    cfg.validate()
    ds, graph, split = _load(cfg)
    hyper = cfg.hyperparams()
    reports = []
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"variant: {v!r} not one of {', '.join(VARIANTS)}")
        params, _ = train_variant(split, graph, hyper, v, cfg.train_config())
        reports.append(_report(params, split, graph, cfg, variant=v))
        log.info("%s ndcg@10 %.4f", v, reports[-1].ndcg10)
    write_reports(reports, _out_dir(cfg) / "ablation.tsv", _out_dir(cfg) / "ablation.kv")
    print("variant\tauc\thr10\tndcg10")
    for r in sorted(reports, key=lambda r: -r.ndcg10):
        print(f"{r.variant}\t{r.auc:.4f}\t{r.hr10:.4f}\t{r.ndcg10:.4f}")
    return EXIT_OK


# ------------------------------------------------------------------ argument parsing

_CFG_FLAGS = [f.name for f in fields(RunConfig) if f.name not in ("seed", "threads", "out")]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="evaluation threads")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    for name in ("interactions", "relations", "variant", "iterations", "dim"):
        common.add_argument(f"--{name.replace('_', '-')}", dest=name)

    p = argparse.ArgumentParser(prog="mohr", description="Mixtures of heterogeneous recommenders.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="fit a model and write checkpoint, log and report")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    syn = sub.add_parser("synth", parents=[common], help="write planted synthetic data")
    for f in fields(SyntheticSpec):
        if f.name not in ("seed", "dim"):
            syn.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name,
                             type=float if f.type in ("float", float) else int)
    rec = sub.add_parser("recommend", parents=[common], help="print a relation-grouped layout")
    rec.add_argument("--checkpoint", required=True)
    rec.add_argument("--user", required=True, help="raw user id")
    rec.add_argument("--item", required=True, help="raw id of the context item")
    rec.add_argument("--top", type=int, default=10)
    ab = sub.add_parser("ablate", parents=[common], help="train and compare component variants")
    ab.add_argument("--variants", default=",".join(VARIANTS))
    return p


def _config_from(args) -> RunConfig:
    overrides = {k: getattr(args, k, None) for k in ("seed", "threads", "out", "interactions",
                                                      "relations", "variant", "iterations", "dim")}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        if k.strip() not in _CFG_FLAGS + ["seed", "threads", "out"]:
            raise ConfigError(f"unknown key {k.strip()!r}")
        overrides[k.strip()] = v
    return build(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = _config_from(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "synth":
            return cmd_synth(args, cfg.seed, Path(cfg.out))
        if args.command == "recommend":
            return cmd_recommend(cfg, args.checkpoint, args.user, args.item, args.top)
        if args.command == "ablate":
            return cmd_ablate(cfg, [v.strip() for v in args.variants.split(",") if v.strip()])
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
