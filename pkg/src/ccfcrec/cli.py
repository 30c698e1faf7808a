"""Command-line entry point: ingest, train, evaluate, synth, export, report.

Exit codes: 0 success, 2 input error, 3 compatibility error, 4 numerical divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    AttributeSchema,
    DataError,
    InteractionDataset,
    SyntheticConfig,
    generate_synthetic,
    load_attributes,
    load_interactions,
    split_by_item,
    write_attributes,
    write_interactions,
)
from .encoders import Hyperparams, cbce_batch, uce_all
from .evaluation import DEFAULT_KS, distance_report, evaluate, write_distance_csv
from .training import CheckpointError, DivergenceError, IncompatibleCheckpoint, load_checkpoint, save_checkpoint, train

log = logging.getLogger("ccfcrec")

EXIT_OK, EXIT_INPUT, EXIT_COMPAT, EXIT_DIVERGED = 0, 2, 3, 4
CHECKPOINT_NAME = "model.ccfc"
HISTORY_NAME = "history.jsonl"


class InputError(Exception):
    pass


@dataclass
class RunConfig:
    interactions: str = "interactions.tsv"
    attributes: str = "attributes.jsonl"
    schema: str = "schema.json"
    dense: dict[str, str] = field(default_factory=dict)
    output_dir: str = "run"
    variant: str = "full"
    ks: list[int] = field(default_factory=lambda: list(DEFAULT_KS))
    ratios: list[float] = field(default_factory=lambda: [0.70, 0.15, 0.15])
    seed: int = 0
    threads: int = 1
    hyper: Hyperparams = field(default_factory=Hyperparams)

    def to_json(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["hyper"] = self.hyper.to_dict()
        return doc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, doc: dict, base_dir: Path | None = None) -> "RunConfig":
        doc = dict(doc)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        try:
            hyper = Hyperparams.from_dict(doc.pop("hyper", {}))
        except (TypeError, ValueError) as exc:
            raise InputError(f"bad hyperparameters: {exc}") from None
        cfg = cls(**doc, hyper=hyper)
        if base_dir is not None:
            # relative data paths are resolved against the config file's directory
            for name in ("interactions", "attributes", "schema"):
                setattr(cfg, name, str(base_dir / getattr(cfg, name)))
            cfg.dense = {k: str(base_dir / v) for k, v in cfg.dense.items()}
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise InputError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_json(doc, path.parent)

    def validate(self) -> None:
        if self.variant not in ("full", "no-contrastive", "pretrain"):
            raise InputError(f"unknown variant {self.variant!r}")
        for p in [self.interactions, self.attributes, self.schema, *self.dense.values()]:
            if not Path(p).exists():
                raise InputError(f"input file not found: {p}")
        if not self.ks or min(self.ks) < 1:
            raise InputError("ks must be positive integers")


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    for name in ("variant", "output_dir", "threads", "seed"):
        val = getattr(args, name, None)
        if val is not None:
            setattr(cfg, name, val)
    if getattr(args, "ks", None):
        cfg.ks = _parse_ks(args.ks)
    hyper_over = {}
    for f in dataclasses.fields(Hyperparams):
        val = getattr(args, f"h_{f.name}", None)
        if val is not None:
            hyper_over[f.name] = val
    env_seed = os.environ.get("CCFC_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise InputError(f"CCFC_SEED must be an integer, got {env_seed!r}") from None
    hyper_over["seed"] = cfg.seed
    doc = cfg.hyper.to_dict()
    if "d" in hyper_over and "h" not in hyper_over:
        doc["h"] = None
    doc.update(hyper_over)
    try:
        cfg.hyper = Hyperparams.from_dict(doc)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    return cfg


def _parse_ks(text) -> list[int]:
    if isinstance(text, list):
        return text
    try:
        return [int(k) for k in str(text).split(",") if k.strip()]
    except ValueError:
        raise InputError(f"bad --ks value {text!r}") from None


def _limit_threads(n: int):
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def load_dataset(cfg: RunConfig) -> InteractionDataset:
    cfg.validate()
    ds = load_interactions(cfg.interactions)
    schema = AttributeSchema.load(cfg.schema)
    table = load_attributes(cfg.attributes, schema, ds, cfg.dense)
    return ds.with_attributes(table)


def _split(cfg: RunConfig, ds: InteractionDataset):
    return split_by_item(ds, tuple(cfg.ratios), cfg.seed)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    cfg = RunConfig(
        interactions=args.interactions,
        attributes=args.attributes,
        schema=args.schema,
        dense=dict(_parse_dense(args.dense)),
        seed=args.seed,
    )
    ds = load_dataset(cfg)
    bundle = _split(cfg, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "valid", "test"):
        write_interactions(getattr(bundle, name), out / f"{name}.tsv")
    summary = {
        "users": ds.n_users,
        "items": ds.n_items,
        "interactions": len(ds),
        "split_seed": cfg.seed,
        "split_items": {n: int(len(getattr(bundle, n).items)) for n in ("train", "valid", "test")},
        "split_interactions": {n: len(getattr(bundle, n)) for n in ("train", "valid", "test")},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary))
    return EXIT_OK


def _parse_dense(items):
    for entry in items or []:
        name, sep, path = entry.partition("=")
        if not sep:
            raise InputError(f"--dense expects field=path, got {entry!r}")
        yield name, path


def cmd_train(args) -> int:
    cfg = _apply_overrides(RunConfig.load(args.config), args)
    ds = load_dataset(cfg)
    bundle = _split(cfg, ds)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = _checkpoint_meta(cfg, ds, bundle)
    with _limit_threads(cfg.threads):
        try:
            params, history = train(bundle, cfg.hyper, cfg.variant)
        except DivergenceError as exc:
            if exc.last_good is not None:
                save_checkpoint(exc.last_good, None, dict(meta, diverged=True), out / CHECKPOINT_NAME)
            if exc.history is not None:
                exc.history.write_jsonl(out / HISTORY_NAME)
            print(f"error: training diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
    save_checkpoint(params, None, meta, out / CHECKPOINT_NAME)
    history.write_jsonl(out / HISTORY_NAME)
    print(f"wrote {out / CHECKPOINT_NAME} ({len(history.main())} epochs, best {history.best_epoch})")
    return EXIT_OK


def _checkpoint_meta(cfg: RunConfig, ds: InteractionDataset, bundle) -> dict:
    return {
        "variant": cfg.variant,
        "seed": cfg.seed,
        "hyper": cfg.hyper.to_dict(),
        "user_ids": ds.user_ids,
        "item_ids": ds.item_ids,
        "train_items": bundle.train.items.tolist(),
        "valid_items": bundle.valid.items.tolist(),
        "test_items": bundle.test.items.tolist(),
    }


def _load_for_checkpoint(args):
    """Config, dataset, checkpoint and the training split the checkpoint was fitted on."""
    cfg = _apply_overrides(RunConfig.load(args.config), args)
    ds = load_dataset(cfg)
    if not Path(args.checkpoint).exists():
        raise InputError(f"checkpoint not found: {args.checkpoint}")
    params, _, meta = load_checkpoint(args.checkpoint, ds.attributes.schema.digest())
    if meta.get("user_ids") != ds.user_ids or meta.get("item_ids") != ds.item_ids:
        raise IncompatibleCheckpoint("checkpoint id maps do not match the configured dataset")
    train_ds = ds.restrict_items(meta["train_items"])
    hyper = Hyperparams.from_dict(meta["hyper"])
    return cfg, ds, params, meta, train_ds, hyper


def _read_test_file(path, ds: InteractionDataset) -> InteractionDataset:
    if not Path(path).exists():
        raise InputError(f"test file not found: {path}")
    raw = load_interactions(path)
    users = {u: i for i, u in enumerate(ds.user_ids)}
    items = {v: i for i, v in enumerate(ds.item_ids)}
    pairs = []
    for u, v in raw.pairs:
        uid, iid = raw.user_ids[u], raw.item_ids[v]
        if iid not in items:
            raise InputError(f"{path}: unknown item {iid!r}")
        if uid not in users:
            log.info("dropping test user %r unknown to the dataset", uid)
            continue
        pairs.append((users[uid], items[iid]))
    return InteractionDataset(ds.n_users, ds.n_items, pairs, ds.user_ids, ds.item_ids, ds.attributes)


def cmd_evaluate(args) -> int:
    cfg, ds, params, meta, train_ds, hyper = _load_for_checkpoint(args)
    if args.test:
        test = _read_test_file(args.test, ds)
    else:
        test = ds.restrict_items(meta["test_items"])
    try:
        metrics = evaluate(test, train_ds, params, cfg.ks, hyper.leaky_slope, hyper.mean_pool, recall_hr=args.recall_hr)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    doc = metrics.to_json()
    if args.out:
        Path(args.out).write_text(json.dumps(doc) + "\n", encoding="utf-8")
    print(json.dumps(doc))
    print(metrics.table(), file=sys.stderr)
    return EXIT_OK


def cmd_synth(args) -> int:
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text(encoding="utf-8"))
    for f in dataclasses.fields(SyntheticConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            base[f.name] = val
    env_seed = os.environ.get("CCFC_SEED")
    if env_seed is not None:
        base["seed"] = int(env_seed)
    try:
        syn = SyntheticConfig(**base)
    except TypeError as exc:
        raise InputError(f"bad synthetic config: {exc}") from None
    ds, truth = generate_synthetic(syn)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_interactions(ds, out / "interactions.tsv")
    write_attributes(ds.attributes, ds.item_ids, out / "attributes.jsonl")
    ds.attributes.schema.save(out / "schema.json")
    truth_doc = {
        "config": dataclasses.asdict(syn),
        "liked_genres": [np.flatnonzero(r).tolist() for r in truth.liked_genres],
        "disliked_stars": [np.flatnonzero(r).tolist() for r in truth.disliked_stars],
        "item_genre": truth.genre.tolist(),
        "item_star": truth.star.tolist(),
    }
    (out / "truth.json").write_text(json.dumps(truth_doc) + "\n", encoding="utf-8")
    run = RunConfig(
        interactions="interactions.tsv", attributes="attributes.jsonl", schema="schema.json", seed=syn.seed, output_dir="run"
    )
    run.save(out / "run.json")
    print(f"wrote {len(ds)} interactions for {ds.n_users} users and {ds.n_items} items to {out}")
    return EXIT_OK


def cmd_export(args) -> int:
    cfg, ds, params, meta, train_ds, hyper = _load_for_checkpoint(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    q = cbce_batch(np.arange(ds.n_items), params, ds.attributes, hyper.leaky_slope)
    s = uce_all(params, train_ds, hyper.mean_pool)
    _write_embeddings(out / "items_cbce.tsv", ds.item_ids, q)
    _write_embeddings(out / "users_uce.tsv", ds.user_ids, s)
    print(f"wrote {len(q)} item and {len(s)} user embeddings to {out}")
    return EXIT_OK


def _write_embeddings(path, ids, mat):
    with open(path, "w", encoding="utf-8") as fh:
        for i, row in zip(ids, mat):
            fh.write(i + "\t" + ",".join(repr(float(x)) for x in row) + "\n")


def cmd_report(args) -> int:
    cfg, ds, params, meta, train_ds, hyper = _load_for_checkpoint(args)
    users = {u: i for i, u in enumerate(ds.user_ids)}
    items = {v: i for i, v in enumerate(ds.item_ids)}
    if args.user not in users:
        raise InputError(f"unknown user {args.user!r}")
    pos, neg = [], []
    for k, pair in enumerate(p for p in args.pairs.split(",") if p):
        a, sep, b = pair.partition(":")
        if not sep or a not in items or b not in items:
            raise InputError(f"bad pair {pair!r}; expected known_pos_item:known_neg_item")
        pos.append(items[a])
        neg.append(items[b])
    try:
        rows = distance_report(users[args.user], pos, neg, params, ds.attributes, train_ds, hyper.leaky_slope, hyper.mean_pool)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            write_distance_csv(rows, fh)
    else:
        write_distance_csv(rows, sys.stdout)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _add_run_flags(p):
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="BLAS threads; 1 = deterministic mode")
    p.add_argument("--ks", help="comma separated cutoffs, e.g. 5,10,20")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccfcrec", description="Contrastive collaborative filtering for cold-start items")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate input files and write the item-level split")
    p.add_argument("--interactions", required=True)
    p.add_argument("--attributes", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--dense", action="append", help="dense feature file as field=path")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a model and write checkpoint + history")
    _add_run_flags(p)
    p.add_argument("--variant", choices=["full", "no-contrastive", "pretrain"])
    p.add_argument("--output-dir", dest="output_dir")
    for f in dataclasses.fields(Hyperparams):
        if f.name in ("seed", "patience", "h", "mean_pool"):
            continue
        kind = int if f.type in ("int", int) else float
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"h_{f.name}", type=kind)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="HR@k / NDCG@k of a checkpoint on cold items")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", help="TSV of test interactions (default: the checkpoint's test split)")
    p.add_argument("--recall-hr", action="store_true", help="divide hits by |relevant| instead of k")
    p.add_argument("--out", help="also write metrics JSON here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate the synthetic genre/star benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON with synthetic generator settings")
    for f in dataclasses.fields(SyntheticConfig):
        kind = float if f.type in ("float", float) else int
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=kind)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("export", help="write item CBCE and user UCE embeddings as TSV")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("report", help="distance table between a user's UCE and item CBCEs")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--pairs", required=True, help="pos:neg item id pairs, comma separated")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (IncompatibleCheckpoint, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
