"""Command-line front end.

    hetpre synth    --out DIR [--seed N] ...
    hetpre ingest   DATASET_DIR --out BUNDLE
    hetpre pretrain DATASET --out DIR [--config FILE] [--seed N] ...
    hetpre eval     --embeddings FILE --labels FILE --task classify|cluster

Errors exit nonzero with ``error[<category>]: message`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import storage
from .errors import ConfigError, DatasetFormatError, HetpreError, ShapeMismatchError, TrainingDiverged
from .evaluation import kmeans_eval, linear_probe
from .graph import build_graph
from .synth import DEFAULT_PARAMS, planted_hin
from .trainer import TrainConfig, pretrain

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("hetpre")

INTERNAL_EXIT = 70


def _parse_counts(text):
    counts = {}
    for item in text.split(","):
        name, _, n = item.partition("=")
        if not name or not n.isdigit():
            raise ConfigError(f"bad --counts entry {item!r}; expected TYPE=N")
        counts[name.strip()] = int(n)
    return counts


def _parse_fractions(text):
    out = []
    for item in text.split(","):
        v = float(item)
        v = v / 100.0 if v >= 1 else v
        if not 0 < v < 1:
            raise ConfigError(f"train fraction {item!r} out of range")
        out.append(v)
    return out


def load_dataset(path, normalization="row"):
    path = Path(path)
    if path.is_dir():
        return storage.load_text_dataset(path, normalization=normalization)
    ds = storage.load_bundle(path)
    if ds.graph.normalization != normalization:
        ds = storage.Dataset(
            build_graph(ds.graph.schema, ds.graph.edge_lists(), ds.graph.counts, normalization),
            ds.features, ds.labels, ds.name,
        )
    return ds


def load_config(path) -> dict:
    path = Path(path)
    try:
        if path.suffix == ".json":
            data = json.loads(path.read_text(encoding="utf-8"))
        else:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return data.get("train", data)


def cmd_synth(args):
    counts = _parse_counts(args.counts) if args.counts else dict(DEFAULT_PARAMS["per_type_counts"])
    hub = args.hub or (DEFAULT_PARAMS["hub"] if not args.counts else None)
    graph, feats, blocks = planted_hin(
        args.blocks, counts, args.p_in, args.p_out, args.feature_dim, args.feature_noise,
        seed=args.seed, star=not args.no_star, hub=hub,
    )
    storage.write_text_dataset(args.out, graph, feats, labels=blocks, name=args.name)
    print(f"wrote\t{args.out}")
    print(f"objects\t{', '.join(f'{t} ({n})' for t, n in graph.counts.items())}")
    print(f"edges\t{graph.num_edges}")
    return 0


def cmd_ingest(args):
    ds = storage.load_text_dataset(args.dataset_dir, normalization=args.normalization)
    storage.save_bundle(args.out, ds)
    objects, rels = ds.stats().split("\t")
    print(f"dataset\t{ds.name}")
    print(f"objects\t{objects}")
    print(f"relations\t{rels}")
    print(f"edges\t{ds.graph.num_edges}")
    labeled = ", ".join(f"{t} ({len(ids)})" for t, (ids, _) in ds.labels.items())
    print(f"labeled\t{labeled or '-'}")
    print(f"bundle\t{args.out}")
    return 0


def resolve_config(args) -> TrainConfig:
    data = load_config(args.config) if args.config else {}
    overrides = {
        "seed": args.seed,
        "warmup_epochs": args.warmup_epochs,
        "max_epochs": args.max_epochs,
        "learning_rate": args.lr,
        "weight_decay": args.weight_decay,
        "hidden_dims": [int(v) for v in args.hidden_dims.split(",")] if args.hidden_dims else None,
        "validation_fraction": args.validation_fraction,
        "lpa_max_iters": args.lpa_max_iters,
        "optimizer": args.optimizer,
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(data)


def cmd_pretrain(args):
    config = resolve_config(args)
    ds = load_dataset(args.dataset, normalization=config.normalization)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")

    def progress(rec):
        log.info("%s %3d loss %.4f val %.4f churn %.4f", rec.phase, rec.epoch, rec.loss, rec.val_loss, rec.churn)

    try:
        result = pretrain(ds.graph, ds.features, config, on_epoch=progress)
    except TrainingDiverged as exc:
        if exc.last_params is not None:
            storage.save_checkpoint(out / "checkpoint.npz", exc.last_params)
            log.warning("wrote last finite checkpoint to %s", out / "checkpoint.npz")
        raise
    storage.save_checkpoint(out / "checkpoint.npz", result.params)
    storage.write_embeddings(out / "embeddings.bin", result.embeddings.matrix)
    storage.write_embeddings_tsv(out / "embeddings.tsv", result.embeddings.matrix)
    storage.write_pseudo_labels(out / "pseudo.labels", result.labels)
    storage.write_report(out / "report.jsonl", result.report)
    r = result.report
    print(f"K\t{r.k}")
    print(f"best_epoch\t{r.best_epoch}")
    print(f"best_val_loss\t{r.epochs[r.best_epoch].val_loss:.6f}")
    print(f"final_churn\t{r.epochs[-1].churn:.6f}")
    print(f"out\t{out}")
    return 0


def load_eval_labels(path):
    """``(global_ids, classes)`` from a bundle, a dataset directory, or a TSV."""
    path = Path(path)
    if path.is_dir() or path.suffix == ".npz":
        return load_dataset(path).global_labels()
    gids, classes = [], []
    for lineno, line in storage._data_lines(path):
        parts = line.split()
        if len(parts) != 2:
            raise DatasetFormatError(f"expected 2 fields, got {len(parts)}", path, lineno)
        gids.append(int(parts[0]))
        classes.append(int(parts[1]))
    return np.array(gids, dtype=np.int64), np.array(classes, dtype=np.int64)


def cmd_eval(args):
    emb = storage.read_embeddings(args.embeddings)
    gids, classes = load_eval_labels(args.labels)
    if gids.size == 0:
        raise ShapeMismatchError("no labeled objects")
    if gids.max() >= emb.shape[0]:
        raise ShapeMismatchError(
            f"labels reference object {int(gids.max())} but embeddings cover {emb.shape[0]} objects"
        )
    seeds = range(args.seeds)
    records = []
    if args.task == "classify":
        fractions = _parse_fractions(args.fractions)
        scores = {f: np.array([linear_probe(emb, classes, f, seed=s, index=gids) for s in seeds]) for f in fractions}
        print("metric\t" + "\t".join(f"{f * 100:g}%" for f in fractions))
        for col, name in ((0, "Mic-F1"), (1, "Mac-F1")):
            print(name + "\t" + "\t".join(f"{scores[f][:, col].mean():.4f}" for f in fractions))
        for f in fractions:
            for col, key in ((0, "micro_f1"), (1, "macro_f1")):
                records.append((f"classify.{key}.{f:g}.mean", scores[f][:, col].mean()))
                records.append((f"classify.{key}.{f:g}.std", scores[f][:, col].std()))
    else:
        vals = np.array([kmeans_eval(emb, classes, seed=s, index=gids) for s in seeds])
        print("metric\tmean\tstd")
        for col, name in ((0, "NMI"), (1, "ARI")):
            print(f"{name}\t{vals[:, col].mean():.4f}\t{vals[:, col].std():.4f}")
            records.append((f"cluster.{name.lower()}.mean", vals[:, col].mean()))
            records.append((f"cluster.{name.lower()}.std", vals[:, col].std()))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for key, value in records:
                fh.write(f"{key}\t{value:.6f}\n")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="hetpre", description="Self-supervised pre-training on heterogeneous networks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a planted-partition dataset directory")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--seed", type=int, default=0, help="generator seed")
    s.add_argument("--blocks", type=int, default=DEFAULT_PARAMS["num_blocks"], help="number of planted blocks")
    s.add_argument("--counts", help="per-type object counts, e.g. A=200,P=300,S=100 (first type is the hub)")
    s.add_argument("--p-in", type=float, default=DEFAULT_PARAMS["p_in"], help="within-block link probability")
    s.add_argument("--p-out", type=float, default=DEFAULT_PARAMS["p_out"], help="between-block link probability")
    s.add_argument("--feature-dim", type=int, default=DEFAULT_PARAMS["feature_dim"], help="feature dimension")
    s.add_argument("--feature-noise", type=float, default=DEFAULT_PARAMS["feature_noise"],
                   help="Gaussian feature noise scale")
    s.add_argument("--hub", help="hub type of the star schema")
    s.add_argument("--no-star", action="store_true", help="link every pair of types instead of a star")
    s.add_argument("--name", default="planted", help="dataset name written to schema.toml")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="validate a text dataset and write a binary bundle")
    s.add_argument("dataset_dir", help="directory in the text ingestion format")
    s.add_argument("--out", required=True, help="bundle path (.npz)")
    s.add_argument("--normalization", default="row", choices=["row", "symmetric"], help="link weight normalization")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("pretrain", help="pre-train and export embeddings")
    s.add_argument("dataset", help="bundle (.npz) or text dataset directory")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config", help="TOML or JSON file with training settings")
    s.add_argument("--seed", type=int, help="random seed")
    s.add_argument("--warmup-epochs", type=int, help="warm-up epochs against the initial pseudo-labels")
    s.add_argument("--max-epochs", type=int, help="joint training epochs")
    s.add_argument("--lr", type=float, help="learning rate")
    s.add_argument("--weight-decay", type=float, help="decoupled weight decay")
    s.add_argument("--hidden-dims", help="comma-separated layer widths, e.g. 64,64")
    s.add_argument("--validation-fraction", type=float, help="held-out object fraction for model selection")
    s.add_argument("--lpa-max-iters", type=int, help="sweep cap for the initial clustering")
    s.add_argument("--optimizer", choices=["adam", "sgd"], help="optimizer")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("eval", help="evaluate frozen embeddings")
    s.add_argument("--embeddings", required=True, help="embeddings.bin or embeddings.tsv")
    s.add_argument("--labels", required=True, help="bundle, dataset directory, or TSV of global_id<TAB>class")
    s.add_argument("--task", choices=["classify", "cluster"], default="classify", help="evaluation task")
    s.add_argument("--fractions", default="4,6,8", help="training fractions in percent (classify)")
    s.add_argument("--seeds", type=int, default=10, help="number of evaluation seeds to average")
    s.add_argument("--out", help="write key<TAB>value metric records here")
    s.set_defaults(func=cmd_eval)
    return p


def _limit_threads():
    n = os.environ.get("HETPRE_THREADS")
    if not n:
        return None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return None
    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = _limit_threads()
    try:
        return args.func(args)
    except HetpreError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # top-level handler
        print(f"error[internal]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return INTERNAL_EXIT
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
