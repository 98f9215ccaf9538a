"""Command-line entry point.

Subcommands: ``gen`` (write a corpus), ``pretrain``, ``train``, ``eval``,
``sweep``, ``graph`` (dump one sample's graph and spectral markers).
Every run writes a manifest into its output directory before doing any
work; re-running into a directory that already has a manifest requires
--force.  Exit codes: 0 success, 2 usage/config errors, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import TrainConfig
from .data import CorpusConfig, generate_corpus, read_corpus, split, write_corpus
from .errors import UsageError
from .graphs import build_knn_graph, link_markers, normalized_laplacian, write_graph_dump
from .metrics import format_report
from .training import (
    evaluate,
    evaluate_gcn,
    load_checkpoint,
    params_from_best,
    run_finetune,
    run_pretrain,
    save_checkpoint,
    sweep,
)

EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _load_json_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        return json.load(f)


def _corpus_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def _write_manifest(out: Path, command: str, config: dict, seeds, force: bool,
                    corpus_digest: str | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.json"
    if manifest.exists() and not force:
        raise UsageError(
            f"{manifest} already exists; pass --force to overwrite a completed run"
        )
    doc = {
        "command": command,
        "config": config,
        "corpus_digest": corpus_digest,
        "seeds": list(seeds),
        "out_dir": str(out),
        "tool_version": __version__,
    }
    with open(manifest, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def _train_config(args) -> TrainConfig:
    raw = _load_json_config(args.config)
    model_raw = raw.pop("model", {})
    if getattr(args, "k", None) is not None:
        model_raw["knn"] = args.k
    if getattr(args, "cl", None) is not None:
        model_raw["link_dim"] = args.cl
    if getattr(args, "layers", None) is not None:
        model_raw["encoder_layers"] = args.layers
    if getattr(args, "width", None) is not None:
        model_raw["width"] = args.width
    tcfg = TrainConfig.from_dict({**raw, "model": model_raw})
    if getattr(args, "epochs", None) is not None:
        field = "pretrain_epochs" if args.cmd == "pretrain" else "finetune_epochs"
        tcfg = dataclasses.replace(tcfg, **{field: args.epochs})
    if getattr(args, "lr", None) is not None:
        field = "pretrain_lr" if args.cmd == "pretrain" else "finetune_lr"
        tcfg = dataclasses.replace(tcfg, **{field: args.lr})
    return tcfg


def _read_splits(corpus_dir: Path):
    if not corpus_dir.is_dir():
        raise UsageError(f"corpus directory {corpus_dir} does not exist")
    parts = []
    for name in ("train", "val", "test"):
        d = corpus_dir / name
        parts.append(read_corpus(d) if d.exists() else [])
    return tuple(parts)


def _write_history(out: Path, history: list[dict], name: str = "curve.jsonl") -> None:
    with open(out / name, "w") as f:
        for row in history:
            f.write(json.dumps(row, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    raw = _load_json_config(args.config)
    fractions = raw.pop("fractions", (0.8, 0.1, 0.1))
    count = int(raw.pop("count", 500))
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = CorpusConfig.from_dict(raw)
    out = Path(args.out)
    _write_manifest(out, "gen", {**cfg.to_dict(), "count": count, "fractions": list(fractions)},
                    [cfg.seed], args.force)
    samples = generate_corpus(cfg, count)
    train, val, test = split(samples, fractions, cfg.seed)
    for name, part in (("train", train), ("val", val), ("test", test)):
        write_corpus(part, out / name, cfg.num_classes)
    counts = np.zeros(cfg.num_classes, dtype=np.int64)
    for s in train:
        counts += np.bincount(s.labels, minlength=cfg.num_classes)
    print(f"corpus written to {out} ({len(train)}/{len(val)}/{len(test)} train/val/test)")
    print("train class counts: " + " ".join(f"{b}:{c}" for b, c in enumerate(counts)))
    return 0


def cmd_pretrain(args) -> int:
    tcfg = _train_config(args)
    corpus_dir = Path(args.corpus)
    train, val, _ = _read_splits(corpus_dir)
    out = Path(args.out)
    seed = args.seed if args.seed is not None else tcfg.seeds[0]
    _write_manifest(out, "pretrain", tcfg.to_dict(), [seed], args.force,
                    corpus_digest=_corpus_digest(corpus_dir))
    result = run_pretrain(tcfg, train, val, seed)
    best = params_from_best(result)
    save_checkpoint(out / "extractor.ckpt", tcfg.to_dict(), best, step=len(result.history))
    _write_history(out, result.history)
    print(f"pretrained extractor saved to {out / 'extractor.ckpt'}")
    return 0


def cmd_train(args) -> int:
    tcfg = _train_config(args)
    corpus_dir = Path(args.corpus)
    train, val, _ = _read_splits(corpus_dir)
    out = Path(args.out)
    seed = args.seed if args.seed is not None else tcfg.seeds[0]
    _write_manifest(out, "train", {**tcfg.to_dict(), "init": args.init}, [seed], args.force,
                    corpus_digest=_corpus_digest(corpus_dir))
    init_from = None
    if args.init and args.init != "none":
        init_from = load_checkpoint(args.init).params
    result = run_finetune(tcfg, train, val, seed, init_from=init_from)
    best = params_from_best(result)
    save_checkpoint(out / "model.ckpt", tcfg.to_dict(), best, step=len(result.history))
    _write_history(out, result.history)
    print(f"model saved to {out / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    corpus_dir = Path(args.corpus)
    splits = _read_splits(corpus_dir)
    samples = dict(zip(("train", "val", "test"), splits))[args.split]
    ckpt = load_checkpoint(args.init)
    tcfg = TrainConfig.from_dict(ckpt.config)
    out = Path(args.out)
    _write_manifest(out, "eval", {"init": args.init, "split": args.split}, [], args.force,
                    corpus_digest=_corpus_digest(corpus_dir))
    if args.head == "gcn":
        report = evaluate_gcn(ckpt.params, tcfg, samples)
    else:
        report = evaluate(ckpt.params, tcfg.model, samples)
    text = format_report(report.per_class, report.f_avg, report.confusion)
    (out / "report.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_sweep(args) -> int:
    tcfg = _train_config(args)
    corpus_dir = Path(args.corpus)
    splits = _read_splits(corpus_dir)
    values = [int(v) for v in args.values.split(",")]
    out = Path(args.out)
    _write_manifest(out, "sweep", {**tcfg.to_dict(), "axis": args.axis, "values": values},
                    tcfg.seeds, args.force, corpus_digest=_corpus_digest(corpus_dir))
    rows = sweep(tcfg, splits, args.axis, values,
                 pretrain_epochs=args.pretrain_epochs, finetune_epochs=args.epochs)
    header = [args.axis] + [f"F[class {b}]" for b in range(tcfg.model.num_classes)] + ["F_avg"]
    lines = ["\t".join(header)]
    for row in rows:
        cells = [str(row["value"])] + [f"{v:.6f}" for v in row["per_class"]] + [f"{row['f_avg']:.6f}"]
        lines.append("\t".join(cells))
    table = "\n".join(lines) + "\n"
    (out / "sweep.tsv").write_text(table)
    print(table, end="")
    return 0


def cmd_graph(args) -> int:
    corpus_dir = Path(args.corpus)
    split_dir = corpus_dir / args.split
    samples = read_corpus(split_dir)
    idx = int(args.image)
    if idx < 0 or idx >= len(samples):
        raise UsageError(f"sample {args.image} not in {split_dir} (has {len(samples)})")
    s = samples[idx]
    g = build_knn_graph(s.centroids, args.k)
    lm = link_markers(normalized_laplacian(g), args.cl)
    write_graph_dump(args.out, g, lm)
    print(f"graph dump for sample {idx} written to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cellgraph",
                                description="nucleus-type classification on synthetic cell graphs")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--config", help="JSON corpus config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--force", action="store_true")

    def train_like(name, help_):
        q = sub.add_parser(name, help=help_)
        q.add_argument("corpus")
        q.add_argument("--config", help="JSON train config")
        q.add_argument("--out", required=True)
        q.add_argument("--seed", type=int)
        q.add_argument("--epochs", type=int)
        q.add_argument("--lr", type=float)
        q.add_argument("--k", type=int)
        q.add_argument("--cl", type=int)
        q.add_argument("--layers", type=int)
        q.add_argument("--width", type=int)
        q.add_argument("--force", action="store_true")
        return q

    train_like("pretrain", "pretrain the feature extractor under the GCN head")
    t = train_like("train", "train the full model")
    t.add_argument("--init", help="extractor checkpoint or 'none'", default="none")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("corpus")
    e.add_argument("--init", required=True, help="checkpoint path")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--head", default="model", choices=("model", "gcn"))
    e.add_argument("--out", required=True)
    e.add_argument("--force", action="store_true")

    s = train_like("sweep", "run a hyperparameter sweep")
    s.add_argument("--axis", required=True, choices=("layers", "edges"))
    s.add_argument("--values", required=True, help="comma-separated settings")
    s.add_argument("--pretrain-epochs", type=int, dest="pretrain_epochs")

    gr = sub.add_parser("graph", help="dump one sample's graph and markers")
    gr.add_argument("corpus")
    gr.add_argument("--image", required=True, help="sample index within the split")
    gr.add_argument("--split", default="train", choices=("train", "val", "test"))
    gr.add_argument("--out", required=True)
    gr.add_argument("--k", type=int, default=4)
    gr.add_argument("--cl", type=int, default=16)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "gen": cmd_gen,
        "pretrain": cmd_pretrain,
        "train": cmd_train,
        "eval": cmd_eval,
        "sweep": cmd_sweep,
        "graph": cmd_graph,
    }
    try:
        return handlers[args.cmd](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        from .errors import ConfigError, ContractError, CorpusError, CheckpointError, NumericError

        if isinstance(e, (ConfigError, ContractError, CorpusError, CheckpointError)):
            print(f"error: {e}", file=sys.stderr)
            return EXIT_USAGE
        if isinstance(e, NumericError):
            print(f"numeric failure: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        raise


if __name__ == "__main__":
    sys.exit(main())
