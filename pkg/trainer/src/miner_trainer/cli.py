"""Command-line front end: toy data, base pretraining, adapter training,
grid sweeps, and serving."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from . import data as data_mod
from . import grid as grid_mod
from . import model as model_mod
from . import serve as serve_mod
from . import train as train_mod


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="miner-trainer",
        description="LoRA continued-pretraining trainer and adapter server",
    )
    parser.add_argument("--version", action="version", version=f"miner-trainer {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy-data", help="write a deterministic toy corpus + triple file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--docs", type=int, default=50)
    p.add_argument("--facts-per-doc", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("linearize", help="print or write the training records")
    p.add_argument("--corpus", required=True)
    p.add_argument("--triples", required=True)
    p.add_argument("--out", help="write records here (one per line) instead of stdout")

    p = sub.add_parser("base", help="pretrain a small base model on the abstracts")
    p.add_argument("--corpus", required=True)
    p.add_argument("--triples", required=True, help="included in the vocabulary only")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--d-model", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="continued-pretrain a LoRA adapter from a spec file")
    p.add_argument("--spec", required=True, help="YAML TrainSpec")

    p = sub.add_parser("grid", help="sweep the hyperparameter grid and pick by final loss")
    p.add_argument("--spec", required=True, help="YAML TrainSpec used as the template")
    p.add_argument("--report", required=True, help="TSV report of final losses")
    p.add_argument("--lrs", type=float, nargs="+", help="subset of learning rates")
    p.add_argument("--ranks", type=int, nargs="+", help="subset of LoRA ranks")
    p.add_argument("--alphas", type=int, nargs="+", help="subset of LoRA alphas")
    p.add_argument("--dropouts", type=float, nargs="+", help="subset of LoRA dropouts")
    p.add_argument("--workers", type=int, default=1, help="parallel training workers")

    p = sub.add_parser("serve", help="serve an adapter over chat completions")
    p.add_argument("--adapter", required=True)
    p.add_argument("--base", help="override the base dir recorded in the manifest")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--seed", type=int, help="sampling seed (default: time-based)")

    return parser


def cmd_toy_data(args: argparse.Namespace) -> int:
    corpus_path, triples_path = data_mod.make_toy_corpus(
        args.out, n_docs=args.docs, facts_per_doc=args.facts_per_doc, seed=args.seed
    )
    n_triples = sum(1 for _ in triples_path.open())
    print(f"wrote {args.docs} docs -> {corpus_path}")
    print(f"wrote {n_triples} triples -> {triples_path}")
    return 0


def cmd_linearize(args: argparse.Namespace) -> int:
    docs = data_mod.load_corpus_file(args.corpus)
    triples = data_mod.load_triples_file(args.triples)
    records = data_mod.linearize_training_data(docs, triples)
    if args.out:
        Path(args.out).write_text("\n".join(records) + "\n")
        print(f"wrote {len(records)} records -> {args.out}")
    else:
        for record in records:
            print(record)
    return 0


def cmd_base(args: argparse.Namespace) -> int:
    base_dir, losses = train_mod.build_toy_base(
        args.corpus,
        args.triples,
        args.out,
        d_model=args.d_model,
        epochs=args.epochs,
        seed=args.seed,
    )
    print(f"base model -> {base_dir}")
    print(f"loss {losses[0]:.4f} -> {losses[-1]:.4f} over {args.epochs} epochs")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    spec = train_mod.load_train_spec(args.spec)
    result = train_mod.train_cpt_lora(spec)
    print(f"adapter -> {result.adapter_dir}")
    print(f"loss curve -> {result.loss_path}")
    print(f"loss {result.initial_loss:.4f} -> {result.final_loss:.4f} ({spec.label})")
    return 0


def cmd_grid(args: argparse.Namespace) -> int:
    template = train_mod.load_train_spec(args.spec)
    specs = grid_mod.enumerate_grid(
        template,
        learning_rates=args.lrs,
        ranks=args.ranks,
        alphas=args.alphas,
        dropouts=args.dropouts,
    )
    print(f"sweeping {len(specs)} combinations")
    result = grid_mod.grid_search(specs, report_path=args.report, workers=args.workers)
    print(f"report -> {result.report_path}")
    print(f"best: {result.best.label} (final loss {result.best_loss:.4f})")
    print(f"best adapter dir: {result.best.output_dir}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    serve_mod.serve_adapter(
        args.adapter, args.port, host=args.host, base_dir=args.base, seed=args.seed
    )
    return 0


_COMMANDS = {
    "toy-data": cmd_toy_data,
    "linearize": cmd_linearize,
    "base": cmd_base,
    "train": cmd_train,
    "grid": cmd_grid,
    "serve": cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _COMMANDS[args.command](args)
    except (train_mod.ConfigError, data_mod.DataError, model_mod.AdapterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except train_mod.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
