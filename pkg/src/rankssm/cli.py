"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage or configuration error, 2 data error (missing
or malformed input), 3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench, kernels, trec
from .checkpoint import load_checkpoint
from .errors import ConfigError, DataError, InputFormatError, NumericError
from .metrics import evaluate, parse_metric
from .models import BackboneConfig, Reranker
from .reranker import TrainConfig, build_training_samples, model_scorer, read_samples, train, write_samples
from .retrieval import DEFAULT_B, DEFAULT_DEPTH, DEFAULT_K1, InvertedIndex, rerank, retrieve_all
from .ssm import SCAN_MODES
from .toy import make_toy_corpus

log = logging.getLogger("rankssm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _int_list(text):
    try:
        return [int(t) for t in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _existing(path):
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such file or directory: {p}")
    return p


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_index(args):
    collection = trec.read_collection(_existing(args.collection))
    index = InvertedIndex.build(collection)
    index.save(args.out)
    log.info("indexed %d documents into %s", index.doc_count, args.out)


def cmd_retrieve(args):
    index = InvertedIndex.load(_existing(args.index))
    queries = trec.read_queries(_existing(args.queries))
    run = retrieve_all(queries, index, k=args.k, k1=args.k1, b=args.b)
    trec.write_run(args.out, run, tag="bm25")


def cmd_build_train(args):
    run = trec.read_run(_existing(args.run))
    qrels = trec.read_qrels(_existing(args.qrels))
    collection = trec.read_collection(_existing(args.collection))
    queries = trec.read_queries(_existing(args.queries))
    missing = sorted(set(qrels) - set(queries))
    if missing:
        raise DataError(f"qrels mention {len(missing)} queries absent from {args.queries}, e.g. {missing[0]!r}")
    samples = build_training_samples(qrels, run, collection, queries, k=args.negatives, seed=args.seed,
                                     depth=args.depth)
    write_samples(args.out, samples)
    log.info("wrote %d training samples to %s", len(samples), args.out)


def cmd_train(args):
    samples = read_samples(_existing(args.samples))
    config = BackboneConfig.load(_existing(args.model_config)) if args.model_config else BackboneConfig()
    lora = (args.lora_rank, args.lora_alpha or float(args.lora_rank)) if args.lora_rank else None
    tc = TrainConfig(lr=args.lr, warmup_steps=args.warmup, epochs=args.epochs,
                     queries_per_batch=args.queries_per_batch, seed=args.seed, lora=lora,
                     weight_decay=args.weight_decay, scan_mode=args.scan_mode)
    result = train(samples, Reranker(config), tc, args.out)
    log.info("trained %d steps; final loss %.6f", result.total_steps, result.loss_log[-1][2])


def _load_model(checkpoint, model_config):
    cfg_path = Path(model_config) if model_config else Path(checkpoint).parent / "model.cfg"
    config = BackboneConfig.load(_existing(cfg_path))
    model = Reranker(config)
    model.load_state_dict(load_checkpoint(_existing(checkpoint)))
    return model


def cmd_rerank(args):
    run = trec.read_run(_existing(args.run))
    collection = trec.read_collection(_existing(args.collection))
    queries = trec.read_queries(_existing(args.queries))
    model = _load_model(args.checkpoint, args.model_config)
    if args.depth:
        run = {q: ranked[: args.depth] for q, ranked in run.items()}
    trec.write_run(args.out, rerank(run, model_scorer(model, args.scan_mode), queries, collection), tag="rankssm")


def cmd_eval(args):
    run = trec.read_run(_existing(args.run))
    qrels = trec.read_qrels(_existing(args.qrels))
    rows = evaluate(run, qrels, args.metrics, gain=args.gain)
    for name, k, value, n in rows:
        print(f"{name}@{k}\t{value:.6f}\t{n}")
    if args.out:
        trec.write_metrics_csv(args.out, rows)


def cmd_bench(args):
    config = bench.BenchConfig(d_model=args.d_model, n_state=args.n_state, batch=args.batch, seed=args.seed)
    records = bench.run_benchmark(args.kernels, sorted(args.lengths), config, args.repeats, args.warmup)
    bench.write_csv(args.out, records)
    if args.gnuplot:
        bench.write_gnuplot(args.gnuplot, records)
    for name, n, slope in bench.scaling_report(records):
        print(f"{name}\tpoints={n}\tslope={slope:.3f}")


def cmd_toy(args):
    make_toy_corpus(seed=args.corpus_seed).write(args.out)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress):
        # the subcommand copies use SUPPRESS so they only override values given after the subcommand
        g = _Parser(add_help=False)
        g.add_argument("--seed", type=int, default=argparse.SUPPRESS if suppress else 0,
                       help="random seed (default 0)")
        g.add_argument("--threads", type=int, default=argparse.SUPPRESS if suppress else 1,
                       help="kernel threads; 1 is bit-reproducible")
        g.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS if suppress else False,
                       help="log progress to stderr")
        return g

    common = global_flags(suppress=True)
    p = _Parser(prog="rankssm", description="Selective state space rerankers: retrieval, training, evaluation.",
                parents=[global_flags(suppress=False)])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("index", parents=[common], help="build a BM25 inverted index")
    s.add_argument("--collection", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("retrieve", parents=[common], help="BM25 first-stage retrieval")
    s.add_argument("--index", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--k", type=int, default=DEFAULT_DEPTH)
    s.add_argument("--k1", type=float, default=DEFAULT_K1)
    s.add_argument("--b", type=float, default=DEFAULT_B)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("build-train", parents=[common], help="sample hard negatives into a JSONL file")
    s.add_argument("--run", required=True)
    s.add_argument("--qrels", required=True)
    s.add_argument("--collection", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--negatives", type=int, default=7)
    s.add_argument("--depth", type=int, default=DEFAULT_DEPTH)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_train)

    s = sub.add_parser("train", parents=[common], help="train a reranker with InfoNCE")
    s.add_argument("--samples", required=True)
    s.add_argument("--model-config")
    s.add_argument("--lr", type=float, default=2e-5)
    s.add_argument("--warmup", type=int, default=1000)
    s.add_argument("--epochs", type=int, default=1)
    s.add_argument("--queries-per-batch", type=int, default=8)
    s.add_argument("--weight-decay", type=float, default=0.01)
    s.add_argument("--lora-rank", type=int, default=0)
    s.add_argument("--lora-alpha", type=float, default=0.0)
    s.add_argument("--scan-mode", choices=SCAN_MODES, default="sequential")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("rerank", parents=[common], help="re-score a run with a trained model")
    s.add_argument("--run", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--model-config", help="defaults to model.cfg next to the checkpoint")
    s.add_argument("--collection", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--depth", type=int, default=DEFAULT_DEPTH)
    s.add_argument("--scan-mode", choices=SCAN_MODES, default="sequential")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rerank)

    s = sub.add_parser("eval", parents=[common], help="compute MRR@k / NDCG@k")
    s.add_argument("--run", required=True)
    s.add_argument("--qrels", required=True)
    s.add_argument("--metrics", type=_csv_list, default=["mrr@100", "ndcg@10"])
    s.add_argument("--gain", choices=("linear", "exponential"), default="linear")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", parents=[common], help="time kernels across sequence lengths")
    s.add_argument("--kernels", type=_csv_list, default=["selective_scan", "lti_conv", "attention"])
    s.add_argument("--lengths", type=_int_list, default=[256, 512, 1024, 2048, 4096])
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--warmup", type=int, default=1)
    s.add_argument("--d-model", type=int, default=64)
    s.add_argument("--n-state", type=int, default=16)
    s.add_argument("--batch", type=int, default=4)
    s.add_argument("--gnuplot", help="also write a gnuplot data file")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("toy", parents=[common], help="write the synthetic toy corpus")
    s.add_argument("--corpus-seed", type=int, default=13)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_toy)
    return p


def resolved_config(args) -> str:
    items = {k: v for k, v in vars(args).items() if k != "func"}
    return " ".join(f"{k}={','.join(map(str, v)) if isinstance(v, list) else v}" for k, v in items.items())


def _validate(args):
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    if args.command == "eval":
        for m in args.metrics:
            try:
                parse_metric(m)
            except ValueError as exc:
                raise UsageError(str(exc)) from None
    if args.command == "bench":
        unknown = [k for k in args.kernels if k not in bench.KERNELS]
        if unknown:
            raise UsageError(f"unknown kernel(s) {unknown}; choose from {sorted(bench.KERNELS)}")
        if not args.lengths:
            raise UsageError("--lengths must name at least one length")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _validate(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    kernels.set_threads(args.threads)
    print(f"config: {resolved_config(args)}", flush=True)
    try:
        args.func(args)
    except NumericError as exc:
        print(f"rankssm {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError) as exc:
        print(f"rankssm {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, InputFormatError, OSError, json.JSONDecodeError, KeyError, UnicodeDecodeError) as exc:
        print(f"rankssm {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"rankssm {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
