"""Command-line interface.

Subcommands mirror the pipeline stages (corpus, filter, embed, rank, eval)
plus `pipeline run` / `pipeline status` for the whole flow. Exit codes:
0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, corpus, embed, evaluate, filter_linear, filter_lstm, pipeline, rank
from .errors import BdirankError, UsageError

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad arguments; the contract here is 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _cmd_corpus_stats(args) -> int:
    stats = corpus.CorpusStats()
    with open(args.file, "rb") as fh:
        for _ in corpus.parse_trec_corpus(fh, stats, recover=args.recover):
            pass
    print(f"sentences: {stats.sentence_count}")
    print(f"users: {stats.user_count}")
    print(f"dropped empty: {stats.dropped_empty}")
    if args.recover:
        print(f"skipped malformed blocks: {stats.skipped_blocks}")
    if stats.user_count:
        mean = stats.mean_sentences_per_user
        print(f"mean sentences per user: {float(mean):.2f}")
    return 0


def _load_examples(path: str):
    with open(path, "rb") as fh:
        return corpus.parse_labeled_csv(fh)


def _cmd_train_linear(args) -> int:
    examples, counts = _load_examples(args.labeled)
    print(f"loaded {counts.total} examples ({counts.positive} positive, {counts.negative} negative)")
    train, val = corpus.split_train_validation(examples, args.val_fraction, args.seed)
    config = filter_linear.TrainConfig(
        epochs=args.epochs, learning_rate=args.learning_rate,
        batch_size=args.batch_size, seed=args.seed,
    )
    model, acc = filter_linear.train_linear(train, config, val)
    with open(args.out, "wb") as fh:
        filter_linear.save_model(model, fh)
    print(f"final training loss: {model.training_meta.loss_curve[-1]:.6f}")
    print(f"validation accuracy: {acc:.4f}")
    print(f"model written to {args.out}")
    return 0


def _cmd_train_lstm(args) -> int:
    examples, counts = _load_examples(args.labeled)
    print(f"loaded {counts.total} examples ({counts.positive} positive, {counts.negative} negative)")
    train, val = corpus.split_train_validation(examples, args.val_fraction, args.seed)
    config = filter_lstm.LstmConfig(
        epochs=args.epochs, learning_rate=args.learning_rate, batch_size=args.batch_size,
        max_len=args.max_len, seed=args.seed,
    )
    model, history = filter_lstm.lstm_train(train, val, config)
    with open(args.out, "wb") as fh:
        filter_lstm.save_model(model, fh)
    best = max(h.validation_accuracy for h in history)
    print(f"best validation accuracy: {best:.4f} "
          f"(epoch {max(history, key=lambda h: h.validation_accuracy).epoch})")
    print(f"model written to {args.out}")
    return 0


def _cmd_filter_run(args) -> int:
    if args.scores and args.stage != 1:
        raise UsageError("--scores is the stage-1 external score table; use --stage 1")
    if args.scores and args.model:
        raise UsageError("give either --model or --scores, not both")
    if not args.scores and not args.model:
        raise UsageError("--model is required (or --scores for stage 1)")

    report = filter_linear.FilterReport()

    def records():
        with open(args.corpus, "rb") as fh:
            yield from corpus.parse_trec_corpus(fh)

    if args.scores:
        with open(args.scores, "r", encoding="utf-8") as fh:
            table = filter_linear.load_score_file(fh)
        survivors = filter_linear.filter_by_scores(
            table, records(), args.threshold, report=report
        )
    elif args.stage == 1:
        with open(args.model, "rb") as fh:
            model = filter_linear.load_model(fh)
        survivors = filter_linear.filter_pass1(
            model, records(), args.threshold, workers=args.workers, report=report
        )
    else:
        with open(args.model, "rb") as fh:
            model = filter_lstm.load_model(fh)
        survivors = filter_lstm.filter_pass2(
            model, records(), args.threshold, workers=args.workers, report=report
        )

    with open(args.out, "wb") as fh:
        corpus.write_trec_corpus(survivors, fh)
    print(f"kept {report.output_count} of {report.input_count} sentences -> {args.out}")
    return 0


def _cmd_embed_hash(args) -> int:
    def pairs():
        with open(args.corpus, "rb") as fh:
            for rec in corpus.parse_trec_corpus(fh):
                yield rec.sentence_id, embed.hash_embed(rec.text, args.dim, args.seed)

    with open(args.out, "wb") as fh:
        count = embed.write_embedding_file(fh, args.dim, pairs())
    print(f"wrote {count} embeddings (dim {args.dim}) to {args.out}")
    return 0


def _cmd_embed_check(args) -> int:
    with open(args.file, "rb") as fh:
        collection = embed.load_embedding_file(fh, provider=str(args.file))
    print(f"ok: {len(collection)} vectors, dimension {collection.dimension}")
    if collection.renormalized:
        print(f"re-normalized on load: {collection.renormalized}")
    return 0


def _cmd_rank(args) -> int:
    with open(args.embeddings, "rb") as fh:
        collection = embed.load_embedding_file(fh, provider=str(args.embeddings))
    queries = rank.load_queries(args.queries, collection.dimension, args.seed)
    pools = rank.rank_corpus(
        iter(collection.vectors.items()),
        queries,
        args.cutoff,
        workers=args.workers,
        multi_assign=args.multi_assign,
    )
    with open(args.out, "wb") as fh:
        lines = rank.write_run_file(pools, fh, args.tag)
    print(f"wrote {lines} run lines to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    with open(args.run, "r", encoding="utf-8") as fh:
        rankings = evaluate.parse_run_file(fh)
    assessors = []
    for path in args.qrels:
        with open(path, "r", encoding="utf-8") as fh:
            assessors.append(evaluate.parse_qrels(fh))
    qrels = evaluate.aggregate(assessors, args.rule)
    report = evaluate.evaluate_run(rankings, qrels, include_empty=args.include_empty)
    sys.stdout.write(evaluate.format_report(report))
    if args.out:
        prefix = Path(args.out)
        with open(prefix.with_suffix(".tsv"), "w", encoding="utf-8") as fh:
            fh.write(evaluate.format_report(report))
        with open(prefix.with_suffix(".json"), "w", encoding="utf-8") as fh:
            json.dump(evaluate.report_as_dict(report), fh, indent=2)
            fh.write("\n")
    return 0


def _cmd_pipeline_run(args) -> int:
    config = pipeline.validate_config(args.config)
    ledger = pipeline.run_pipeline(config, force=args.force)
    for row in ledger.rows:
        if row.cached:
            print(f"stage {row.stage}: skipped (cached)")
        else:
            print(f"stage {row.stage}: {row.input_count} -> {row.output_count}"
                  f" ({row.wall_time:.2f}s)")
    print(f"outputs in {config.output_dir}")
    return 0


def _cmd_pipeline_status(args) -> int:
    config = pipeline.validate_config(args.config)
    for stage, state in pipeline.PipelineRun(config).status():
        print(f"{stage}: {state}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="bdirank", description="Symptom-sentence retrieval pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corpus", help="corpus inspection")
    corpus_sub = p.add_subparsers(dest="subcommand", required=True)
    p = corpus_sub.add_parser("stats", help="count sentences and users")
    p.add_argument("file")
    p.add_argument("--recover", action="store_true",
                   help="skip malformed blocks instead of failing")
    p.set_defaults(func=_cmd_corpus_stats)

    p = sub.add_parser("filter", help="train and run the two filter stages")
    filter_sub = p.add_subparsers(dest="subcommand", required=True)

    p = filter_sub.add_parser("train-linear", help="train the stage-1 classifier")
    p.add_argument("--labeled", required=True, help="labeled CSV (text,label)")
    p.add_argument("--out", required=True, help="model output path (.bdlf)")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--learning-rate", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=_cmd_train_linear)

    p = filter_sub.add_parser("train-lstm", help="train the stage-2 classifier")
    p.add_argument("--labeled", required=True)
    p.add_argument("--out", required=True, help="model output path (.bdls)")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--learning-rate", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=_cmd_train_lstm)

    p = filter_sub.add_parser("run", help="filter a corpus with a trained model")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--model", help=".bdlf for stage 1, .bdls for stage 2")
    p.add_argument("--scores", help="stage-1 alternative: sentence_id<TAB>score table")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="surviving sentences (same format)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_filter_run)

    p = sub.add_parser("embed", help="produce or inspect embedding files")
    embed_sub = p.add_subparsers(dest="subcommand", required=True)

    p = embed_sub.add_parser("hash", help="hash-embed a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=embed.DEFAULT_DIM)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=_cmd_embed_hash)

    p = embed_sub.add_parser("check", help="validate an embedding file")
    p.add_argument("file")
    p.set_defaults(func=_cmd_embed_check)

    p = sub.add_parser("rank", help="rank sentences against the symptom queries")
    p.add_argument("--queries", required=True,
                   help="tab-separated query texts, or a query embedding file")
    p.add_argument("--embeddings", required=True, help="sentence embedding file")
    p.add_argument("--out", required=True, help="run file output")
    p.add_argument("--cutoff", type=int, default=1000)
    p.add_argument("--tag", default="bdirank")
    p.add_argument("--seed", type=int, default=42,
                   help="hash seed when --queries is a text file")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--multi-assign", action="store_true",
                   help="rank every sentence in every symptom pool")
    p.set_defaults(func=_cmd_rank)

    p = sub.add_parser("eval", help="score a run file against assessor qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", nargs="+", required=True, help="one file per assessor")
    p.add_argument("--rule", choices=evaluate.RULES, default="majority")
    p.add_argument("--include-empty", action="store_true",
                   help="keep zero-relevant symptoms in the macro average")
    p.add_argument("--out", help="report path prefix (.tsv and .json)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("pipeline", help="run or inspect the full pipeline")
    pipe_sub = p.add_subparsers(dest="subcommand", required=True)
    p = pipe_sub.add_parser("run", help="execute all stages from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--force", action="store_true", help="rebuild stale checkpoints")
    p.set_defaults(func=_cmd_pipeline_run)
    p = pipe_sub.add_parser("status", help="report checkpoint freshness per stage")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_pipeline_status)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except BdirankError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130
    except Exception:
        logger.exception("internal error")
        return 3


if __name__ == "__main__":
    sys.exit(main())
