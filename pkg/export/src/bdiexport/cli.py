"""Command line front end: a single export command."""

from __future__ import annotations

import argparse
import sys
import traceback
from pathlib import Path

from .errors import ExportError, UsageError
from .export import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_MAX_LENGTH,
    ExportJob,
    export_embeddings,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="bdiexport",
        description="Embed id<TAB>text lines with a pretrained transformer "
        "and write a BDEM file.",
    )
    parser.add_argument("--version", action="version", version="bdiexport 0.1.0")
    parser.add_argument(
        "--model", required=True, help="model name or local checkpoint directory"
    )
    parser.add_argument(
        "--input", required=True, type=Path, help="UTF-8 file of id<TAB>text lines"
    )
    parser.add_argument(
        "--output", required=True, type=Path, help="embedding file to write"
    )
    parser.add_argument(
        "--max-len",
        type=int,
        default=DEFAULT_MAX_LENGTH,
        help="token length sentences are padded or truncated to (default %(default)s)",
    )
    parser.add_argument(
        "--batch",
        type=int,
        default=DEFAULT_BATCH_SIZE,
        help="sentences per inference batch (default %(default)s)",
    )
    parser.add_argument(
        "--device", default="cpu", help="torch device to run on (default %(default)s)"
    )
    return parser


def _quiet_transformers() -> None:
    """Progress bars and info logging would drown the one-line summary."""
    from transformers.utils import logging as hf_logging

    hf_logging.set_verbosity_error()
    hf_logging.disable_progress_bar()


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.batch < 1:
            raise UsageError("--batch must be positive")
        if args.max_len < 1:
            raise UsageError("--max-len must be positive")
        _quiet_transformers()
        job = ExportJob(
            model=args.model,
            input_path=args.input,
            output_path=args.output,
            batch_size=args.batch,
            max_length=args.max_len,
            device=args.device,
        )
        summary = export_embeddings(job)
        print(
            f"wrote {summary.count} embeddings (dim {summary.dimension}) "
            f"to {args.output} in {summary.elapsed:.2f}s"
        )
        return 0
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    except Exception:
        traceback.print_exc()
        return 3


if __name__ == "__main__":
    sys.exit(main())
