"""Batch transformer inference that dumps sentence embeddings.

Runs a pretrained encoder over ``id<TAB>text`` lines and writes one
unit-length vector per line in the interchange format the retrieval
pipeline reads. Pooling is a mean over the final hidden layer with
padding positions masked out, then L2 normalization. Inference runs in
eval mode under `torch.inference_mode`, so a given model, input file,
and max length always produce the same bytes.
"""

from __future__ import annotations

import os
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import bdem
from .errors import ExportError

DEFAULT_BATCH_SIZE = 32
DEFAULT_MAX_LENGTH = 64


@dataclass
class ExportJob:
    model: str
    input_path: Path
    output_path: Path
    batch_size: int = DEFAULT_BATCH_SIZE
    max_length: int = DEFAULT_MAX_LENGTH
    device: str = "cpu"


@dataclass
class ExportSummary:
    count: int
    dimension: int
    elapsed: float


def read_sentences(path: Path | str) -> list[tuple[str, str]]:
    """Parse ``id<TAB>text`` lines; ids must be unique and non-empty.

    Text keeps any further tabs. Blank lines are skipped so a trailing
    newline does not count as a sentence.
    """
    sentences: list[tuple[str, str]] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as stream:
        for number, raw in enumerate(stream, start=1):
            line = raw.rstrip("\r\n")
            if not line:
                continue
            if "\t" not in line:
                raise ExportError(f"line {number}: expected id<TAB>text")
            sentence_id, text = line.split("\t", 1)
            if not sentence_id:
                raise ExportError(f"line {number}: empty id")
            if sentence_id in seen:
                raise ExportError(f"line {number}: duplicate id {sentence_id!r}")
            seen.add(sentence_id)
            sentences.append((sentence_id, text))
    if not sentences:
        raise ExportError(f"input has no sentences: {path}")
    return sentences


def _load_model(name: str, device: str):
    from transformers import AutoModel, AutoTokenizer

    try:
        torch_device = torch.device(device)
        tokenizer = AutoTokenizer.from_pretrained(name)
        model = AutoModel.from_pretrained(name)
        model.to(torch_device)
        model.eval()
    except ExportError:
        raise
    except Exception as exc:
        raise ExportError(f"cannot load model {name!r}: {exc}") from exc
    return tokenizer, model, torch_device


def _pool_batch(tokenizer, model, device, texts: list[str], max_length: int) -> np.ndarray:
    # Padding to a fixed length keeps batch shapes identical, so a text's
    # vector does not depend on what else shares its batch.
    encoded = tokenizer(
        texts,
        padding="max_length",
        truncation=True,
        max_length=max_length,
        return_tensors="pt",
    ).to(device)
    with torch.inference_mode():
        hidden = model(**encoded).last_hidden_state
    mask = encoded["attention_mask"].unsqueeze(-1).to(hidden.dtype)
    pooled = (hidden * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1.0)
    return pooled.cpu().numpy()


def export_embeddings(job: ExportJob) -> ExportSummary:
    """Embed every input sentence and write the output file atomically."""
    started = time.perf_counter()
    if job.batch_size < 1:
        raise ExportError("batch size must be positive")
    if job.max_length < 1:
        raise ExportError("max length must be positive")
    sentences = read_sentences(job.input_path)
    tokenizer, model, device = _load_model(job.model, job.device)

    output_path = Path(job.output_path)
    dimension = int(model.config.hidden_size)
    descriptor, temp_name = tempfile.mkstemp(
        dir=output_path.parent or Path("."), prefix=output_path.name + ".", suffix=".tmp"
    )
    try:
        with os.fdopen(descriptor, "wb") as stream:
            with bdem.EmbeddingWriter(stream, dimension, len(sentences)) as writer:
                for start in range(0, len(sentences), job.batch_size):
                    batch = sentences[start : start + job.batch_size]
                    pooled = _pool_batch(
                        tokenizer, model, device, [text for _, text in batch], job.max_length
                    )
                    # Normalize in float64 so the stored float32 rows stay
                    # within the consumer's unit-norm tolerance.
                    rows = pooled.astype(np.float64)
                    norms = np.linalg.norm(rows, axis=1)
                    for (sentence_id, _), row, norm in zip(batch, rows, norms):
                        if norm <= 0.0:
                            raise ExportError(
                                f"zero embedding for id {sentence_id!r}; cannot normalize"
                            )
                        writer.write(sentence_id, (row / norm).astype(np.float32))
        os.replace(temp_name, output_path)
    except BaseException:
        try:
            os.unlink(temp_name)
        except OSError:
            pass
        raise
    elapsed = time.perf_counter() - started
    return ExportSummary(count=len(sentences), dimension=dimension, elapsed=elapsed)
