"""Stage-1 filter: hashed n-gram logistic regression over sentence text.

Features are word unigrams plus adjacent bigrams (bigram key = the two tokens
joined by a single space), each hashed with 64-bit FNV-1a into 2^18 buckets.
Training is plain mini-batch gradient descent, deterministic under a fixed
seed. The model persists as a small binary file (BDLF) and there is an escape
hatch for filtering by externally computed per-sentence scores.
"""

from __future__ import annotations

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Iterator, TextIO

import numpy as np

from .corpus import LabeledExample, SentenceRecord
from .errors import DataError, TrainingError
from .text import fnv1a64, tokenize

logger = logging.getLogger(__name__)

N_BUCKETS = 1 << 18
LOSS_TOLERANCE = 1e-6  # per-epoch allowance before a monotonicity violation is logged

_MAGIC = b"BDLF"
_VERSION = 1


@dataclass(frozen=True)
class HashedFeatureVector:
    """Sparse term-frequency vector; indices strictly increasing, values positive."""

    indices: tuple[int, ...]
    values: tuple[int, ...]


@dataclass
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 0.1
    batch_size: int = 32
    seed: int = 42


@dataclass
class TrainingMeta:
    epochs: int
    learning_rate: float
    seed: int
    loss_curve: list[float] = field(default_factory=list)


@dataclass
class LinearModel:
    weights: np.ndarray  # float64, length N_BUCKETS
    bias: float
    training_meta: TrainingMeta | None = None


def _bucket(key: bytes) -> int:
    return fnv1a64(key) % N_BUCKETS


def featurize(text: str) -> HashedFeatureVector:
    """Hash unigrams and adjacent bigrams of the lowercased token stream."""
    tokens = tokenize(text)
    counts: dict[int, int] = {}
    for tok in tokens:
        b = _bucket(tok.encode("utf-8"))
        counts[b] = counts.get(b, 0) + 1
    for left, right in zip(tokens, tokens[1:]):
        b = _bucket(f"{left} {right}".encode("utf-8"))
        counts[b] = counts.get(b, 0) + 1
    indices = tuple(sorted(counts))
    return HashedFeatureVector(indices, tuple(counts[i] for i in indices))


def _featurize_batch(texts: list[str]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """CSR-style arrays (indices, values, row offsets) for a list of texts."""
    idx_parts: list[np.ndarray] = []
    val_parts: list[np.ndarray] = []
    offsets = np.zeros(len(texts) + 1, dtype=np.int64)
    for i, text in enumerate(texts):
        fv = featurize(text)
        idx_parts.append(np.asarray(fv.indices, dtype=np.int64))
        val_parts.append(np.asarray(fv.values, dtype=np.float64))
        offsets[i + 1] = offsets[i] + len(fv.indices)
    indices = np.concatenate(idx_parts) if idx_parts else np.zeros(0, dtype=np.int64)
    values = np.concatenate(val_parts) if val_parts else np.zeros(0, dtype=np.float64)
    return indices, values, offsets


def _margins(
    weights: np.ndarray,
    bias: float,
    indices: np.ndarray,
    values: np.ndarray,
    offsets: np.ndarray,
) -> np.ndarray:
    dots = values * weights[indices]
    # Row sums of the CSR products via cumulative sums at row boundaries.
    csum = np.concatenate(([0.0], np.cumsum(dots)))
    return csum[offsets[1:]] - csum[offsets[:-1]] + bias


def _mean_bce(margins: np.ndarray, labels: np.ndarray) -> float:
    # log(1 + e^z) - y*z, stable for large |z|
    return float(np.mean(np.logaddexp(0.0, margins) - labels * margins))


def train_linear(
    train: list[LabeledExample],
    config: TrainConfig | None = None,
    validation: list[LabeledExample] | None = None,
) -> tuple[LinearModel, float | None]:
    """Fit the logistic model; returns (model, validation accuracy or None).

    The loss curve records the mean training BCE before training and after
    each epoch. It should be non-increasing; a rise beyond LOSS_TOLERANCE
    is logged, not fatal. NaN loss aborts naming the epoch.
    """
    if config is None:
        config = TrainConfig()
    if not train:
        raise TrainingError("training set is empty")
    labels_seen = {ex.label for ex in train}
    if labels_seen != {0, 1}:
        raise TrainingError(f"training set has a single class: {sorted(labels_seen)}")

    indices, values, offsets = _featurize_batch([ex.text for ex in train])
    labels = np.asarray([ex.label for ex in train], dtype=np.float64)
    n = len(train)

    weights = np.zeros(N_BUCKETS, dtype=np.float64)
    bias = 0.0
    meta = TrainingMeta(config.epochs, config.learning_rate, config.seed)

    def full_loss() -> float:
        return _mean_bce(_margins(weights, bias, indices, values, offsets), labels)

    meta.loss_curve.append(full_loss())
    rng = np.random.default_rng(config.seed)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            rows = order[start : start + config.batch_size]
            # Gather the batch rows out of the CSR arrays.
            spans = [np.arange(offsets[r], offsets[r + 1]) for r in rows]
            flat = np.concatenate(spans) if spans else np.zeros(0, dtype=np.int64)
            b_idx = indices[flat]
            b_val = values[flat]
            b_off = np.zeros(len(rows) + 1, dtype=np.int64)
            b_off[1:] = np.cumsum([offsets[r + 1] - offsets[r] for r in rows])
            z = _margins(weights, bias, b_idx, b_val, b_off)
            p = 1.0 / (1.0 + np.exp(-z))
            g = (p - labels[rows]) / len(rows)
            # d(loss)/dw_j = mean over batch of (p - y) * x_j
            per_entry = np.repeat(g, np.diff(b_off)) * b_val
            np.subtract.at(weights, b_idx, config.learning_rate * per_entry)
            bias -= config.learning_rate * float(np.sum(g))
        loss = full_loss()
        if math.isnan(loss):
            raise TrainingError(f"loss diverged to NaN at epoch {epoch}")
        if loss > meta.loss_curve[-1] + LOSS_TOLERANCE:
            logger.warning(
                "training loss rose at epoch %d: %.9f -> %.9f", epoch, meta.loss_curve[-1], loss
            )
        meta.loss_curve.append(loss)

    model = LinearModel(weights, bias, meta)
    val_acc = None
    if validation is not None:
        if not validation:
            raise TrainingError("validation set is empty")
        correct = sum(
            1 for ex in validation if (score(model, ex.text) >= 0.5) == bool(ex.label)
        )
        val_acc = correct / len(validation)
    return model, val_acc


def score(model: LinearModel, text: str) -> float:
    fv = featurize(text)
    z = model.bias
    for i, v in zip(fv.indices, fv.values):
        z += model.weights[i] * v
    return 1.0 / (1.0 + math.exp(-z))


@dataclass
class FilterReport:
    input_count: int = 0
    output_count: int = 0


_BLOCK = 256  # scoring unit; fixed so batch shapes never depend on worker count
_WINDOW = 16  # blocks buffered before fanning out to the pool


def _filter_stream(
    score_block,
    sentences: Iterable[SentenceRecord],
    threshold: float,
    report: FilterReport,
    workers: int,
) -> Iterator[SentenceRecord]:
    """Shared order-preserving filter loop: keep sentences scoring >= threshold.

    score_block maps a list of <= _BLOCK texts to a float array. The input is
    always cut into the same fixed-size blocks, and workers only parallelize
    across blocks, so scores (and therefore survivors) are identical for any
    worker count.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must be in [0, 1]")
    if workers < 1:
        raise ValueError("workers must be >= 1")

    def process(window: list[list[SentenceRecord]], pool) -> Iterator[SentenceRecord]:
        texts = [[rec.text for rec in block] for block in window]
        if pool is None:
            scored = map(score_block, texts)
        else:
            scored = pool.map(score_block, texts)
        for block, scores in zip(window, scored):
            for rec, s in zip(block, scores):
                report.input_count += 1
                if s >= threshold:
                    report.output_count += 1
                    yield rec

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        window: list[list[SentenceRecord]] = []
        block: list[SentenceRecord] = []
        for rec in sentences:
            block.append(rec)
            if len(block) == _BLOCK:
                window.append(block)
                block = []
                if len(window) == _WINDOW:
                    yield from process(window, pool)
                    window = []
        if block:
            window.append(block)
        if window:
            yield from process(window, pool)
    finally:
        if pool is not None:
            pool.shutdown(wait=False)


def filter_pass1(
    model: LinearModel,
    sentences: Iterable[SentenceRecord],
    threshold: float = 0.5,
    *,
    workers: int = 1,
    report: FilterReport | None = None,
) -> Iterator[SentenceRecord]:
    """Keep sentences scoring >= threshold, in input order. Pass a FilterReport
    to collect (input_count, output_count); it is complete once the returned
    iterator is exhausted."""
    if report is None:
        report = FilterReport()

    def score_block(texts: list[str]) -> np.ndarray:
        indices, values, offsets = _featurize_batch(texts)
        z = _margins(model.weights, model.bias, indices, values, offsets)
        return 1.0 / (1.0 + np.exp(-z))

    return _filter_stream(score_block, sentences, threshold, report, workers)


def save_model(model: LinearModel, stream: BinaryIO) -> None:
    stream.write(_MAGIC)
    stream.write(struct.pack("<HI", _VERSION, N_BUCKETS))
    stream.write(model.weights.astype("<f4").tobytes())
    stream.write(struct.pack("<f", model.bias))


def load_model(stream: BinaryIO) -> LinearModel:
    magic = stream.read(4)
    if magic != _MAGIC:
        raise DataError(f"bad magic {magic!r}; expected {_MAGIC!r}")
    header = stream.read(6)
    if len(header) != 6:
        raise DataError("truncated header")
    version, buckets = struct.unpack("<HI", header)
    if version != _VERSION:
        raise DataError(f"unsupported version {version}")
    if buckets != N_BUCKETS:
        raise DataError(f"bucket count {buckets} does not match featurizer ({N_BUCKETS})")
    raw = stream.read(4 * buckets)
    if len(raw) != 4 * buckets:
        raise DataError("truncated weights")
    weights = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    tail = stream.read(4)
    if len(tail) != 4:
        raise DataError("truncated bias")
    (bias,) = struct.unpack("<f", tail)
    return LinearModel(weights, float(bias))


def load_score_file(stream: TextIO) -> dict[str, float]:
    """Parse externally computed scores: one `sentence_id<TAB>score` per line."""
    scores: dict[str, float] = {}
    for line_num, line in enumerate(stream, start=1):
        line = line.rstrip("\n").rstrip("\r")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"line {line_num}: expected sentence_id<TAB>score")
        sid, raw = parts
        try:
            value = float(raw)
        except ValueError:
            raise DataError(f"line {line_num}: score {raw!r} is not a number") from None
        if sid in scores:
            raise DataError(f"line {line_num}: duplicate sentence_id {sid!r}")
        scores[sid] = value
    return scores


def filter_by_scores(
    scores: dict[str, float],
    sentences: Iterable[SentenceRecord],
    threshold: float = 0.5,
    *,
    report: FilterReport | None = None,
) -> Iterator[SentenceRecord]:
    """filter_pass1 replacement driven by an external score table; every
    sentence must have a score."""
    if report is None:
        report = FilterReport()

    def gen() -> Iterator[SentenceRecord]:
        for rec in sentences:
            try:
                s = scores[rec.sentence_id]
            except KeyError:
                raise DataError(f"no external score for sentence {rec.sentence_id!r}") from None
            report.input_count += 1
            if s >= threshold:
                report.output_count += 1
                yield rec

    return gen()
