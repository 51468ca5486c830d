"""Unit-normalized sentence embeddings behind pluggable providers.

Two providers share one contract (every vector unit-norm within 1e-5):
a loader for precomputed embedding files (BDEM, produced offline by a
transformer export step) and a deterministic hash-based embedder that needs
no model at all, used for tests and self-contained runs.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import BinaryIO, Iterable

import numpy as np

from .errors import DataError
from .text import fnv1a64, splitmix64_stream, tokenize, u64_to_unit_interval

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-5
DEFAULT_DIM = 384

_MAGIC = b"BDEM"
_VERSION = 1


@dataclass(frozen=True)
class EmbeddingVector:
    id: str
    values: np.ndarray


@dataclass
class EmbeddingCollection:
    dimension: int
    vectors: dict[str, np.ndarray]
    provider: str
    renormalized: int = 0  # loader: how many stored vectors needed fixing

    def __len__(self) -> int:
        return len(self.vectors)


def mean_pool(vectors: Iterable[np.ndarray]) -> np.ndarray:
    vectors = list(vectors)
    if not vectors:
        raise ValueError("mean_pool of an empty sequence")
    first = np.asarray(vectors[0], dtype=np.float64)
    total = first.copy()
    for v in vectors[1:]:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != first.shape:
            raise ValueError(f"dimension mismatch: {v.shape} vs {first.shape}")
        total += v
    return total / len(vectors)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0 or not np.isfinite(norm):
        raise ValueError("cannot normalize a zero or non-finite vector")
    return v / norm


@lru_cache(maxsize=1 << 16)
def _token_vector(token: str, dimension: int, seed: int) -> np.ndarray:
    # Fixed-width integer arithmetic only, so the vector is identical across
    # platforms and thread counts. Callers must not mutate the cached array.
    state = fnv1a64(token.encode("utf-8")) ^ (seed & 0xFFFFFFFFFFFFFFFF)
    draws = splitmix64_stream(state, dimension)
    return np.asarray([2.0 * u64_to_unit_interval(z) - 1.0 for z in draws])


def hash_embed(text: str, dimension: int = DEFAULT_DIM, seed: int = 0) -> np.ndarray:
    """Deterministic embedding: per token, seed a splitmix64 stream with
    FNV-1a(token) XOR seed, draw `dimension` uniforms in [-1, 1]; mean-pool
    and L2-normalize. Pure function of (text, dimension, seed)."""
    if dimension < 2:
        raise ValueError("dimension must be >= 2")
    tokens = tokenize(text)
    if not tokens:
        raise DataError(f"cannot embed text with zero tokens: {text!r}")
    pooled = mean_pool([_token_vector(tok, dimension, seed) for tok in tokens])
    return l2_normalize(pooled)


def hash_embed_many(
    items: Iterable[tuple[str, str]], dimension: int = DEFAULT_DIM, seed: int = 0
) -> EmbeddingCollection:
    """Embed (id, text) pairs with hash_embed; duplicate ids are an error."""
    vectors: dict[str, np.ndarray] = {}
    for item_id, text in items:
        if item_id in vectors:
            raise DataError(f"duplicate id {item_id!r}")
        vectors[item_id] = hash_embed(text, dimension, seed)
    return EmbeddingCollection(dimension, vectors, provider=f"hash(seed={seed})")


def write_embedding_file(
    stream: BinaryIO, dimension: int, records: Iterable[tuple[str, np.ndarray]]
) -> int:
    """Write the binary embedding format; returns the record count.

    Layout (little-endian): magic `BDEM`, version u16, dimension u32,
    count u64, then per record a u16 id length, the UTF-8 id bytes, and
    `dimension` f32 values.
    """
    if dimension < 1:
        raise DataError("dimension must be >= 1")
    records = list(records)
    stream.write(_MAGIC)
    stream.write(struct.pack("<HIQ", _VERSION, dimension, len(records)))
    seen: set[str] = set()
    for rec_id, values in records:
        if rec_id in seen:
            raise DataError(f"duplicate id {rec_id!r}")
        seen.add(rec_id)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (dimension,):
            raise DataError(
                f"vector for {rec_id!r} has shape {values.shape}, expected ({dimension},)"
            )
        raw_id = rec_id.encode("utf-8")
        if len(raw_id) > 0xFFFF:
            raise DataError(f"id too long to serialize: {rec_id[:40]!r}...")
        stream.write(struct.pack("<H", len(raw_id)))
        stream.write(raw_id)
        stream.write(values.astype("<f4").tobytes())
    return len(records)


def load_embedding_file(stream: BinaryIO, provider: str = "file") -> EmbeddingCollection:
    """Load a BDEM file; vectors whose norm is off by more than NORM_TOLERANCE
    are re-normalized and counted (logged once at the end)."""
    magic = stream.read(4)
    if magic != _MAGIC:
        raise DataError(f"bad magic {magic!r}; expected {_MAGIC!r}")
    header = stream.read(struct.calcsize("<HIQ"))
    if len(header) != struct.calcsize("<HIQ"):
        raise DataError("truncated header")
    version, dimension, count = struct.unpack("<HIQ", header)
    if version != _VERSION:
        raise DataError(f"unsupported version {version}")
    if dimension == 0:
        raise DataError("dimension is 0")

    vectors: dict[str, np.ndarray] = {}
    renormalized = 0
    for ordinal in range(1, count + 1):
        head = stream.read(2)
        if len(head) != 2:
            raise DataError(f"truncated file at record {ordinal} of {count}")
        (id_len,) = struct.unpack("<H", head)
        raw_id = stream.read(id_len)
        if len(raw_id) != id_len:
            raise DataError(f"truncated file at record {ordinal} of {count}")
        try:
            rec_id = raw_id.decode("utf-8")
        except UnicodeDecodeError:
            raise DataError(f"record {ordinal}: id is not valid UTF-8") from None
        raw = stream.read(4 * dimension)
        if len(raw) != 4 * dimension:
            raise DataError(f"truncated file at record {ordinal} of {count}")
        if rec_id in vectors:
            raise DataError(f"duplicate id {rec_id!r} at record {ordinal}")
        values = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        norm = float(np.linalg.norm(values))
        if not np.isfinite(norm) or norm == 0.0:
            raise DataError(f"record {ordinal} ({rec_id!r}): zero or non-finite vector")
        if abs(norm - 1.0) > NORM_TOLERANCE:
            values = values / norm
            renormalized += 1
        vectors[rec_id] = values
    trailing = stream.read(1)
    if trailing:
        raise DataError(f"trailing bytes after {count} records")
    if renormalized:
        logger.warning("re-normalized %d of %d vectors on load", renormalized, count)
    return EmbeddingCollection(dimension, vectors, provider, renormalized)
