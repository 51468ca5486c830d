"""Writer for the binary embedding interchange format.

The layout is little-endian throughout: magic ``BDEM``, version u16,
dimension u32, record count u64, then one record per vector holding an
id length u16, the id's UTF-8 bytes, and ``dimension`` float32 values.
The retrieval pipeline that consumes these files validates them with
``bdirank embed check``, so the bytes written here have to match that
reader exactly.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Sequence

import numpy as np

from .errors import ExportError

MAGIC = b"BDEM"
VERSION = 1

_HEADER = struct.Struct("<HIQ")
_ID_LEN = struct.Struct("<H")

# u16 length prefix bounds the encoded id.
_MAX_ID_BYTES = 0xFFFF


class EmbeddingWriter:
    """Incremental record writer.

    The header carries the record count, so the count must be declared
    up front; `close` refuses a file with fewer records than declared.
    Use as a context manager so a failed export cannot silently leave a
    short but well-formed file behind.
    """

    def __init__(self, stream: BinaryIO, dimension: int, count: int):
        if dimension < 1:
            raise ExportError("dimension must be positive")
        if count < 1:
            raise ExportError("record count must be positive")
        self._stream = stream
        self._dimension = dimension
        self._declared = count
        self._written = 0
        self._seen: set[str] = set()
        stream.write(MAGIC)
        stream.write(_HEADER.pack(VERSION, dimension, count))

    def write(self, sentence_id: str, vector: np.ndarray) -> None:
        if self._written >= self._declared:
            raise ExportError(f"more than the declared {self._declared} records")
        if not sentence_id:
            raise ExportError("empty sentence id")
        if sentence_id in self._seen:
            raise ExportError(f"duplicate id {sentence_id!r}")
        encoded = sentence_id.encode("utf-8")
        if len(encoded) > _MAX_ID_BYTES:
            raise ExportError(f"id {sentence_id[:32]!r}... exceeds {_MAX_ID_BYTES} bytes")
        values = np.asarray(vector, dtype="<f4")
        if values.ndim != 1 or values.shape[0] != self._dimension:
            raise ExportError(
                f"vector for id {sentence_id!r} has shape {values.shape}; "
                f"expected ({self._dimension},)"
            )
        if not np.all(np.isfinite(values)):
            raise ExportError(f"non-finite value in vector for id {sentence_id!r}")
        self._seen.add(sentence_id)
        self._stream.write(_ID_LEN.pack(len(encoded)))
        self._stream.write(encoded)
        self._stream.write(values.tobytes())
        self._written += 1

    def close(self) -> None:
        if self._written != self._declared:
            raise ExportError(
                f"wrote {self._written} of {self._declared} declared records"
            )

    def __enter__(self) -> "EmbeddingWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        # Don't mask an in-flight error with the short-count complaint.
        if exc_type is None:
            self.close()


def write_embeddings(stream: BinaryIO, ids: Sequence[str], matrix: np.ndarray) -> int:
    """Write one record per row of `matrix`; returns the record count."""
    rows = np.asarray(matrix, dtype="<f4")
    if rows.ndim != 2:
        raise ExportError(f"matrix must be 2-dimensional, got shape {rows.shape}")
    if len(ids) != rows.shape[0]:
        raise ExportError(f"{len(ids)} ids for {rows.shape[0]} matrix rows")
    with EmbeddingWriter(stream, rows.shape[1], rows.shape[0]) as writer:
        for sentence_id, vector in zip(ids, rows):
            writer.write(sentence_id, vector)
    return rows.shape[0]
