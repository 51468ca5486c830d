"""Corpus ingestion: TREC-formatted sentence collections and the labeled training CSV.

The TREC reader is a streaming scanner over byte buffers, so peak memory is
bounded by the largest single DOC block regardless of corpus size. Sentence
IDs follow the scheme ``<user_id>_<doc_index>_<sentence_index>``; IDs that do
not match are kept as opaque strings with the structured fields unset.
"""

from __future__ import annotations

import csv
import io
import logging
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import BinaryIO, Iterable, Iterator, TextIO

from .errors import DataError, ParseError

logger = logging.getLogger(__name__)

_CHUNK_SIZE = 1 << 16


@dataclass(frozen=True)
class SentenceRecord:
    """One corpus sentence. Structured identity fields are None for opaque DOCNOs."""

    sentence_id: str
    user_id: str | None
    doc_index: int | None
    sentence_index: int | None
    text: str


@dataclass
class LabeledExample:
    text: str
    label: int  # 1 = depression-related, 0 = not


@dataclass
class CorpusStats:
    """Counts accumulated while streaming a corpus.

    ``sentence_count`` counts yielded records; empty-text DOC entries are
    dropped and tallied separately so that yielded + dropped (+ skipped in
    recovery mode) equals the number of blocks seen.
    """

    user_count: int = 0
    sentence_count: int = 0
    dropped_empty: int = 0
    skipped_blocks: int = 0
    _users: set = field(default_factory=set, repr=False)

    @property
    def mean_sentences_per_user(self) -> Fraction:
        if self.user_count == 0:
            raise DataError("no structured user IDs seen; mean sentences per user undefined")
        return Fraction(self.sentence_count, self.user_count)


def encode_sentence_id(user_id: str, doc_index: int, sentence_index: int) -> str:
    if doc_index < 0 or sentence_index < 0:
        raise ValueError("doc_index and sentence_index must be non-negative")
    return f"{user_id}_{doc_index}_{sentence_index}"


def _canonical_nonneg_int(s: str) -> int | None:
    # Only canonical decimal forms round-trip ("0" yes, "01"/"+1" no).
    if not s.isdigit():
        return None
    if len(s) > 1 and s[0] == "0":
        return None
    return int(s)


def decode_sentence_id(sentence_id: str) -> tuple[str, int, int] | None:
    """Split a structured sentence ID; None when the ID does not match the scheme.

    The user ID may itself contain underscores, so the two trailing integer
    fields are taken from the right.
    """
    parts = sentence_id.rsplit("_", 2)
    if len(parts) != 3 or not parts[0]:
        return None
    doc = _canonical_nonneg_int(parts[1])
    sent = _canonical_nonneg_int(parts[2])
    if doc is None or sent is None:
        return None
    return parts[0], doc, sent


def _record_from_docno(docno: str, text: str) -> SentenceRecord:
    decoded = decode_sentence_id(docno)
    if decoded is None:
        return SentenceRecord(docno, None, None, None, text)
    user_id, doc_index, sentence_index = decoded
    return SentenceRecord(docno, user_id, doc_index, sentence_index, text)


class _Scanner:
    """Sliding byte window over a stream, addressed by absolute offset.

    ``find`` keeps everything at or after ``retain_abs`` buffered (callers pass
    the current block start so tag contents stay sliceable); with
    ``retain_abs=None`` it keeps only a needle-sized tail, which bounds memory
    while skipping ahead in recovery mode.
    """

    def __init__(self, stream: BinaryIO):
        self._stream = stream
        self._buf = b""
        self._base = 0  # absolute offset of _buf[0]
        self._eof = False

    def _fill(self) -> bool:
        if self._eof:
            return False
        chunk = self._stream.read(_CHUNK_SIZE)
        if not chunk:
            self._eof = True
            return False
        self._buf += chunk
        return True

    def find(self, needle: bytes, start_abs: int, retain_abs: int | None) -> int:
        while True:
            idx = self._buf.find(needle, max(start_abs - self._base, 0))
            if idx >= 0:
                return self._base + idx
            if retain_abs is None:
                # Free to drop all but a tail that could begin a split match.
                discard = len(self._buf) - len(needle) + 1
                if discard > 0:
                    self._base += discard
                    self._buf = self._buf[discard:]
            if not self._fill():
                return -1

    def slice(self, start_abs: int, end_abs: int) -> bytes:
        return self._buf[start_abs - self._base : end_abs - self._base]

    def discard_before(self, abs_offset: int) -> None:
        cut = abs_offset - self._base
        if cut > 0:
            self._buf = self._buf[cut:]
            self._base = abs_offset

    def skip_whitespace(self, start_abs: int) -> int:
        """Absolute offset of the first non-whitespace byte at or after start_abs; -1 at EOF."""
        pos = max(start_abs, self._base)
        while True:
            i = pos - self._base
            while i < len(self._buf):
                if self._buf[i] not in b" \t\r\n":
                    return self._base + i
                i += 1
            pos = self._base + len(self._buf)
            if not self._fill():
                return -1


_DOC_OPEN = b"<DOC>"
_DOC_CLOSE = b"</DOC>"
_DOCNO_OPEN = b"<DOCNO>"
_DOCNO_CLOSE = b"</DOCNO>"
_TEXT_OPEN = b"<TEXT>"
_TEXT_CLOSE = b"</TEXT>"


def parse_trec_corpus(
    stream: BinaryIO,
    stats: CorpusStats | None = None,
    *,
    recover: bool = False,
) -> Iterator[SentenceRecord]:
    """Yield one SentenceRecord per non-empty TEXT element, in file order.

    Pass a CorpusStats to collect counts; it is complete once iteration ends.
    Malformed blocks raise ParseError with the byte offset of the failure, or,
    with ``recover=True``, are skipped up to the next ``<DOC>`` marker and
    counted in ``stats.skipped_blocks``.

    DOCNO bytes must be valid UTF-8; TEXT is decoded with invalid bytes
    replaced (noisy social-media source).
    """
    if stats is None:
        stats = CorpusStats()
    scanner = _Scanner(stream)
    pos = 0

    def fail(message: str, offset: int) -> int:
        """Strict mode: raise. Recovery: return resume offset (-1 at EOF)."""
        if not recover:
            raise ParseError(message, offset=offset)
        stats.skipped_blocks += 1
        logger.debug("skipping malformed block at byte %d: %s", offset, message)
        return scanner.find(_DOC_OPEN, offset + 1, None)

    while pos >= 0:
        start = scanner.skip_whitespace(pos)
        if start < 0:
            break
        if scanner.find(_DOC_OPEN, start, start) != start:
            pos = fail("expected <DOC>", start)
            continue
        block = start  # retention floor: whole current block stays buffered

        docno_at = scanner.skip_whitespace(block + len(_DOC_OPEN))
        if docno_at < 0 or scanner.find(_DOCNO_OPEN, docno_at, block) != docno_at:
            pos = fail("missing DOCNO", block)
            continue
        docno_end = scanner.find(_DOCNO_CLOSE, docno_at + len(_DOCNO_OPEN), block)
        if docno_end < 0:
            pos = fail("unclosed <DOCNO> tag", docno_at)
            continue
        docno_bytes = scanner.slice(docno_at + len(_DOCNO_OPEN), docno_end)

        text_at = scanner.skip_whitespace(docno_end + len(_DOCNO_CLOSE))
        if text_at < 0 or scanner.find(_TEXT_OPEN, text_at, block) != text_at:
            pos = fail("missing TEXT", block)
            continue
        text_end = scanner.find(_TEXT_CLOSE, text_at + len(_TEXT_OPEN), block)
        if text_end < 0:
            pos = fail("unclosed <TEXT> tag", text_at)
            continue
        text_bytes = scanner.slice(text_at + len(_TEXT_OPEN), text_end)

        close_at = scanner.skip_whitespace(text_end + len(_TEXT_CLOSE))
        if close_at < 0 or scanner.find(_DOC_CLOSE, close_at, block) != close_at:
            pos = fail("unclosed <DOC> tag", block)
            continue
        pos = close_at + len(_DOC_CLOSE)
        scanner.discard_before(pos)

        try:
            docno = docno_bytes.decode("utf-8").strip()
        except UnicodeDecodeError:
            pos = fail("DOCNO is not valid UTF-8", docno_at)
            continue
        if not docno:
            pos = fail("empty DOCNO", block)
            continue

        text = text_bytes.decode("utf-8", errors="replace").strip()
        if not text:
            stats.dropped_empty += 1
            continue

        record = _record_from_docno(docno, text)
        stats.sentence_count += 1
        if record.user_id is not None and record.user_id not in stats._users:
            stats._users.add(record.user_id)
            stats.user_count += 1
        yield record


def write_trec_corpus(records: Iterable[SentenceRecord], stream: BinaryIO) -> int:
    """Serialize records to the bit-exact TREC block format. Returns block count.

    Rejects text containing the literal ``</TEXT>`` (unrepresentable) and
    text that is empty after trimming (such records would be dropped on
    reparse, breaking the round-trip guarantee).
    """
    n = 0
    for rec in records:
        if "</TEXT>" in rec.text:
            raise DataError(f"text of {rec.sentence_id!r} contains the literal </TEXT>")
        if not rec.text.strip():
            raise DataError(f"text of {rec.sentence_id!r} is empty after trimming")
        stream.write(b"<DOC>\n<DOCNO>")
        stream.write(rec.sentence_id.encode("utf-8"))
        stream.write(b"</DOCNO>\n<TEXT>")
        stream.write(rec.text.encode("utf-8"))
        stream.write(b"</TEXT>\n</DOC>\n")
        n += 1
    return n


@dataclass
class ClassCounts:
    positive: int = 0
    negative: int = 0

    @property
    def total(self) -> int:
        return self.positive + self.negative


def parse_labeled_csv(stream: BinaryIO | TextIO) -> tuple[list[LabeledExample], ClassCounts]:
    """Parse the two-column labeled dataset (header row, then text,label rows).

    Columns are positional, so header names are not checked; the public
    depression dataset export parses unchanged. Labels must be 0 or 1 after
    trimming; anything else is a row error naming the line.
    """
    if isinstance(stream, (io.RawIOBase, io.BufferedIOBase)):
        stream = io.TextIOWrapper(stream, encoding="utf-8", newline="")
    reader = csv.reader(stream, strict=True)
    examples: list[LabeledExample] = []
    counts = ClassCounts()
    try:
        header = next(reader, None)
    except csv.Error as e:
        raise ParseError(f"CSV error: {e}", line=1) from e
    if header is None:
        raise ParseError("empty file: expected a header row", line=1)
    if len(header) != 2:
        raise ParseError(f"expected 2 columns in header, found {len(header)}", line=1)
    while True:
        try:
            row = next(reader, None)
        except csv.Error as e:
            raise ParseError(f"CSV error: {e}", line=reader.line_num) from e
        if row is None:
            break
        if not row:
            continue
        if len(row) != 2:
            raise ParseError(f"expected 2 columns, found {len(row)}", line=reader.line_num)
        text, raw_label = row[0], row[1].strip()
        if raw_label == "1":
            counts.positive += 1
            examples.append(LabeledExample(text, 1))
        elif raw_label == "0":
            counts.negative += 1
            examples.append(LabeledExample(text, 0))
        else:
            raise ParseError(f"label must be 0 or 1, got {row[1]!r}", line=reader.line_num)
    return examples, counts


def split_train_validation(
    examples: list[LabeledExample],
    validation_fraction: float,
    seed: int,
) -> tuple[list[LabeledExample], list[LabeledExample]]:
    """Deterministic stratified split; each class's validation share is within
    one example of ``validation_fraction``, and both splits keep at least one
    example of each class."""
    if not 0.0 < validation_fraction < 1.0:
        raise ValueError("validation_fraction must be in (0, 1)")
    by_class: dict[int, list[LabeledExample]] = {0: [], 1: []}
    for ex in examples:
        by_class[ex.label].append(ex)
    for label, items in by_class.items():
        if len(items) < 2:
            raise DataError(f"need at least 2 examples of class {label}, found {len(items)}")

    rng = random.Random(seed)
    train: list[LabeledExample] = []
    validation: list[LabeledExample] = []
    for label in (0, 1):
        items = list(by_class[label])
        rng.shuffle(items)
        n_val = int(len(items) * validation_fraction + 0.5)  # half-up
        n_val = min(max(n_val, 1), len(items) - 1)
        validation.extend(items[:n_val])
        train.extend(items[n_val:])
    rng.shuffle(train)
    rng.shuffle(validation)
    return train, validation
