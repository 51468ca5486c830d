"""Cosine ranking of sentence embeddings against the 21x4 symptom queries.

Each sentence gets 84 cosine scores (21 symptoms x 4 paraphrases). By default
it is assigned to the single symptom owning its best score (ties: lowest
symptom_id, then lowest paraphrase index) and competes only in that symptom's
pool; --multi-assign instead enters every sentence in every symptom's pool at
its per-symptom best-paraphrase score. Pools keep the top `cutoff` entries by
(score descending, sentence_id ascending).

Determinism: scoring happens in fixed-size blocks in float64, worker threads
only parallelize whole blocks, and the bounded per-symptom heaps hold the
top-k of a multiset under a strict total order, so output is byte-identical
for any worker count.
"""

from __future__ import annotations

import heapq
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, TextIO

import numpy as np

from .embed import EmbeddingCollection, hash_embed, load_embedding_file
from .errors import DataError, ParseError

logger = logging.getLogger(__name__)

N_SYMPTOMS = 21
N_PARAPHRASES = 4
N_QUERIES = N_SYMPTOMS * N_PARAPHRASES

_BLOCK = 4096  # sentences scored per GEMM; fixed so floats never depend on workers


@dataclass
class SymptomQuerySet:
    """84 query embeddings, symptom-major: row (s-1)*4 + (p-1) is symptom s,
    paraphrase p (both 1-based). labels[s-1] is a human-readable symptom name."""

    matrix: np.ndarray  # (84, D) float64, rows unit-norm
    labels: list[str]
    dimension: int


@dataclass(frozen=True)
class RankedEntry:
    symptom_id: int
    sentence_id: str
    rank: int
    score: float


def parse_query_file(stream: TextIO) -> list[tuple[int, int, str]]:
    """Parse `symptom_id<TAB>paraphrase_index<TAB>text` lines (both indices
    1-based) into a complete 21x4 set; missing or duplicate entries are errors."""
    seen: dict[tuple[int, int], str] = {}
    for line_num, line in enumerate(stream, start=1):
        line = line.rstrip("\n").rstrip("\r")
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError("expected symptom_id<TAB>paraphrase_index<TAB>text", line=line_num)
        try:
            sid = int(parts[0])
            pidx = int(parts[1])
        except ValueError:
            raise ParseError(f"non-integer query key {parts[0]!r}/{parts[1]!r}", line=line_num) from None
        if not 1 <= sid <= N_SYMPTOMS:
            raise ParseError(f"symptom_id {sid} outside 1..{N_SYMPTOMS}", line=line_num)
        if not 1 <= pidx <= N_PARAPHRASES:
            raise ParseError(f"paraphrase_index {pidx} outside 1..{N_PARAPHRASES}", line=line_num)
        text = parts[2].strip()
        if not text:
            raise ParseError(f"empty query text for {sid}/{pidx}", line=line_num)
        if (sid, pidx) in seen:
            raise ParseError(f"duplicate query {sid}/{pidx}", line=line_num)
        seen[(sid, pidx)] = text
    missing = [
        (s, p)
        for s in range(1, N_SYMPTOMS + 1)
        for p in range(1, N_PARAPHRASES + 1)
        if (s, p) not in seen
    ]
    if missing:
        raise DataError(f"query set incomplete: {len(missing)} of {N_QUERIES} entries missing "
                        f"(first: symptom {missing[0][0]} paraphrase {missing[0][1]})")
    return [(s, p, seen[(s, p)]) for s in range(1, N_SYMPTOMS + 1) for p in range(1, N_PARAPHRASES + 1)]


def queries_from_texts(
    entries: list[tuple[int, int, str]], dimension: int, seed: int
) -> SymptomQuerySet:
    """Hash-embed query texts. Only meaningful against hash-embedded sentences
    built with the same dimension and seed."""
    matrix = np.zeros((N_QUERIES, dimension))
    labels = [""] * N_SYMPTOMS
    for sid, pidx, text in entries:
        matrix[(sid - 1) * N_PARAPHRASES + (pidx - 1)] = hash_embed(text, dimension, seed)
        if pidx == 1:
            labels[sid - 1] = text
    return SymptomQuerySet(matrix, labels, dimension)


def queries_from_collection(collection: EmbeddingCollection) -> SymptomQuerySet:
    """Build the query set from an embedding collection with ids `q<s>_<p>`
    (1-based); the full 21x4 grid must be present."""
    matrix = np.zeros((N_QUERIES, collection.dimension))
    for sid in range(1, N_SYMPTOMS + 1):
        for pidx in range(1, N_PARAPHRASES + 1):
            key = f"q{sid}_{pidx}"
            vec = collection.vectors.get(key)
            if vec is None:
                raise DataError(f"query embedding {key!r} missing from {collection.provider}")
            matrix[(sid - 1) * N_PARAPHRASES + (pidx - 1)] = vec
    extra = len(collection.vectors) - N_QUERIES
    if extra:
        logger.warning("query embedding file has %d entries beyond the 21x4 grid", extra)
    labels = [f"symptom {s}" for s in range(1, N_SYMPTOMS + 1)]
    return SymptomQuerySet(matrix, labels, collection.dimension)


def load_queries(path, dimension: int, seed: int) -> SymptomQuerySet:
    """Load queries from a BDEM embedding file (sniffed by magic) or a
    tab-separated text file (hash-embedded at `dimension`/`seed`)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"BDEM":
        with open(path, "rb") as fh:
            collection = load_embedding_file(fh, provider=str(path))
        queries = queries_from_collection(collection)
        if queries.dimension != dimension:
            raise DataError(
                f"query dimension {queries.dimension} != sentence dimension {dimension}"
            )
        return queries
    with open(path, "r", encoding="utf-8") as fh:
        return queries_from_texts(parse_query_file(fh), dimension, seed)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Dot product of unit vectors, clamped to [-1, 1] against rounding."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DataError(f"dimension mismatch: {u.shape} vs {v.shape}")
    return float(min(1.0, max(-1.0, float(u @ v))))


def assign_symptom(
    sentence_vec: np.ndarray, queries: SymptomQuerySet
) -> tuple[int, float, int]:
    """(symptom_id, best score, paraphrase index), ties to the lowest
    symptom_id then lowest paraphrase index."""
    vec = np.asarray(sentence_vec, dtype=np.float64)
    if vec.shape != (queries.dimension,):
        raise DataError(f"dimension mismatch: {vec.shape} vs ({queries.dimension},)")
    scores = np.clip(queries.matrix @ vec, -1.0, 1.0)
    k = int(np.argmax(scores))  # first maximum = lowest symptom, then paraphrase
    return k // N_PARAPHRASES + 1, float(scores[k]), k % N_PARAPHRASES + 1


class _RevStr:
    """Inverts string comparison so a (score, _RevStr(id)) min-heap evicts the
    entry that loses under (score descending, id ascending)."""

    __slots__ = ("value",)

    def __init__(self, value: str):
        self.value = value

    def __lt__(self, other: "_RevStr") -> bool:
        return self.value > other.value

    def __eq__(self, other: object) -> bool:
        return isinstance(other, _RevStr) and self.value == other.value


class _SymptomPool:
    """Bounded top-k pool under (score desc, sentence_id asc)."""

    def __init__(self, cutoff: int):
        self.cutoff = cutoff
        self._heap: list[tuple[float, _RevStr]] = []

    def offer(self, score: float, sentence_id: str) -> None:
        item = (score, _RevStr(sentence_id))
        if len(self._heap) < self.cutoff:
            heapq.heappush(self._heap, item)
        elif self._heap[0] < item:
            heapq.heapreplace(self._heap, item)

    def sorted_entries(self, symptom_id: int) -> list[RankedEntry]:
        ordered = sorted(self._heap, key=lambda it: (-it[0], it[1].value))
        return [
            RankedEntry(symptom_id, rev.value, rank, score)
            for rank, (score, rev) in enumerate(ordered, start=1)
        ]


def _score_block(
    queries: SymptomQuerySet, block: list[tuple[str, np.ndarray]], multi_assign: bool
) -> tuple[list[str], np.ndarray, np.ndarray]:
    """(ids, symptom column indices, scores) for one block.

    Single-assign: one column per sentence (its argmax symptom).
    Multi-assign: 21 columns per sentence (per-symptom best paraphrase).
    """
    ids = [sid for sid, _ in block]
    mat = np.stack([vec for _, vec in block])  # (n, D) float64
    scores = np.clip(mat @ queries.matrix.T, -1.0, 1.0)  # (n, 84)
    per_symptom = scores.reshape(len(block), N_SYMPTOMS, N_PARAPHRASES).max(axis=2)
    if multi_assign:
        return ids, np.tile(np.arange(N_SYMPTOMS), (len(block), 1)), per_symptom
    best = np.argmax(scores, axis=1) // N_PARAPHRASES  # first max: lowest symptom wins ties
    return ids, best[:, None], per_symptom[np.arange(len(block)), best][:, None]


def rank_corpus(
    sentences: Iterable[tuple[str, np.ndarray]],
    queries: SymptomQuerySet,
    cutoff: int = 1000,
    *,
    workers: int = 1,
    multi_assign: bool = False,
) -> list[list[RankedEntry]]:
    """Rank a stream of (sentence_id, unit vector) pairs; returns 21 pools of
    RankedEntry, symptom 1 first. Duplicate sentence ids are an error."""
    if cutoff < 1:
        raise ValueError("cutoff must be >= 1")
    if workers < 1:
        raise ValueError("workers must be >= 1")
    pools = [_SymptomPool(cutoff) for _ in range(N_SYMPTOMS)]
    seen: set[str] = set()

    def consume(result: tuple[list[str], np.ndarray, np.ndarray]) -> None:
        ids, columns, scores = result
        for sid in ids:
            if sid in seen:
                raise DataError(f"duplicate sentence_id {sid!r} in embedding stream")
            seen.add(sid)
        for row, sid in enumerate(ids):
            for col, sym in enumerate(columns[row]):
                pools[sym].offer(float(scores[row, col]), sid)

    def blocks() -> Iterator[list[tuple[str, np.ndarray]]]:
        block: list[tuple[str, np.ndarray]] = []
        for item in sentences:
            block.append(item)
            if len(block) == _BLOCK:
                yield block
                block = []
        if block:
            yield block

    if workers == 1:
        for block in blocks():
            consume(_score_block(queries, block, multi_assign))
    else:
        # Workers score whole blocks; the main thread folds results in order.
        # Pool membership is the top-k of a multiset, so fold order cannot
        # change the outcome anyway.
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for result in pool.map(
                lambda blk: _score_block(queries, blk, multi_assign), blocks()
            ):
                consume(result)
    return [pools[s].sorted_entries(s + 1) for s in range(N_SYMPTOMS)]


def write_run_file(
    pools: list[list[RankedEntry]], stream: BinaryIO, tag: str = "bdirank"
) -> int:
    """Standard 6-column run lines, symptoms ascending, scores at 6 decimals,
    LF endings. Returns the line count."""
    if not tag or any(ch.isspace() for ch in tag):
        raise DataError(f"run tag must be non-empty without whitespace: {tag!r}")
    lines = 0
    for pool in pools:
        for entry in pool:
            stream.write(
                f"{entry.symptom_id} Q0 {entry.sentence_id} {entry.rank} "
                f"{entry.score:.6f} {tag}\n".encode("utf-8")
            )
            lines += 1
    return lines
