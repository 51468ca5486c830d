"""Run-file scoring: assessor aggregation and AP / R-Precision / P@10 / NDCG@1000.

Conventions (each is the dominant shared-task choice, noted because variants
exist): unjudged pairs count as non-relevant; NDCG uses binary gain
rel / log2(rank+1) including rank 1; symptoms with zero relevant items under
the aggregation rule score 0 and are excluded from macro averages unless
`include_empty` is set.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, TextIO

from .errors import DataError, ParseError
from .rank import N_SYMPTOMS

logger = logging.getLogger(__name__)

RULES = ("majority", "unanimity")


def parse_qrels(stream: TextIO) -> dict[tuple[int, str], int]:
    """One assessor's judgments: `symptom_id 0 sentence_id rel` lines,
    whitespace-separated, rel in {0,1}."""
    judgments: dict[tuple[int, str], int] = {}
    for line_num, line in enumerate(stream, start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 4:
            raise ParseError(f"expected 4 fields, found {len(parts)}", line=line_num)
        sid_raw, _unused, sentence_id, rel_raw = parts
        try:
            sid = int(sid_raw)
        except ValueError:
            raise ParseError(f"symptom_id {sid_raw!r} is not an integer", line=line_num) from None
        if not 1 <= sid <= N_SYMPTOMS:
            raise ParseError(f"symptom_id {sid} outside 1..{N_SYMPTOMS}", line=line_num)
        if rel_raw not in ("0", "1"):
            raise ParseError(f"relevance label must be 0 or 1, got {rel_raw!r}", line=line_num)
        key = (sid, sentence_id)
        if key in judgments:
            raise ParseError(f"duplicate judgment for {key}", line=line_num)
        judgments[key] = int(rel_raw)
    return judgments


@dataclass
class AggregatedQrels:
    rule: str
    labels: dict[tuple[int, str], int]  # every judged pair; absent pairs read as 0

    def relevant_ids(self, symptom_id: int) -> set[str]:
        return {doc for (sid, doc), rel in self.labels.items() if sid == symptom_id and rel == 1}


def aggregate(assessors: list[dict[tuple[int, str], int]], rule: str) -> AggregatedQrels:
    """Majority: strictly more than half the assessors say 1 (with the standard
    three assessors, at least 2). Unanimity: all of them. Pairs an assessor
    never judged count as that assessor saying 0."""
    if rule not in RULES:
        raise DataError(f"unknown aggregation rule {rule!r}; expected one of {RULES}")
    if not assessors:
        raise DataError("no assessor judgment sets given")
    n = len(assessors)
    keys = set()
    for judged in assessors:
        keys.update(judged)
    labels = {}
    for key in keys:
        positives = sum(judged.get(key, 0) for judged in assessors)
        if rule == "majority":
            labels[key] = int(2 * positives > n)
        else:
            labels[key] = int(positives == n)
    return AggregatedQrels(rule, labels)


def _check_ranking(ranking: list[str]) -> None:
    if len(set(ranking)) != len(ranking):
        seen = set()
        for doc in ranking:
            if doc in seen:
                raise DataError(f"duplicate id {doc!r} in ranking")
            seen.add(doc)


def average_precision(ranking: list[str], relevant: set[str]) -> float:
    """Mean of precision at each relevant retrieved rank, over R = |relevant|.
    0.0 when R = 0 (callers exclude such symptoms from macro averages)."""
    _check_ranking(ranking)
    if not relevant:
        return 0.0
    hits = 0
    total = 0.0
    for pos, doc in enumerate(ranking, start=1):
        if doc in relevant:
            hits += 1
            total += hits / pos
    return total / len(relevant)


def r_precision(ranking: list[str], relevant: set[str]) -> float:
    _check_ranking(ranking)
    r = len(relevant)
    if r == 0:
        return 0.0
    hits = sum(1 for doc in ranking[:r] if doc in relevant)
    return hits / r


def precision_at_k(ranking: list[str], relevant: set[str], k: int = 10) -> float:
    """Fixed denominator k even when fewer than k items were retrieved."""
    if k < 1:
        raise ValueError("k must be >= 1")
    _check_ranking(ranking)
    hits = sum(1 for doc in ranking[:k] if doc in relevant)
    return hits / k


def ndcg_at_k(ranking: list[str], relevant: set[str], k: int = 1000) -> float:
    """Binary-gain NDCG: DCG = sum over relevant ranks r <= k of 1/log2(r+1),
    normalized by the ideal ordering; 0.0 when there are no relevant items."""
    if k < 1:
        raise ValueError("k must be >= 1")
    _check_ranking(ranking)
    r = len(relevant)
    if r == 0:
        return 0.0
    dcg = sum(
        1.0 / math.log2(pos + 1)
        for pos, doc in enumerate(ranking[:k], start=1)
        if doc in relevant
    )
    idcg = sum(1.0 / math.log2(pos + 1) for pos in range(1, min(r, k) + 1))
    return dcg / idcg


def parse_run_file(stream: TextIO) -> dict[int, list[str]]:
    """Parse 6-column run lines into per-symptom rankings ordered by the rank
    field (the ordering authority); warns when score order disagrees."""
    rows: dict[int, list[tuple[int, float, str]]] = {}
    seen: set[tuple[int, str]] = set()
    for line_num, line in enumerate(stream, start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 6:
            raise ParseError(f"expected 6 fields, found {len(parts)}", line=line_num)
        sid_raw, _q0, sentence_id, rank_raw, score_raw, _tag = parts
        try:
            sid = int(sid_raw)
            rank = int(rank_raw)
            score = float(score_raw)
        except ValueError:
            raise ParseError(f"malformed run line: {line.rstrip()!r}", line=line_num) from None
        if not 1 <= sid <= N_SYMPTOMS:
            raise DataError(f"line {line_num}: symptom_id {sid} outside 1..{N_SYMPTOMS}")
        if (sid, sentence_id) in seen:
            raise DataError(f"line {line_num}: duplicate entry for symptom {sid}, {sentence_id!r}")
        seen.add((sid, sentence_id))
        rows.setdefault(sid, []).append((rank, score, sentence_id))
    if not rows:
        raise DataError("run file is empty")
    rankings: dict[int, list[str]] = {}
    for sid in sorted(rows):
        ordered = sorted(rows[sid], key=lambda t: t[0])
        scores = [score for _, score, _ in ordered]
        if any(scores[i] < scores[i + 1] for i in range(len(scores) - 1)):
            logger.warning("symptom %d: score order disagrees with rank order; ranks win", sid)
        rankings[sid] = [doc for _, _, doc in ordered]
    return rankings


@dataclass
class SymptomMetrics:
    ap: float
    r_prec: float
    p_at_10: float
    ndcg: float


@dataclass
class MetricReport:
    rule: str
    per_symptom: dict[int, SymptomMetrics]
    macro: SymptomMetrics
    excluded: list[int] = field(default_factory=list)  # zero-relevant symptoms left out of macro


def evaluate_run(
    rankings: dict[int, list[str]],
    qrels: AggregatedQrels,
    *,
    include_empty: bool = False,
) -> MetricReport:
    """Score every symptom present in the run. Symptoms with no relevant items
    under the rule score 0 everywhere and are excluded from the macro average
    unless include_empty is set; symptoms judged but absent from the run are
    logged and not scored."""
    if not rankings:
        raise DataError("no rankings to evaluate")
    per_symptom: dict[int, SymptomMetrics] = {}
    excluded: list[int] = []
    averaged: list[SymptomMetrics] = []
    for sid in sorted(rankings):
        ranking = rankings[sid]
        relevant = qrels.relevant_ids(sid)
        metrics = SymptomMetrics(
            ap=average_precision(ranking, relevant),
            r_prec=r_precision(ranking, relevant),
            p_at_10=precision_at_k(ranking, relevant, 10),
            ndcg=ndcg_at_k(ranking, relevant, 1000),
        )
        per_symptom[sid] = metrics
        if relevant or include_empty:
            averaged.append(metrics)
        else:
            excluded.append(sid)
            logger.info("symptom %d has no relevant items under %s; excluded from macro",
                        sid, qrels.rule)
    judged_symptoms = {sid for sid, _ in qrels.labels}
    for sid in sorted(judged_symptoms - set(rankings)):
        logger.warning("symptom %d is judged but absent from the run", sid)
    if not averaged:
        raise DataError(f"no symptom has a relevant item under rule {qrels.rule!r}")
    n = len(averaged)
    macro = SymptomMetrics(
        ap=sum(m.ap for m in averaged) / n,
        r_prec=sum(m.r_prec for m in averaged) / n,
        p_at_10=sum(m.p_at_10 for m in averaged) / n,
        ndcg=sum(m.ndcg for m in averaged) / n,
    )
    return MetricReport(qrels.rule, per_symptom, macro, excluded)


def format_report(report: MetricReport) -> str:
    """Tab-separated table: one row per symptom plus the macro row."""
    lines = ["symptom\tAP\tR-PREC\tP@10\tNDCG@1000"]
    for sid in sorted(report.per_symptom):
        m = report.per_symptom[sid]
        lines.append(f"{sid}\t{m.ap:.4f}\t{m.r_prec:.4f}\t{m.p_at_10:.4f}\t{m.ndcg:.4f}")
    m = report.macro
    lines.append(f"all\t{m.ap:.4f}\t{m.r_prec:.4f}\t{m.p_at_10:.4f}\t{m.ndcg:.4f}")
    return "\n".join(lines) + "\n"


def report_as_dict(report: MetricReport) -> dict:
    """JSON-ready form of a MetricReport."""

    def row(m: SymptomMetrics) -> dict:
        return {"ap": m.ap, "r_prec": m.r_prec, "p_at_10": m.p_at_10, "ndcg": m.ndcg}

    return {
        "rule": report.rule,
        "per_symptom": {str(sid): row(m) for sid, m in sorted(report.per_symptom.items())},
        "macro": row(report.macro),
        "excluded_symptoms": report.excluded,
    }


def evaluate_files(
    run_stream: TextIO, qrels_streams: Iterable[TextIO], rule: str, *, include_empty: bool = False
) -> MetricReport:
    """Parse + aggregate + score in one step (the CLI entry path)."""
    rankings = parse_run_file(run_stream)
    assessors = [parse_qrels(s) for s in qrels_streams]
    return evaluate_run(rankings, aggregate(assessors, rule), include_empty=include_empty)
