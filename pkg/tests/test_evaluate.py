import io
import itertools
import json
import logging
import math
import random
from fractions import Fraction

import pytest

from bdirank import evaluate
from bdirank.errors import DataError, ParseError

import oracles


# --- qrels parsing -------------------------------------------------------------


def test_parse_qrels_basic():
    judged = evaluate.parse_qrels(io.StringIO("1 0 u1_0_0 1\n2 0 u1_0_1 0\n\n"))
    assert judged == {(1, "u1_0_0"): 1, (2, "u1_0_1"): 0}


def test_parse_qrels_tolerates_any_whitespace():
    judged = evaluate.parse_qrels(io.StringIO("1\t0\tdoc\t1\n  2   0   doc   0  \n"))
    assert judged == {(1, "doc"): 1, (2, "doc"): 0}


def test_parse_qrels_errors():
    with pytest.raises(ParseError, match="4 fields"):
        evaluate.parse_qrels(io.StringIO("1 0 doc\n"))
    with pytest.raises(ParseError, match="0 or 1"):
        evaluate.parse_qrels(io.StringIO("1 0 doc 2\n"))
    with pytest.raises(ParseError, match="outside"):
        evaluate.parse_qrels(io.StringIO("0 0 doc 1\n"))
    with pytest.raises(ParseError, match="outside"):
        evaluate.parse_qrels(io.StringIO("22 0 doc 1\n"))
    with pytest.raises(ParseError, match="duplicate"):
        evaluate.parse_qrels(io.StringIO("1 0 doc 1\n1 0 doc 0\n"))
    with pytest.raises(ParseError, match="integer"):
        evaluate.parse_qrels(io.StringIO("one 0 doc 1\n"))


# --- aggregation ---------------------------------------------------------------


def votes_to_assessors(table):
    """table: {doc: (v1, v2, v3)} on symptom 1."""
    return [{(1, doc): votes[a] for doc, votes in table.items()} for a in range(3)]


def test_aggregate_truth_table_exhaustive():
    table = {f"d{i}": votes for i, votes in enumerate(itertools.product((0, 1), repeat=3))}
    assessors = votes_to_assessors(table)
    maj = evaluate.aggregate(assessors, "majority")
    una = evaluate.aggregate(assessors, "unanimity")
    for doc, votes in table.items():
        assert maj.labels[(1, doc)] == oracles.aggregate_votes(list(votes), "majority")
        assert una.labels[(1, doc)] == oracles.aggregate_votes(list(votes), "unanimity")
        assert maj.labels[(1, doc)] == (1 if sum(votes) >= 2 else 0)
        assert una.labels[(1, doc)] == (1 if sum(votes) == 3 else 0)


def test_aggregate_unanimity_subset_of_majority():
    rng = random.Random(5)
    for _ in range(1000):
        table = {
            f"d{i}": tuple(rng.randrange(2) for _ in range(3))
            for i in range(rng.randrange(1, 12))
        }
        assessors = votes_to_assessors(table)
        maj = evaluate.aggregate(assessors, "majority").relevant_ids(1)
        una = evaluate.aggregate(assessors, "unanimity").relevant_ids(1)
        assert una <= maj


def test_aggregate_missing_judgment_counts_as_zero():
    assessors = [{(1, "d"): 1}, {(1, "d"): 1}, {}]
    assert evaluate.aggregate(assessors, "majority").labels[(1, "d")] == 1
    assert evaluate.aggregate(assessors, "unanimity").labels[(1, "d")] == 0


def test_aggregate_rejects_unknown_rule_and_empty():
    with pytest.raises(DataError):
        evaluate.aggregate([{}], "plurality")
    with pytest.raises(DataError):
        evaluate.aggregate([], "majority")


# --- individual metrics ----------------------------------------------------------


def test_average_precision_spec_example():
    got = evaluate.average_precision(["a", "b", "c"], {"a", "c"})
    assert got == pytest.approx(float((Fraction(1, 1) + Fraction(2, 3)) / 2), abs=1e-12)
    assert f"{got:.6f}" == "0.833333"


def test_average_precision_edges():
    assert evaluate.average_precision(["a", "b"], {"a", "b"}) == 1.0
    assert evaluate.average_precision(["x", "y"], {"a"}) == 0.0
    assert evaluate.average_precision(["x"], set()) == 0.0
    # Relevant but unretrieved items still divide: R counts all of them.
    got = evaluate.average_precision(["a"], {"a", "missing"})
    assert got == 0.5


def test_r_precision_examples():
    assert evaluate.r_precision(["a", "b", "x"], {"a", "b"}) == 1.0
    assert evaluate.r_precision(["a", "x", "b"], {"a", "b", "c"}) == pytest.approx(2 / 3)
    # Ranking shorter than R: missing ranks are non-relevant.
    assert evaluate.r_precision(["a"], {"a", "b", "c"}) == pytest.approx(1 / 3)
    assert evaluate.r_precision([], set()) == 0.0


def test_precision_at_10_examples():
    ranking = [f"d{i}" for i in range(10)]
    assert evaluate.precision_at_k(ranking, set(ranking), 10) == 1.0
    assert evaluate.precision_at_k(ranking, {"d0", "d5", "d9"}, 10) == pytest.approx(0.3)
    # Fixed denominator: 5 retrieved, all relevant, k=10.
    assert evaluate.precision_at_k(ranking[:5], set(ranking), 10) == 0.5
    with pytest.raises(ValueError):
        evaluate.precision_at_k(ranking, set(), 0)


def test_ndcg_examples():
    assert evaluate.ndcg_at_k(["a", "b", "x"], {"a", "b"}) == 1.0
    got = evaluate.ndcg_at_k(["x", "a"], {"a"}, 1000)
    assert got == pytest.approx(1.0 / math.log2(3), abs=1e-12)
    assert f"{got:.6f}" == "0.630930"
    assert evaluate.ndcg_at_k(["x"], set()) == 0.0


def test_metrics_match_oracle_on_random_instances():
    rng = random.Random(6)
    for _ in range(500):
        n = rng.randrange(1, 21)
        docs = [f"d{i}" for i in range(n)]
        rng.shuffle(docs)
        ranking = docs[: rng.randrange(0, n + 1)]
        relevant = {d for d in docs if rng.random() < 0.4}
        k = rng.choice([1, 2, 5, 10, 1000])
        assert evaluate.average_precision(ranking, relevant) == pytest.approx(
            oracles.average_precision(ranking, relevant), abs=1e-10
        )
        assert evaluate.r_precision(ranking, relevant) == pytest.approx(
            oracles.r_precision(ranking, relevant), abs=1e-10
        )
        assert evaluate.precision_at_k(ranking, relevant, 10) == pytest.approx(
            oracles.precision_at_k(ranking, relevant, 10), abs=1e-10
        )
        if relevant:
            assert evaluate.ndcg_at_k(ranking, relevant, k) == pytest.approx(
                oracles.ndcg_at_k(ranking, relevant, k), abs=1e-10
            )


def test_metrics_bounded_zero_one():
    rng = random.Random(7)
    for _ in range(300):
        docs = [f"d{i}" for i in range(rng.randrange(0, 15))]
        relevant = {d for d in docs if rng.random() < 0.5} | (
            {f"extra{i}" for i in range(rng.randrange(0, 4))}
        )
        for value in (
            evaluate.average_precision(docs, relevant),
            evaluate.r_precision(docs, relevant),
            evaluate.precision_at_k(docs, relevant, 10),
            evaluate.ndcg_at_k(docs, relevant, 1000),
        ):
            assert 0.0 <= value <= 1.0


def test_adjacent_swap_monotonicity():
    """Promoting a relevant item past a non-relevant neighbor never lowers
    AP or NDCG."""
    rng = random.Random(8)
    for _ in range(200):
        n = rng.randrange(2, 15)
        ranking = [f"d{i}" for i in range(n)]
        relevant = {d for d in ranking if rng.random() < 0.5}
        pos = rng.randrange(0, n - 1)
        if ranking[pos] in relevant or ranking[pos + 1] not in relevant:
            continue
        swapped = list(ranking)
        swapped[pos], swapped[pos + 1] = swapped[pos + 1], swapped[pos]
        assert evaluate.average_precision(swapped, relevant) >= evaluate.average_precision(
            ranking, relevant
        )
        assert evaluate.ndcg_at_k(swapped, relevant, 1000) >= evaluate.ndcg_at_k(
            ranking, relevant, 1000
        )


def test_duplicate_in_ranking_rejected():
    with pytest.raises(DataError, match="duplicate"):
        evaluate.average_precision(["a", "a"], {"a"})
    with pytest.raises(DataError, match="duplicate"):
        evaluate.ndcg_at_k(["a", "b", "a"], {"a"})


# --- run parsing ---------------------------------------------------------------


def test_parse_run_file_orders_by_rank_field(caplog):
    text = "1 Q0 d2 2 0.5 t\n1 Q0 d1 1 0.9 t\n2 Q0 e1 1 0.8 t\n"
    rankings = evaluate.parse_run_file(io.StringIO(text))
    assert rankings == {1: ["d1", "d2"], 2: ["e1"]}
    # Rank field wins over score order, with a warning.
    inverted = "1 Q0 low 1 0.1 t\n1 Q0 high 2 0.9 t\n"
    with caplog.at_level(logging.WARNING, logger="bdirank.evaluate"):
        rankings = evaluate.parse_run_file(io.StringIO(inverted))
    assert rankings[1] == ["low", "high"]
    assert any("ranks win" in r.message for r in caplog.records)


def test_parse_run_file_errors():
    with pytest.raises(DataError, match="empty"):
        evaluate.parse_run_file(io.StringIO(""))
    with pytest.raises(ParseError, match="6 fields"):
        evaluate.parse_run_file(io.StringIO("1 Q0 d1 1 0.5\n"))
    with pytest.raises(DataError, match="outside"):
        evaluate.parse_run_file(io.StringIO("25 Q0 d1 1 0.5 t\n"))
    with pytest.raises(DataError, match="duplicate"):
        evaluate.parse_run_file(io.StringIO("1 Q0 d1 1 0.5 t\n1 Q0 d1 2 0.4 t\n"))
    with pytest.raises(ParseError, match="malformed"):
        evaluate.parse_run_file(io.StringIO("1 Q0 d1 one 0.5 t\n"))


# --- end-to-end scoring ----------------------------------------------------------


def golden_inputs(golden_dir):
    with open(golden_dir / "run.txt") as fh:
        rankings = evaluate.parse_run_file(fh)
    assessors = []
    for a in (1, 2, 3):
        with open(golden_dir / f"qrels_a{a}.txt") as fh:
            assessors.append(evaluate.parse_qrels(fh))
    return rankings, assessors


def test_golden_micro_benchmark_exact(golden_dir):
    rankings, assessors = golden_inputs(golden_dir)
    with open(golden_dir / "expected.json") as fh:
        expected = json.load(fh)
    for rule in ("majority", "unanimity"):
        report = evaluate.evaluate_run(rankings, evaluate.aggregate(assessors, rule))
        want = expected[rule]
        for sid_str, row in want["per_symptom"].items():
            m = report.per_symptom[int(sid_str)]
            assert m.ap == row["ap"], (rule, sid_str)
            assert m.r_prec == row["r_prec"]
            assert m.p_at_10 == row["p_at_10"]
            assert m.ndcg == pytest.approx(row["ndcg"], abs=1e-14)
        assert report.macro.ap == pytest.approx(want["macro"]["ap"], abs=1e-14)
        assert report.macro.r_prec == pytest.approx(want["macro"]["r_prec"], abs=1e-14)
        assert report.macro.p_at_10 == pytest.approx(want["macro"]["p_at_10"], abs=1e-14)
        assert report.macro.ndcg == pytest.approx(want["macro"]["ndcg"], abs=1e-14)


def test_golden_hand_values(golden_dir):
    """Symptom 1 majority metrics, re-derived by hand with exact fractions:
    judged relevant {d1, d3, d4, d6} (d6 never retrieved, so R = 4), run
    order d1..d5."""
    rankings, assessors = golden_inputs(golden_dir)
    maj = evaluate.aggregate(assessors, "majority")
    assert maj.relevant_ids(1) == {"d1", "d3", "d4", "d6"}
    report = evaluate.evaluate_run(rankings, maj)
    m = report.per_symptom[1]
    assert m.ap == pytest.approx(float(Fraction(29, 48)), abs=1e-14)
    assert m.r_prec == pytest.approx(0.75, abs=1e-14)
    assert m.p_at_10 == pytest.approx(0.3, abs=1e-14)
    ideal = 1 + 1 / math.log2(3) + 1 / math.log2(4) + 1 / math.log2(5)
    got = 1 + 1 / math.log2(4) + 1 / math.log2(5)
    assert m.ndcg == pytest.approx(got / ideal, abs=1e-14)

    una = evaluate.aggregate(assessors, "unanimity")
    report = evaluate.evaluate_run(rankings, una)
    assert report.per_symptom[1].ap == pytest.approx(float(Fraction(1, 6)), abs=1e-14)
    assert report.per_symptom[1].r_prec == 0.0
    assert report.macro.ap == pytest.approx(float(Fraction(5, 24)), abs=1e-14)


def test_ideal_run_scores_one_everywhere():
    relevant = {f"d{i}" for i in range(6)}
    assessors = [{(3, d): 1 for d in relevant} for _ in range(3)]
    rankings = {3: sorted(relevant) + ["x1", "x2"]}
    report = evaluate.evaluate_run(rankings, evaluate.aggregate(assessors, "unanimity"))
    m = report.per_symptom[3]
    assert m.ap == 1.0 and m.r_prec == 1.0 and m.ndcg == 1.0
    assert m.p_at_10 == pytest.approx(0.6)  # only 6 relevant exist


def test_evaluate_excludes_empty_symptoms_from_macro():
    assessors = [
        {(1, "d1"): 1, (2, "e1"): 0},
        {(1, "d1"): 1, (2, "e1"): 0},
        {(1, "d1"): 1, (2, "e1"): 0},
    ]
    rankings = {1: ["d1"], 2: ["e1"]}
    report = evaluate.evaluate_run(rankings, evaluate.aggregate(assessors, "majority"))
    assert report.excluded == [2]
    assert report.macro.ap == 1.0  # symptom 2's zero does not dilute
    with_empty = evaluate.evaluate_run(
        rankings, evaluate.aggregate(assessors, "majority"), include_empty=True
    )
    assert with_empty.macro.ap == 0.5
    assert with_empty.excluded == []


def test_evaluate_errors_when_nothing_relevant():
    assessors = [{(1, "d1"): 0}] * 3
    with pytest.raises(DataError, match="no symptom"):
        evaluate.evaluate_run({1: ["d1"]}, evaluate.aggregate(assessors, "majority"))
    with pytest.raises(DataError):
        evaluate.evaluate_run({}, evaluate.aggregate([{(1, "d"): 1}] * 3, "majority"))


def test_evaluate_warns_on_judged_but_missing_symptom(caplog):
    assessors = [{(1, "d1"): 1, (5, "z"): 1}] * 3
    with caplog.at_level(logging.WARNING, logger="bdirank.evaluate"):
        evaluate.evaluate_run({1: ["d1"]}, evaluate.aggregate(assessors, "majority"))
    assert any("symptom 5" in r.message for r in caplog.records)


def test_format_report_layout(golden_dir):
    rankings, assessors = golden_inputs(golden_dir)
    report = evaluate.evaluate_run(rankings, evaluate.aggregate(assessors, "majority"))
    text = evaluate.format_report(report)
    lines = text.splitlines()
    assert lines[0] == "symptom\tAP\tR-PREC\tP@10\tNDCG@1000"
    assert lines[-1].startswith("all\t")
    assert len(lines) == 1 + len(report.per_symptom) + 1
    payload = evaluate.report_as_dict(report)
    assert payload["rule"] == "majority"
    assert set(payload["macro"]) == {"ap", "r_prec", "p_at_10", "ndcg"}


def test_evaluate_files_end_to_end(golden_dir):
    with open(golden_dir / "run.txt") as run, \
         open(golden_dir / "qrels_a1.txt") as a1, \
         open(golden_dir / "qrels_a2.txt") as a2, \
         open(golden_dir / "qrels_a3.txt") as a3:
        report = evaluate.evaluate_files(run, [a1, a2, a3], "majority")
    assert set(report.per_symptom) == {1, 2}
