import io
import logging
import math
import random

import numpy as np
import pytest

from bdirank import filter_linear as fl
from bdirank.corpus import LabeledExample, SentenceRecord
from bdirank.errors import DataError, TrainingError

import oracles


def rec(sid, text):
    return SentenceRecord(sid, None, None, None, text)


def toy_examples():
    return [LabeledExample("good day", 0)] * 50 + [LabeledExample("feel worthless", 1)] * 50


# --- featurize ---------------------------------------------------------------


def test_featurize_empty():
    fv = fl.featurize("")
    assert fv.indices == () and fv.values == ()
    assert fl.featurize("?!.").indices == ()


def test_featurize_case_folds_and_counts():
    fv = fl.featurize("Sad sad")
    # One unigram bucket (count 2) and one bigram bucket (count 1).
    assert len(fv.indices) == 2
    assert sorted(fv.values) == [1, 2]
    assert fv == fl.featurize("sad SAD")


def test_featurize_matches_oracle_hash():
    fv = fl.featurize("i feel hopeless")
    grams = ["i", "feel", "hopeless", "i feel", "feel hopeless"]
    expected = sorted(oracles.fnv1a64(g.encode()) % (1 << 18) for g in grams)
    assert list(fv.indices) == expected
    assert all(v == 1 for v in fv.values)


def test_featurize_indices_sorted_and_values_positive():
    rng = random.Random(3)
    words = "the a sad happy feel day night rain sun tired".split()
    for _ in range(100):
        text = " ".join(rng.choice(words) for _ in range(rng.randrange(0, 30)))
        fv = fl.featurize(text)
        assert list(fv.indices) == sorted(fv.indices)
        assert len(set(fv.indices)) == len(fv.indices)
        assert all(v >= 1 for v in fv.values)
        assert all(0 <= i < fl.N_BUCKETS for i in fv.indices)
        # Total count equals number of grams, collisions merge but conserve.
        n_tokens = len(text.split())
        n_grams = n_tokens + max(n_tokens - 1, 0)
        assert sum(fv.values) == n_grams


# --- score -------------------------------------------------------------------


def zero_model(bias=0.0):
    return fl.LinearModel(np.zeros(fl.N_BUCKETS), bias)


def test_score_zero_model_is_half():
    model = zero_model()
    for text in ("", "anything at all", "Sad sad"):
        assert fl.score(model, text) == 0.5


def test_score_bias_ten_closed_form():
    model = zero_model(bias=10.0)
    assert fl.score(model, "") == pytest.approx(1.0 / (1.0 + math.exp(-10)), abs=1e-15)
    assert round(fl.score(model, ""), 5) == 0.99995


def test_score_monotone_in_positive_weight_feature():
    model = zero_model()
    base = fl.score(model, "sad")
    bucket = fl.featurize("sad").indices[0]
    model.weights[bucket] = 0.7
    assert fl.score(model, "sad") > base
    assert fl.score(model, "sad day") > fl.score(model, "day")


def test_score_matches_oracle_sigmoid_of_margin():
    rng = random.Random(4)
    model = zero_model(bias=rng.uniform(-1, 1))
    words = "alpha beta gamma delta".split()
    for w in words:
        model.weights[fl.featurize(w).indices[0]] = rng.uniform(-2, 2)
    for _ in range(50):
        text = " ".join(rng.choice(words) for _ in range(rng.randrange(1, 8)))
        fv = fl.featurize(text)
        z = model.bias + sum(model.weights[i] * v for i, v in zip(fv.indices, fv.values))
        assert fl.score(model, text) == pytest.approx(oracles.sigmoid(z), abs=1e-15)


# --- training ----------------------------------------------------------------


def test_train_separable_toy_reaches_accuracy_one():
    examples = toy_examples()
    model, _ = fl.train_linear(examples)
    correct = sum(1 for ex in examples if (fl.score(model, ex.text) >= 0.5) == bool(ex.label))
    assert correct == len(examples)
    curve = model.training_meta.loss_curve
    assert len(curve) == fl.TrainConfig().epochs + 1
    assert all(b <= a + fl.LOSS_TOLERANCE for a, b in zip(curve, curve[1:]))
    assert curve[-1] < curve[0]


def test_train_bit_identical_under_same_seed():
    examples = toy_examples() + [LabeledExample("rain again", 0), LabeledExample("so tired of this", 1)]
    a, _ = fl.train_linear(examples, fl.TrainConfig(epochs=3, seed=9))
    b, _ = fl.train_linear(examples, fl.TrainConfig(epochs=3, seed=9))
    assert np.array_equal(a.weights, b.weights)
    assert a.bias == b.bias
    c, _ = fl.train_linear(examples, fl.TrainConfig(epochs=3, seed=10))
    assert not np.array_equal(a.weights, c.weights)


def test_train_rejects_single_class_and_empty():
    with pytest.raises(TrainingError):
        fl.train_linear([LabeledExample("x", 1)] * 4)
    with pytest.raises(TrainingError):
        fl.train_linear([])


def test_train_validation_accuracy_reported():
    examples = toy_examples()
    val = [LabeledExample("good day", 0), LabeledExample("feel worthless", 1)]
    model, acc = fl.train_linear(examples, validation=val)
    assert acc == 1.0
    _, none_acc = fl.train_linear(examples)
    assert none_acc is None
    with pytest.raises(TrainingError):
        fl.train_linear(examples, validation=[])


def test_train_nan_loss_aborts_naming_epoch(monkeypatch):
    values = iter([0.7, float("nan")])
    monkeypatch.setattr(fl, "_mean_bce", lambda *a: next(values))
    with pytest.raises(TrainingError, match="epoch 1"):
        fl.train_linear(toy_examples(), fl.TrainConfig(epochs=1, batch_size=200))


def test_train_loss_rise_logged_not_fatal(monkeypatch, caplog):
    values = iter([0.5, 0.7])
    monkeypatch.setattr(fl, "_mean_bce", lambda *a: next(values))
    with caplog.at_level(logging.WARNING, logger="bdirank.filter_linear"):
        fl.train_linear(toy_examples(), fl.TrainConfig(epochs=1, batch_size=200))
    assert any("loss rose" in r.message for r in caplog.records)


def test_training_gradient_matches_central_differences():
    """One full-batch step from zero, then one more: (w_k - w_{k+1}) / lr
    recovers the analytic batch gradient at two points, compared against
    central finite differences of an independently coded logistic loss."""
    rng = random.Random(21)
    words = "sun rain sad glad tired calm dark light".split()
    examples = [
        LabeledExample(" ".join(rng.choice(words) for _ in range(rng.randrange(1, 6))), i % 3 == 0)
        for i in range(12)
    ]
    examples = [LabeledExample(e.text, int(e.label)) for e in examples]
    lr = 0.1
    one, _ = fl.train_linear(examples, fl.TrainConfig(epochs=1, learning_rate=lr, batch_size=64, seed=1))
    two, _ = fl.train_linear(examples, fl.TrainConfig(epochs=2, learning_rate=lr, batch_size=64, seed=1))

    batch = [(dict(zip(fv.indices, fv.values)), ex.label)
             for ex in examples
             for fv in [fl.featurize(ex.text)]]
    active = sorted({i for feats, _ in batch for i in feats})

    def loss_at(point):
        weights = {i: point[i] for i in active}
        return oracles.logistic_loss(weights, point["bias"], batch)

    for probe, after in ((zero_model(), one), (one, two)):
        analytic = {i: (probe.weights[i] - after.weights[i]) / lr for i in active}
        analytic["bias"] = (probe.bias - after.bias) / lr
        point = {i: float(probe.weights[i]) for i in active}
        point["bias"] = float(probe.bias)
        numeric = oracles.numeric_gradient(loss_at, point, step=1e-5)
        for key in analytic:
            denom = max(abs(analytic[key]), abs(numeric[key]), 1e-3)
            assert abs(analytic[key] - numeric[key]) / denom < 1e-6, key


# --- filtering ---------------------------------------------------------------


def three_score_model():
    """Weights crafted so alpha/bravo/charlie score 0.2 / 0.6 / 0.9."""
    model = zero_model()
    buckets = [fl.featurize(w).indices[0] for w in ("alpha", "bravo", "charlie")]
    assert len(set(buckets)) == 3
    for bucket, p in zip(buckets, (0.2, 0.6, 0.9)):
        model.weights[bucket] = math.log(p / (1 - p))
    return model


def test_filter_known_scores_threshold_half():
    model = three_score_model()
    stream = [rec("s1", "alpha"), rec("s2", "bravo"), rec("s3", "charlie")]
    report = fl.FilterReport()
    out = list(fl.filter_pass1(model, iter(stream), 0.5, report=report))
    assert [r.sentence_id for r in out] == ["s2", "s3"]
    assert report.input_count == 3 and report.output_count == 2


def test_filter_threshold_extremes():
    model = three_score_model()
    stream = [rec(f"s{i}", w) for i, w in enumerate(["alpha", "bravo", "charlie"] * 4)]
    report = fl.FilterReport()
    out = list(fl.filter_pass1(model, iter(stream), 0.0, report=report))
    assert len(out) == len(stream)
    assert report.output_count == report.input_count == len(stream)
    out = list(fl.filter_pass1(model, iter(stream), 1.0))
    assert out == []


def test_filter_is_order_preserving_subsequence():
    rng = random.Random(8)
    model = zero_model(bias=0.0)
    words = "alpha bravo charlie delta echo".split()
    for w in words:
        model.weights[fl.featurize(w).indices[0]] = rng.uniform(-3, 3)
    for trial in range(10):
        stream = [rec(f"t{trial}_{i}", rng.choice(words)) for i in range(rng.randrange(0, 700))]
        threshold = rng.random()
        out = list(fl.filter_pass1(model, iter(stream), threshold))
        ids = [r.sentence_id for r in stream]
        kept = [r.sentence_id for r in out]
        positions = [ids.index(k) for k in kept]
        assert positions == sorted(positions)
        assert set(kept) <= set(ids)
        expected = [r.sentence_id for r in stream if fl.score(model, r.text) >= threshold]
        assert kept == expected


def test_filter_identical_across_worker_counts():
    rng = random.Random(9)
    examples = toy_examples()
    model, _ = fl.train_linear(examples, fl.TrainConfig(epochs=5))
    words = "good day feel worthless rain sun".split()
    stream = [
        rec(f"w{i}", " ".join(rng.choice(words) for _ in range(rng.randrange(1, 7))))
        for i in range(5000)
    ]
    results = {}
    for workers in (1, 4, 16):
        report = fl.FilterReport()
        out = list(fl.filter_pass1(model, iter(stream), 0.5, workers=workers, report=report))
        results[workers] = ([r.sentence_id for r in out], report.input_count, report.output_count)
    assert results[1] == results[4] == results[16]
    assert results[1][1] == 5000


def test_filter_rejects_bad_arguments():
    model = zero_model()
    with pytest.raises(ValueError):
        list(fl.filter_pass1(model, iter([]), -0.1))
    with pytest.raises(ValueError):
        list(fl.filter_pass1(model, iter([]), 1.5))
    with pytest.raises(ValueError):
        list(fl.filter_pass1(model, iter([]), 0.5, workers=0))


# --- persistence -------------------------------------------------------------


def test_model_round_trip_exact_at_f32():
    model, _ = fl.train_linear(toy_examples(), fl.TrainConfig(epochs=2))
    buf = io.BytesIO()
    fl.save_model(model, buf)
    buf.seek(0)
    loaded = fl.load_model(buf)
    assert np.array_equal(loaded.weights, model.weights.astype("<f4").astype(np.float64))
    assert loaded.bias == np.float32(model.bias)
    # Size is fixed: magic + u16 + u32 + 2^18 f32 + f32.
    assert len(buf.getvalue()) == 4 + 2 + 4 + 4 * fl.N_BUCKETS + 4


def test_load_model_rejects_corrupt_files():
    model = zero_model()
    buf = io.BytesIO()
    fl.save_model(model, buf)
    data = buf.getvalue()

    with pytest.raises(DataError, match="magic"):
        fl.load_model(io.BytesIO(b"XXXX" + data[4:]))
    with pytest.raises(DataError, match="version"):
        fl.load_model(io.BytesIO(data[:4] + b"\x09\x00" + data[6:]))
    with pytest.raises(DataError, match="bucket"):
        fl.load_model(io.BytesIO(data[:6] + b"\x00\x01\x00\x00" + data[10:]))
    with pytest.raises(DataError, match="truncated"):
        fl.load_model(io.BytesIO(data[: len(data) // 2]))
    with pytest.raises(DataError, match="truncated"):
        fl.load_model(io.BytesIO(data[:-2]))


# --- external score files ------------------------------------------------------


def test_load_score_file_basic_and_blank_lines():
    text = "u1_0_0\t0.25\n\nu1_0_1\t0.75\n"
    scores = fl.load_score_file(io.StringIO(text))
    assert scores == {"u1_0_0": 0.25, "u1_0_1": 0.75}


def test_load_score_file_errors_name_lines():
    with pytest.raises(DataError, match="line 2"):
        fl.load_score_file(io.StringIO("a\t0.5\nmalformed line\n"))
    with pytest.raises(DataError, match="line 1"):
        fl.load_score_file(io.StringIO("a\tnot_a_number\n"))
    with pytest.raises(DataError, match="line 3"):
        fl.load_score_file(io.StringIO("a\t0.5\nb\t0.5\na\t0.9\n"))


def test_filter_by_scores_applies_threshold_and_reports():
    scores = {"s1": 0.2, "s2": 0.6, "s3": 0.9}
    stream = [rec("s1", "x"), rec("s2", "y"), rec("s3", "z")]
    report = fl.FilterReport()
    out = list(fl.filter_by_scores(scores, iter(stream), 0.5, report=report))
    assert [r.sentence_id for r in out] == ["s2", "s3"]
    assert (report.input_count, report.output_count) == (3, 2)


def test_filter_by_scores_missing_id_is_data_error():
    stream = [rec("s1", "x"), rec("unknown", "y")]
    with pytest.raises(DataError, match="unknown"):
        list(fl.filter_by_scores({"s1": 0.9}, iter(stream), 0.5))
