"""Stage-2 filter: single-layer unidirectional LSTM trained from scratch in numpy.

Architecture: trained token embeddings (dim 64) -> LSTM with 128 hidden units
-> dropout 0.2 on the final hidden state (training only) -> fully connected
layer -> sigmoid. Sequences are truncated to a maximum length and padded at
the tail; the readout is the hidden state at the last real token, so padding
never influences the output.

Everything runs in float64. Training is single-threaded and bit-deterministic
under a fixed seed (initialization, batch order, and dropout masks all come
from one seeded generator in a fixed call order).
"""

from __future__ import annotations

import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from .corpus import LabeledExample, SentenceRecord
from .errors import DataError, TrainingError
from .filter_linear import FilterReport, _filter_stream
from .text import tokenize

logger = logging.getLogger(__name__)

PAD_ID = 0
OOV_ID = 1
_PAD_TOKEN = "<pad>"  # never collides: real tokens are purely alphanumeric
_OOV_TOKEN = "<oov>"

_MAGIC = b"BDLS"
_VERSION = 1

# Serialization order of the parameter tensors (after the vocab table).
_TENSOR_ORDER = (
    "embedding",
    "W_i", "W_f", "W_o", "W_g",
    "U_i", "U_f", "U_o", "U_g",
    "b_i", "b_f", "b_o", "b_g",
    "fc_w", "fc_b",
)


@dataclass
class Vocabulary:
    id_to_token: list[str]
    token_to_id: dict[str, int] = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.id_to_token)


def build_vocabulary(texts: Iterable[str], max_size: int = 10_000) -> Vocabulary:
    """Most frequent tokens first, ties by token string; ids 0 and 1 reserved."""
    if max_size < 3:
        raise ValueError("max_size must leave room for at least one real token")
    freq = Counter()
    for text in texts:
        freq.update(tokenize(text))
    ranked = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))
    id_to_token = [_PAD_TOKEN, _OOV_TOKEN] + [tok for tok, _ in ranked[: max_size - 2]]
    token_to_id = {tok: i for i, tok in enumerate(id_to_token)}
    return Vocabulary(id_to_token, token_to_id)


def encode(vocab: Vocabulary, text: str, max_len: int) -> list[int]:
    lookup = vocab.token_to_id
    return [lookup.get(tok, OOV_ID) for tok in tokenize(text)][:max_len]


@dataclass
class LstmConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.05
    max_len: int = 64
    embed_dim: int = 64
    hidden: int = 128
    dropout: float = 0.2
    clip_norm: float = 5.0
    seed: int = 42
    vocab_size: int = 10_000


@dataclass
class LstmModel:
    vocab: Vocabulary
    params: dict[str, np.ndarray]  # keys as in _TENSOR_ORDER, float64
    max_len: int
    dropout: float
    seed: int

    @property
    def hidden(self) -> int:
        return self.params["W_i"].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.params["W_i"].shape[1]


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    validation_accuracy: float


def init_params(
    vocab_size: int, embed_dim: int, hidden: int, rng: np.random.Generator
) -> dict[str, np.ndarray]:
    """Fan-scaled uniform weights, zero biases except forget bias 1.0
    (keeps early cells open so gradients reach the sequence start)."""

    def u(fan_in: int, fan_out: int, *shape: int) -> np.ndarray:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    params = {"embedding": rng.uniform(-0.1, 0.1, size=(vocab_size, embed_dim))}
    params["embedding"][PAD_ID] = 0.0
    for gate in "ifog":
        params[f"W_{gate}"] = u(embed_dim, hidden, hidden, embed_dim)
        params[f"U_{gate}"] = u(hidden, hidden, hidden, hidden)
        params[f"b_{gate}"] = np.zeros(hidden)
    params["b_f"] = np.ones(hidden)
    params["fc_w"] = u(hidden, 1, hidden)
    params["fc_b"] = np.zeros(1)
    return params


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def lstm_forward(
    model: LstmModel,
    token_ids: list[int],
    mode: str = "infer",
    rng: np.random.Generator | None = None,
):
    """Probability for one sequence; single-example reference path.

    Infer mode returns the probability alone and is dropout-free. Train mode
    applies an inverted-scaling dropout mask (drawn from ``rng``) to the final
    hidden state and returns (probability, per-step gate activations). Training
    and bulk filtering use the batched implementation below.
    """
    if mode not in ("infer", "train"):
        raise ValueError(f"mode must be 'infer' or 'train', got {mode!r}")
    p = model.params
    vocab_size = p["embedding"].shape[0]
    hidden = model.hidden
    h = np.zeros(hidden)
    c = np.zeros(hidden)
    cache = [] if mode == "train" else None
    for tid in token_ids:
        if not 0 <= tid < vocab_size:
            raise DataError(f"token id {tid} outside vocabulary of size {vocab_size}")
        x = p["embedding"][tid]
        i = _sigmoid(p["W_i"] @ x + p["U_i"] @ h + p["b_i"])
        f = _sigmoid(p["W_f"] @ x + p["U_f"] @ h + p["b_f"])
        o = _sigmoid(p["W_o"] @ x + p["U_o"] @ h + p["b_o"])
        g = np.tanh(p["W_g"] @ x + p["U_g"] @ h + p["b_g"])
        c = f * c + i * g
        h = o * np.tanh(c)
        if cache is not None:
            cache.append({"i": i, "f": f, "o": o, "g": g, "c": c, "h": h})
    h_out = h
    if mode == "train" and model.dropout > 0.0:
        if rng is None:
            raise ValueError("train mode with nonzero dropout requires an rng")
        keep = 1.0 - model.dropout
        h_out = h * ((rng.random(hidden) < keep) / keep)
    z = float(p["fc_w"] @ h_out + p["fc_b"][0])
    prob = 1.0 / (1.0 + math.exp(-z))
    if mode == "train":
        return prob, cache
    return prob


def _pack_batch(sequences: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Trailing-pad to the longest sequence in the batch; (ids, lengths)."""
    n = len(sequences)
    t = max((len(s) for s in sequences), default=0)
    t = max(t, 1)  # keep shapes valid when every sequence is empty
    ids = np.full((n, t), PAD_ID, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    for r, seq in enumerate(sequences):
        ids[r, : len(seq)] = seq
        lengths[r] = len(seq)
    return ids, lengths


def _forward_batch(
    params: dict[str, np.ndarray],
    ids: np.ndarray,
    lengths: np.ndarray,
    *,
    keep_cache: bool = False,
) -> tuple[np.ndarray, list | None]:
    """Final hidden states (B, H) with masked recurrence; optional BPTT cache.

    Padded timesteps compute gate activations but the mask blend discards
    them, so each row's state is exactly the state after its own last real
    token.
    """
    vocab_size = params["embedding"].shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise DataError(f"token id outside vocabulary of size {vocab_size}")
    b, t = ids.shape
    hidden = params["W_i"].shape[0]
    h = np.zeros((b, hidden))
    c = np.zeros((b, hidden))
    mask = (np.arange(t)[None, :] < lengths[:, None]).astype(np.float64)
    cache = [] if keep_cache else None
    for step in range(t):
        x = params["embedding"][ids[:, step]]
        i = _sigmoid(x @ params["W_i"].T + h @ params["U_i"].T + params["b_i"])
        f = _sigmoid(x @ params["W_f"].T + h @ params["U_f"].T + params["b_f"])
        o = _sigmoid(x @ params["W_o"].T + h @ params["U_o"].T + params["b_o"])
        g = np.tanh(x @ params["W_g"].T + h @ params["U_g"].T + params["b_g"])
        c_new = f * c + i * g
        h_new = o * np.tanh(c_new)
        m = mask[:, step : step + 1]
        if cache is not None:
            cache.append((ids[:, step], x, h, c, i, f, o, g, c_new, m))
        c = m * c_new + (1.0 - m) * c
        h = m * h_new + (1.0 - m) * h
    return h, cache


def _backward_batch(
    params: dict[str, np.ndarray],
    cache: list,
    d_h_final: np.ndarray,
) -> dict[str, np.ndarray]:
    """Gradients of every parameter given d(loss)/d(final hidden state)."""
    grads = {k: np.zeros_like(v) for k, v in params.items() if k not in ("fc_w", "fc_b")}
    dh = d_h_final
    dc = np.zeros_like(dh)
    for ids_t, x, h_prev, c_prev, i, f, o, g, c_new, m in reversed(cache):
        dh_new = dh * m
        dc_new = dc * m
        dh_pass = dh * (1.0 - m)
        dc_pass = dc * (1.0 - m)

        tanh_c = np.tanh(c_new)
        do = dh_new * tanh_c
        dc_new = dc_new + dh_new * o * (1.0 - tanh_c**2)
        di = dc_new * g
        df = dc_new * c_prev
        dg = dc_new * i
        dc = dc_new * f + dc_pass

        da_i = di * i * (1.0 - i)
        da_f = df * f * (1.0 - f)
        da_o = do * o * (1.0 - o)
        da_g = dg * (1.0 - g**2)

        dx = np.zeros_like(x)
        dh = dh_pass
        for gate, da in (("i", da_i), ("f", da_f), ("o", da_o), ("g", da_g)):
            grads[f"W_{gate}"] += da.T @ x
            grads[f"U_{gate}"] += da.T @ h_prev
            grads[f"b_{gate}"] += da.sum(axis=0)
            dx += da @ params[f"W_{gate}"]
            dh = dh + da @ params[f"U_{gate}"]
        np.add.at(grads["embedding"], ids_t, dx)
    return grads


def _batch_loss_and_grads(
    params: dict[str, np.ndarray],
    ids: np.ndarray,
    lengths: np.ndarray,
    labels: np.ndarray,
    drop_mask: np.ndarray | None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean BCE over the batch plus gradients. drop_mask is the pre-scaled
    dropout mask for the final hidden state (None disables dropout)."""
    h, cache = _forward_batch(params, ids, lengths, keep_cache=True)
    h_out = h * drop_mask if drop_mask is not None else h
    z = h_out @ params["fc_w"] + params["fc_b"][0]
    loss = float(np.mean(np.logaddexp(0.0, z) - labels * z))

    b = len(labels)
    dz = (_sigmoid(z) - labels) / b
    grads = {"fc_w": h_out.T @ dz, "fc_b": np.array([dz.sum()])}
    dh_out = np.outer(dz, params["fc_w"])
    dh = dh_out * drop_mask if drop_mask is not None else dh_out
    grads.update(_backward_batch(params, cache, dh))
    return loss, grads


def _clip_global_norm(grads: dict[str, np.ndarray], clip: float) -> None:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > clip:
        scale = clip / total
        for g in grads.values():
            g *= scale


def _accuracy(params: dict[str, np.ndarray], encoded: list[list[int]], labels: list[int]) -> float:
    correct = 0
    for start in range(0, len(encoded), 256):
        chunk = encoded[start : start + 256]
        ids, lengths = _pack_batch(chunk)
        h, _ = _forward_batch(params, ids, lengths)
        z = h @ params["fc_w"] + params["fc_b"][0]
        pred = z >= 0.0  # sigmoid(z) >= 0.5
        correct += int(np.sum(pred == np.asarray(labels[start : start + 256], dtype=bool)))
    return correct / len(encoded)


def lstm_train(
    train: list[LabeledExample],
    validation: list[LabeledExample],
    config: LstmConfig | None = None,
) -> tuple[LstmModel, list[EpochStats]]:
    """Train with BPTT + SGD; returns the best-validation-accuracy snapshot
    and the per-epoch loss/accuracy log."""
    if config is None:
        config = LstmConfig()
    if not train:
        raise TrainingError("training set is empty")
    if not validation:
        raise TrainingError("validation set is empty")
    if {ex.label for ex in train} != {0, 1}:
        raise TrainingError("training set must contain both classes")

    vocab = build_vocabulary((ex.text for ex in train), config.vocab_size)
    if vocab.size <= 2:
        raise TrainingError("empty vocabulary: no tokens in the training texts")

    enc_train = [encode(vocab, ex.text, config.max_len) for ex in train]
    y_train = np.asarray([ex.label for ex in train], dtype=np.float64)
    enc_val = [encode(vocab, ex.text, config.max_len) for ex in validation]
    y_val = [ex.label for ex in validation]

    rng = np.random.default_rng(config.seed)
    params = init_params(vocab.size, config.embed_dim, config.hidden, rng)
    keep = 1.0 - config.dropout

    best_params = {k: v.copy() for k, v in params.items()}
    best_acc = -1.0
    history: list[EpochStats] = []
    n = len(train)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        for batch_no, start in enumerate(range(0, n, config.batch_size), start=1):
            rows = order[start : start + config.batch_size]
            ids, lengths = _pack_batch([enc_train[r] for r in rows])
            if keep < 1.0:
                drop = (rng.random((len(rows), config.hidden)) < keep) / keep
            else:
                drop = None
            loss, grads = _batch_loss_and_grads(params, ids, lengths, y_train[rows], drop)
            if math.isnan(loss):
                raise TrainingError(f"loss diverged to NaN at epoch {epoch}, batch {batch_no}")
            loss_sum += loss * len(rows)
            _clip_global_norm(grads, config.clip_norm)
            for k, g in grads.items():
                params[k] -= config.learning_rate * g
        val_acc = _accuracy(params, enc_val, y_val)
        history.append(EpochStats(epoch, loss_sum / n, val_acc))
        logger.info("epoch %d: train loss %.6f, validation accuracy %.4f",
                    epoch, loss_sum / n, val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            best_params = {k: v.copy() for k, v in params.items()}

    model = LstmModel(vocab, best_params, config.max_len, config.dropout, config.seed)
    return model, history


def grad_check(
    seed: int,
    *,
    vocab_size: int = 6,
    embed_dim: int = 4,
    hidden: int = 3,
    seq_len: int = 5,
    batch: int = 4,
    step: float = 1e-6,
) -> float:
    """Max relative error between analytic gradients and central finite
    differences on a tiny random model, dropout disabled.

    The per-entry denominator has a 1e-4 floor: entries below that magnitude
    sit under the finite-difference noise floor (~1e-8 for a float64 loss at
    this step), so they are held to 1e-8 absolute agreement instead, which
    still exposes a dropped or mis-signed term of any consequential size.
    """
    rng = np.random.default_rng(seed)
    params = init_params(vocab_size, embed_dim, hidden, rng)
    # Perturb away from the all-zeros biases so no gradient path is degenerate.
    for key in ("b_i", "b_f", "b_o", "b_g", "fc_b"):
        params[key] = params[key] + rng.uniform(-0.2, 0.2, size=params[key].shape)
    params["embedding"] = rng.uniform(-0.5, 0.5, size=(vocab_size, embed_dim))

    lengths = rng.integers(1, seq_len + 1, size=batch)
    ids = np.zeros((batch, seq_len), dtype=np.int64)
    for r in range(batch):
        ids[r, : lengths[r]] = rng.integers(0, vocab_size, size=lengths[r])
    labels = rng.integers(0, 2, size=batch).astype(np.float64)

    def loss_of(p: dict[str, np.ndarray]) -> float:
        h, _ = _forward_batch(p, ids, lengths)
        z = h @ p["fc_w"] + p["fc_b"][0]
        return float(np.mean(np.logaddexp(0.0, z) - labels * z))

    _, analytic = _batch_loss_and_grads(params, ids, lengths, labels, None)

    worst = 0.0
    for key in _TENSOR_ORDER:
        tensor = params[key]
        flat = tensor.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = loss_of(params)
            flat[j] = orig - step
            down = loss_of(params)
            flat[j] = orig
            numeric = (up - down) / (2.0 * step)
            a = float(analytic[key].reshape(-1)[j])
            denom = max(abs(a), abs(numeric), 1e-4)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


def score_batch(model: LstmModel, texts: list[str]) -> np.ndarray:
    """Inference-mode probabilities for a block of texts (dropout-free)."""
    encoded = [encode(model.vocab, t, model.max_len) for t in texts]
    ids, lengths = _pack_batch(encoded)
    h, _ = _forward_batch(model.params, ids, lengths)
    z = h @ model.params["fc_w"] + model.params["fc_b"][0]
    return _sigmoid(z)


def filter_pass2(
    model: LstmModel,
    sentences: Iterable[SentenceRecord],
    threshold: float = 0.5,
    *,
    workers: int = 1,
    report: FilterReport | None = None,
) -> Iterator[SentenceRecord]:
    """Keep sentences whose inference-mode probability is >= threshold,
    preserving input order; same contract as filter_pass1."""
    if report is None:
        report = FilterReport()
    return _filter_stream(
        lambda texts: score_batch(model, texts), sentences, threshold, report, workers
    )


def _write_tensor(stream: BinaryIO, tensor: np.ndarray) -> None:
    stream.write(struct.pack("<B", tensor.ndim))
    for dim in tensor.shape:
        stream.write(struct.pack("<I", dim))
    stream.write(tensor.astype("<f4").tobytes())


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise DataError(f"truncated file while reading {what}")
    return data


def _read_tensor(stream: BinaryIO, name: str) -> np.ndarray:
    (ndim,) = struct.unpack("<B", _read_exact(stream, 1, f"{name} rank"))
    shape = tuple(
        struct.unpack("<I", _read_exact(stream, 4, f"{name} shape"))[0] for _ in range(ndim)
    )
    count = int(np.prod(shape)) if shape else 1
    raw = _read_exact(stream, 4 * count, f"{name} data")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)


def save_model(model: LstmModel, stream: BinaryIO) -> None:
    stream.write(_MAGIC)
    stream.write(
        struct.pack(
            "<HIIIIfQ",
            _VERSION,
            model.max_len,
            model.hidden,
            model.embed_dim,
            model.vocab.size,
            model.dropout,
            model.seed,
        )
    )
    for token in model.vocab.id_to_token:
        raw = token.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise DataError(f"token too long to serialize: {token[:40]!r}...")
        stream.write(struct.pack("<H", len(raw)))
        stream.write(raw)
    for name in _TENSOR_ORDER:
        _write_tensor(stream, model.params[name])


def load_model(stream: BinaryIO) -> LstmModel:
    magic = stream.read(4)
    if magic != _MAGIC:
        raise DataError(f"bad magic {magic!r}; expected {_MAGIC!r}")
    header = _read_exact(stream, struct.calcsize("<HIIIIfQ"), "header")
    version, max_len, hidden, embed_dim, vocab_size, dropout, seed = struct.unpack(
        "<HIIIIfQ", header
    )
    if version != _VERSION:
        raise DataError(f"unsupported version {version}")
    id_to_token: list[str] = []
    for i in range(vocab_size):
        (length,) = struct.unpack("<H", _read_exact(stream, 2, f"vocab entry {i}"))
        id_to_token.append(_read_exact(stream, length, f"vocab entry {i}").decode("utf-8"))
    vocab = Vocabulary(id_to_token, {tok: i for i, tok in enumerate(id_to_token)})
    params = {name: _read_tensor(stream, name) for name in _TENSOR_ORDER}
    expected = {
        "embedding": (vocab_size, embed_dim),
        "fc_w": (hidden,),
        "fc_b": (1,),
    }
    for gate in "ifog":
        expected[f"W_{gate}"] = (hidden, embed_dim)
        expected[f"U_{gate}"] = (hidden, hidden)
        expected[f"b_{gate}"] = (hidden,)
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise DataError(f"tensor {name} has shape {params[name].shape}, expected {shape}")
    return LstmModel(vocab, params, max_len, float(dropout), seed)
