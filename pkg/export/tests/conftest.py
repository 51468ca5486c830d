"""Shared fixtures: a tiny randomly initialized encoder saved to disk.

Tests never touch the network; the hub is forced offline so a bad model
name fails fast instead of attempting a download.
"""

import os
import struct
from pathlib import Path

os.environ.setdefault("HF_HUB_OFFLINE", "1")

import numpy as np
import pytest
import torch
from transformers import BertConfig, BertModel, BertTokenizerFast

VOCAB = [
    "[PAD]",
    "[UNK]",
    "[CLS]",
    "[SEP]",
    "[MASK]",
    "i",
    "feel",
    "sad",
    "happy",
    "tired",
    "sleep",
    "today",
    "fine",
    "cannot",
    "empty",
    "nothing",
    "again",
    "##ing",
    "##ness",
]

HIDDEN_SIZE = 32


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    directory = tmp_path_factory.mktemp("tiny-encoder")
    vocab_file = directory / "vocab.txt"
    vocab_file.write_text("\n".join(VOCAB) + "\n", encoding="utf-8")
    torch.manual_seed(0)
    config = BertConfig(
        vocab_size=len(VOCAB),
        hidden_size=HIDDEN_SIZE,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=64,
        max_position_embeddings=64,
    )
    BertModel(config).save_pretrained(directory)
    tokenizer = BertTokenizerFast(vocab_file=str(vocab_file), do_lower_case=True)
    tokenizer.save_pretrained(directory)
    return directory


def write_input(path: Path, rows) -> Path:
    path.write_text(
        "".join(f"{sid}\t{text}\n" for sid, text in rows), encoding="utf-8"
    )
    return path


def read_bdem(path):
    """Struct-level reader used to inspect what the writer produced."""
    data = Path(path).read_bytes()
    assert data[:4] == b"BDEM", "bad magic"
    version, dimension, count = struct.unpack_from("<HIQ", data, 4)
    offset = 18
    records = []
    for _ in range(count):
        (id_length,) = struct.unpack_from("<H", data, offset)
        offset += 2
        sentence_id = data[offset : offset + id_length].decode("utf-8")
        offset += id_length
        vector = np.frombuffer(data, dtype="<f4", count=dimension, offset=offset).copy()
        offset += 4 * dimension
        records.append((sentence_id, vector))
    assert offset == len(data), "trailing bytes after the last record"
    return version, dimension, records
