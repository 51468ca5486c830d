import io
import pathlib

import pytest

DEMO = pathlib.Path(__file__).resolve().parent.parent / "demo"
GOLDEN = pathlib.Path(__file__).resolve().parent / "data" / "golden"


@pytest.fixture
def demo_dir():
    return DEMO


@pytest.fixture
def golden_dir():
    return GOLDEN


@pytest.fixture
def trec_bytes():
    """A small well-formed corpus as raw bytes."""

    def build(records):
        out = io.BytesIO()
        for doc_id, text in records:
            out.write(b"<DOC>\n<DOCNO>" + doc_id.encode() + b"</DOCNO>\n<TEXT>")
            out.write(text.encode())
            out.write(b"</TEXT>\n</DOC>\n")
        return out.getvalue()

    return build
