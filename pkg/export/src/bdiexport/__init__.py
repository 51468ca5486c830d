"""Transformer sentence embedding exporter for the bdirank pipeline."""

from .errors import ExportError, UsageError
from .export import ExportJob, ExportSummary, export_embeddings, read_sentences

__all__ = [
    "ExportError",
    "ExportJob",
    "ExportSummary",
    "UsageError",
    "export_embeddings",
    "read_sentences",
]

__version__ = "0.1.0"
