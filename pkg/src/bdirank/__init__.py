"""Depression-symptom sentence retrieval pipeline.

Filters a TREC-formatted social-media sentence corpus through two trainable
relevance filters, ranks the survivors against 21 BDI symptom queries by
embedding cosine similarity, and scores the resulting run files against
multi-assessor relevance judgments.
"""

__version__ = "0.1.0"
