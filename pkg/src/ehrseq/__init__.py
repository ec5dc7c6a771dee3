"""Schema-agnostic EHR event sequences: ingestion, tokenization, models, experiments."""

__version__ = "0.1.0"
