"""Segment-level speech BERT prosody embeddings for Transformer TTS."""

__version__ = "0.1.0"
