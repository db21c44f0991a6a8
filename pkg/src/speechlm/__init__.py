"""Desk-scale SpeechLM: unit tokenizers, a two-stack encoder, UMLM + UCTC pre-training."""

__version__ = "0.1.0"
