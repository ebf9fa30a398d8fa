"""Spoken topic identification from audio, text, and both."""

__version__ = "0.1.0"
