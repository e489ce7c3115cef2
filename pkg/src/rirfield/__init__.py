"""Retrieval-augmented neural acoustic fields for room impulse response estimation."""

__version__ = "0.1.0"
