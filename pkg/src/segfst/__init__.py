"""Segmental sequence models and CTC over weighted FST search spaces."""

__version__ = "0.1.0"
