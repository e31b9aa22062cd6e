"""Geologic-map digitization, QA benchmark generation, and agent evaluation."""

__version__ = "0.1.0"
