"""Continual source-free domain adaptation with pruning-derived parameter masks."""

__version__ = "0.1.0"
