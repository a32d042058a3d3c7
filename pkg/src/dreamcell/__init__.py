"""Desk-scale world-model agent on a deterministic crafting grid-world."""

__version__ = "0.1.0"
