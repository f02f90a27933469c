"""Anchor-guided prompt learning lab on a synthetic dual-encoder world."""

__version__ = "0.1.0"
