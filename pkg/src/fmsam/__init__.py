"""Factorised multi-head memory retrieval for human motion prediction."""

__version__ = "0.1.0"
