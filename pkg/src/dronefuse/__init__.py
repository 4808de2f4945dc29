"""Dual-backbone drone detection: fusion network, evaluation and post-processing."""

__version__ = "0.1.0"
