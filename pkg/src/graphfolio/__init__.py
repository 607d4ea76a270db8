"""Volatility-network portfolio construction with graph attention allocation."""

__version__ = "0.1.0"
