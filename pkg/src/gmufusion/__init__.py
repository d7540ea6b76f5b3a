"""Gated multimodal units, competing fusion strategies, and their evaluation."""

__version__ = "0.1.0"
