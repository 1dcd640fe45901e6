"""Hierarchical differentially private tabulation with top-down post-processing."""

__version__ = "0.1.0"
