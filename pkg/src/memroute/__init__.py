"""Consolidation-aware routing over working, episodic and semantic memory."""

__version__ = "0.1.0"
