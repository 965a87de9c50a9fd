"""Tabular GRPO search agent with entropy-based advantage shaping and selective upweighting."""

__version__ = "0.1.0"
