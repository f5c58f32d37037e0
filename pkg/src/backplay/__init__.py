"""Backward-curriculum RL on grid mazes, baselines, and chain analysis."""

__version__ = "0.1.0"
