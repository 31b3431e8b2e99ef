"""Hierarchical offline RL for cross-channel constrained bidding."""

__version__ = "0.1.0"
