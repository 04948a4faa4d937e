"""Sybil-defense simulator: ERGO admission control, GoodJEst estimation and baselines."""

__version__ = "0.1.0"
