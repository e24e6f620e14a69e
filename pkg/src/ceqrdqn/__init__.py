"""Calibrated evidential quantile regression for deep Q networks (CEQR-DQN)."""

__version__ = "0.1.0"
