"""Offline hyperparameter selection benchmark: desk-scale envs, offline RL, FQE and ranking metrics."""

__version__ = "0.1.0"
