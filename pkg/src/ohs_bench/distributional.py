"""Categorical value distributions on a fixed atom grid.

Provides the Bellman-target projection, the cross-entropy divergence used to
fit distributional critics, and the squared-error loss for scalar critics.
All functions accept a leading batch dimension.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AtomGrid:
    v_min: float
    v_max: float
    n_atoms: int = 51

    def __post_init__(self):
        if not self.v_min < self.v_max:
            raise ValueError(f"v_min ({self.v_min}) must be below v_max ({self.v_max})")
        if self.n_atoms < 2:
            raise ValueError("need at least two atoms")

    @property
    def atoms(self) -> np.ndarray:
        return np.linspace(self.v_min, self.v_max, self.n_atoms)

    @property
    def delta(self) -> float:
        return (self.v_max - self.v_min) / (self.n_atoms - 1)

    @classmethod
    def for_return_range(cls, lo: float, hi: float, n_atoms: int = 51, margin: float = 0.1):
        """Grid covering ``[lo, hi]`` widened by ``margin`` of the range on each side."""
        span = max(hi - lo, 1e-6)
        return cls(lo - margin * span, hi + margin * span, n_atoms)


@dataclass
class CategoricalDistribution:
    grid: AtomGrid
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape[-1] != self.grid.n_atoms:
            raise ValueError("probability vector length differs from atom count")
        if np.any(self.probs < 0) or np.any(np.abs(self.probs.sum(axis=-1) - 1.0) > 1e-6):
            raise ValueError("probabilities must be non-negative and sum to 1")

    def mean(self):
        return dist_mean(self)


def dist_mean(dist: CategoricalDistribution):
    return dist.probs @ dist.grid.atoms


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def project_probs(grid: AtomGrid, reward, discount, probs: np.ndarray) -> np.ndarray:
    """Project ``reward + discount * Z`` back onto ``grid``.

    ``reward`` and ``discount`` broadcast against the batch dimension of
    ``probs`` (shape ``(..., n_atoms)``). Each transported atom is clamped to
    the grid range and its mass split linearly over the two nearest atoms.
    """
    probs = np.asarray(probs, dtype=np.float64)
    reward = np.asarray(reward, dtype=np.float64)[..., None]
    discount = np.asarray(discount, dtype=np.float64)[..., None]
    n = grid.n_atoms
    tz = np.clip(reward + discount * grid.atoms, grid.v_min, grid.v_max)
    b = np.clip((tz - grid.v_min) / grid.delta, 0.0, n - 1)
    lower = np.floor(b).astype(np.int64)
    upper = np.minimum(lower + 1, n - 1)
    w_upper = b - lower
    w_lower = 1.0 - w_upper

    batch_shape = probs.shape[:-1]
    flat_p = probs.reshape(-1, n)
    lower = np.broadcast_to(lower, probs.shape).reshape(-1, n)
    upper = np.broadcast_to(upper, probs.shape).reshape(-1, n)
    w_upper = np.broadcast_to(w_upper, probs.shape).reshape(-1, n)
    w_lower = np.broadcast_to(w_lower, probs.shape).reshape(-1, n)
    rows = flat_p.shape[0]
    offset = (np.arange(rows) * n)[:, None]
    out = np.bincount((lower + offset).ravel(), (flat_p * w_lower).ravel(), minlength=rows * n)
    out += np.bincount((upper + offset).ravel(), (flat_p * w_upper).ravel(), minlength=rows * n)
    return out.reshape(batch_shape + (n,))


def project(reward: float, discount: float, target: CategoricalDistribution) -> CategoricalDistribution:
    if not 0.0 <= discount <= 1.0:
        raise ValueError("discount must lie in [0, 1]")
    return CategoricalDistribution(target.grid, project_probs(target.grid, reward, discount, target.probs))


def cross_entropy_loss(pred_logits: np.ndarray, target_probs: np.ndarray):
    """``-sum(t * log_softmax(logits))`` and its gradient ``softmax(logits) - t``.

    For batched input the loss is returned per row.
    """
    pred_logits = np.asarray(pred_logits, dtype=np.float64)
    target_probs = np.asarray(target_probs, dtype=np.float64)
    if pred_logits.shape != target_probs.shape:
        raise ValueError("logits and target must have the same shape")
    loss = -(target_probs * log_softmax(pred_logits)).sum(axis=-1)
    grad = softmax(pred_logits) - target_probs
    return loss, grad


def scalar_td_loss(pred_q, target_q):
    """Squared-error loss ``0.5 * (pred - target)**2``; the target is a constant."""
    diff = np.asarray(pred_q, dtype=np.float64) - np.asarray(target_q, dtype=np.float64)
    return 0.5 * diff * diff, diff
