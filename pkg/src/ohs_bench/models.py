"""Policy and critic wrappers around :class:`~ohs_bench.nn.MlpParams`."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .distributional import AtomGrid, softmax

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_SQUASH_EPS = 1e-4
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class Policy:
    """Tanh-squashed policy; ``kind`` is ``"gaussian"`` or ``"deterministic"``.

    The network outputs the pre-squash mean. Gaussian policies add a
    state-independent ``log_std``. The evaluation action is always the
    squashed mean, so every evaluated policy is deterministic.
    """

    params: nn.MlpParams
    kind: str
    low: np.ndarray
    high: np.ndarray
    log_std: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.kind not in ("gaussian", "deterministic"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        self.low = np.asarray(self.low, dtype=np.float64)
        self.high = np.asarray(self.high, dtype=np.float64)
        self.log_std = np.asarray(self.log_std, dtype=np.float64)
        if self.kind == "gaussian" and self.log_std.shape != (self.act_dim,):
            raise ValueError("gaussian policy needs one log_std per action dimension")

    @classmethod
    def init(cls, kind, obs_dim, act_dim, hidden_size, num_blocks, rng, low=None, high=None):
        params = nn.init_mlp(obs_dim, act_dim, hidden_size, num_blocks, rng)
        low = -np.ones(act_dim) if low is None else low
        high = np.ones(act_dim) if high is None else high
        log_std = np.zeros(act_dim) if kind == "gaussian" else np.zeros(0)
        return cls(params, kind, low, high, log_std)

    @property
    def act_dim(self) -> int:
        return self.params.output_dim

    @property
    def scale(self) -> np.ndarray:
        return 0.5 * (self.high - self.low)

    def squash(self, u):
        return self.low + self.scale * (np.tanh(u) + 1.0)

    def unsquash(self, a):
        y = (np.asarray(a, dtype=np.float64) - self.low) / self.scale - 1.0
        return np.arctanh(np.clip(y, -1.0 + _SQUASH_EPS, 1.0 - _SQUASH_EPS))

    def clamped_log_std(self) -> np.ndarray:
        return np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)

    def act(self, obs: np.ndarray) -> np.ndarray:
        return self.squash(nn.mlp_forward(self.params, obs))

    __call__ = act

    def sample(self, obs: np.ndarray, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        """``n`` actions per observation, shape ``(n, batch, act_dim)``."""
        mu = nn.mlp_forward(self.params, obs)
        if self.kind == "deterministic":
            return np.broadcast_to(self.squash(mu), (n,) + mu.shape).copy()
        noise = rng.standard_normal((n,) + mu.shape)
        return self.squash(mu + np.exp(self.clamped_log_std()) * noise)

    def log_prob(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        if self.kind != "gaussian":
            raise ValueError("log_prob is defined for gaussian policies only")
        mu = nn.mlp_forward(self.params, obs)
        return squashed_gaussian_log_prob(self, mu, actions)

    # flat vector = network parameters followed by log_std
    def flat(self) -> np.ndarray:
        return np.concatenate([self.params.values, self.log_std])

    def with_flat(self, flat: np.ndarray) -> Policy:
        n = self.params.values.size
        return Policy(self.params.with_values(flat[:n]), self.kind, self.low, self.high,
                      flat[n:].copy())

    def quantized(self) -> Policy:
        return self.with_flat(self.flat().astype(np.float32).astype(np.float64))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat())))


def squashed_gaussian_log_prob(policy: Policy, mu: np.ndarray, actions: np.ndarray) -> np.ndarray:
    u = policy.unsquash(actions)
    log_std = policy.clamped_log_std()
    z = (u - mu) * np.exp(-log_std)
    log_det = np.log(policy.scale * (1.0 - np.tanh(u) ** 2))
    return (-0.5 * z * z - log_std - _HALF_LOG_2PI - log_det).sum(axis=-1)


@dataclass
class Critic:
    """Q-network over concatenated ``(obs, action)``.

    With a grid the network emits one logit per atom and Q is the mean of the
    categorical distribution; without one it emits the scalar Q directly.
    """

    params: nn.MlpParams
    grid: AtomGrid | None = None

    @classmethod
    def init(cls, obs_dim, act_dim, hidden_size, num_blocks, rng, grid: AtomGrid | None = None):
        out = grid.n_atoms if grid is not None else 1
        return cls(nn.init_mlp(obs_dim + act_dim, out, hidden_size, num_blocks, rng), grid)

    @property
    def distributional(self) -> bool:
        return self.grid is not None

    def forward(self, obs, actions):
        return nn.forward(self.params, np.concatenate([obs, actions], axis=-1))

    def backward(self, cache, dout: np.ndarray):
        """``(param_grads, input_grads)`` for upstream gradient ``dout`` on the raw output."""
        return nn.backward(self.params, cache, dout)

    def q_from_output(self, out: np.ndarray) -> np.ndarray:
        if self.grid is None:
            return out[..., 0]
        return softmax(out) @ self.grid.atoms

    def q_values(self, obs, actions) -> np.ndarray:
        out, _ = self.forward(np.asarray(obs, dtype=np.float64), np.asarray(actions, dtype=np.float64))
        return self.q_from_output(out)

    def dq_doutput(self, out: np.ndarray) -> np.ndarray:
        """Jacobian-vector helper: gradient of Q w.r.t. the raw network output."""
        if self.grid is None:
            return np.ones_like(out)
        p = softmax(out)
        q = p @ self.grid.atoms
        return p * (self.grid.atoms - q[..., None])

    def with_values(self, values: np.ndarray) -> Critic:
        return Critic(self.params.with_values(values), self.grid)

    def copy(self) -> Critic:
        return Critic(self.params.copy(), self.grid)

    def quantized(self) -> Critic:
        return Critic(self.params.quantized(), self.grid)

    def is_finite(self) -> bool:
        return self.params.is_finite()
