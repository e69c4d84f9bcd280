"""Small control environments, scripted behavior data and ground-truth values.

Three environments are provided:

* ``ChainWalk``: five one-hot positions plus an absorbing goal past the right
  end. A positive scalar action moves right, anything else moves left. Stepping
  right from the last position enters the goal with reward 1. Deterministic,
  and exposes a tabular model for dynamic-programming oracles.
* ``PointMass``: 2-D damped point mass in a walled box, reward is the negative
  distance to the origin.
* ``Swingup``: torque-limited pendulum started hanging down, reward
  ``(1 + cos(theta)) / 2`` with ``theta = 0`` upright.

Dynamics are pure functions over batched observations; the only randomness is
the initial-state draw, which uses ``np.random.default_rng(seed)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .dataset import Dataset

Policy = Callable[[np.ndarray], np.ndarray]


class UnsupportedEnvError(TypeError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    act_dim: int
    horizon: int
    action_low: tuple[float, ...] = ()
    action_high: tuple[float, ...] = ()

    def __post_init__(self):
        if self.horizon < 1 or self.obs_dim < 1 or self.act_dim < 1:
            raise ValueError("dimensions and horizon must be positive")
        if not self.action_low:
            object.__setattr__(self, "action_low", (-1.0,) * self.act_dim)
        if not self.action_high:
            object.__setattr__(self, "action_high", (1.0,) * self.act_dim)
        low, high = np.array(self.action_low), np.array(self.action_high)
        if low.shape != (self.act_dim,) or high.shape != (self.act_dim,):
            raise ValueError("action bounds must have one entry per action dimension")
        if not (np.all(np.isfinite(low)) and np.all(np.isfinite(high)) and np.all(low < high)):
            raise ValueError("action bounds must be finite with low < high")

    @property
    def low(self) -> np.ndarray:
        return np.array(self.action_low)

    @property
    def high(self) -> np.ndarray:
        return np.array(self.action_high)


class Env:
    """Base class: subclasses implement the pure batched pieces."""

    spec: EnvSpec

    def __init__(self):
        self._obs = None
        self._t = 0
        self.last_action_clipped = False

    # -- pure pieces -------------------------------------------------------
    def initial_obs(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def dynamics(self, obs: np.ndarray, action: np.ndarray):
        """Batched ``(next_obs, reward, absorbing)`` for in-bounds actions."""
        raise NotImplementedError

    def expert_action(self, obs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def return_bounds(self, gamma: float) -> tuple[float, float]:
        """Lowest and highest achievable discounted return."""
        raise NotImplementedError

    # -- state machine -----------------------------------------------------
    def reset(self, seed: int) -> np.ndarray:
        self._obs = self.initial_obs(np.random.default_rng(seed))
        self._t = 0
        return self._obs.copy()

    def step(self, action):
        if self._obs is None:
            raise RuntimeError("step() called before reset()")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (self.spec.act_dim,):
            raise ValueError(f"action must have shape ({self.spec.act_dim},), got {action.shape}")
        clipped = np.clip(action, self.spec.low, self.spec.high)
        self.last_action_clipped = bool(np.any(clipped != action))
        next_obs, reward, absorbing = self.dynamics(self._obs, clipped)
        self._t += 1
        terminal = bool(absorbing) or self._t >= self.spec.horizon
        self._obs = next_obs
        return next_obs.copy(), float(reward), terminal

    def clip(self, actions: np.ndarray) -> np.ndarray:
        return np.clip(actions, self.spec.low, self.spec.high)


class ChainWalk(Env):
    n_positions = 5

    def __init__(self, horizon: int = 20):
        super().__init__()
        self.spec = EnvSpec("chainwalk", self.n_positions, 1, horizon)

    # Tabular indices 0..4 are positions, index 5 is the absorbing goal.
    @property
    def n_states(self) -> int:
        return self.n_positions + 1

    def state_obs(self, index: int) -> np.ndarray:
        obs = np.zeros(self.n_positions)
        if index < self.n_positions:
            obs[index] = 1.0
        return obs

    def obs_index(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs)
        idx = np.argmax(obs, axis=-1)
        return np.where(obs.max(axis=-1) > 0.5, idx, self.n_positions)

    def tabular_step(self, index: int, action: np.ndarray) -> tuple[int, float, bool]:
        if index == self.n_positions:
            return index, 0.0, True
        right = float(np.asarray(action).reshape(-1)[0]) > 0
        if right:
            if index == self.n_positions - 1:
                return self.n_positions, 1.0, True
            return index + 1, 0.0, False
        return max(index - 1, 0), 0.0, False

    def initial_obs(self, rng):
        return self.state_obs(0)

    def dynamics(self, obs, action):
        obs = np.asarray(obs, dtype=np.float64)
        idx = self.obs_index(obs)
        right = np.asarray(action)[..., 0] > 0
        at_goal = idx == self.n_positions
        exits = right & (idx == self.n_positions - 1) & ~at_goal
        new_idx = np.where(right, idx + 1, np.maximum(idx - 1, 0))
        new_idx = np.where(at_goal, self.n_positions, new_idx)
        next_obs = (new_idx[..., None] == np.arange(self.n_positions)).astype(np.float64)
        reward = exits.astype(np.float64)
        return next_obs, reward, at_goal | exits

    def expert_action(self, obs):
        return np.ones(np.shape(obs)[:-1] + (1,))

    def return_bounds(self, gamma):
        return 0.0, 1.0


class PointMass(Env):
    dt = 0.1
    damping = 0.9
    force = 2.0

    def __init__(self, horizon: int = 100):
        super().__init__()
        self.spec = EnvSpec("pointmass", 4, 2, horizon)

    def initial_obs(self, rng):
        return np.concatenate([rng.uniform(-1.0, 1.0, size=2), np.zeros(2)])

    def dynamics(self, obs, action):
        obs = np.asarray(obs, dtype=np.float64)
        pos, vel = obs[..., :2], obs[..., 2:]
        vel = self.damping * vel + self.dt * self.force * np.asarray(action)
        pos = pos + self.dt * vel
        hit = np.abs(pos) > 1.0
        pos = np.clip(pos, -1.0, 1.0)
        vel = np.where(hit, 0.0, vel)
        reward = -np.linalg.norm(pos, axis=-1)
        return np.concatenate([pos, vel], axis=-1), reward, np.zeros(reward.shape, dtype=bool)

    def expert_action(self, obs):
        obs = np.asarray(obs)
        return np.clip(-3.0 * obs[..., :2] - 1.0 * obs[..., 2:], -1.0, 1.0)

    def return_bounds(self, gamma):
        return -math.sqrt(2.0) * _discounted_steps(gamma, self.spec.horizon), 0.0


class Swingup(Env):
    gravity = 10.0
    max_torque = 3.0
    dt = 0.05
    jitter = 0.1

    def __init__(self, horizon: int = 200):
        super().__init__()
        self.spec = EnvSpec("swingup", 3, 1, horizon)

    @staticmethod
    def angle(obs):
        obs = np.asarray(obs)
        return np.arctan2(obs[..., 1], obs[..., 0])

    def energy(self, theta, theta_dot):
        return 0.5 * theta_dot ** 2 + self.gravity * np.cos(theta)

    def initial_obs(self, rng):
        theta = math.pi + rng.uniform(-self.jitter, self.jitter)
        return np.array([math.cos(theta), math.sin(theta), 0.0])

    def integrate(self, theta, theta_dot, torque):
        """One RK4 step of ``theta'' = g sin(theta) + torque`` (unit mass and length)."""
        def deriv(th, w):
            return w, self.gravity * np.sin(th) + torque

        h = self.dt
        k1 = deriv(theta, theta_dot)
        k2 = deriv(theta + h / 2 * k1[0], theta_dot + h / 2 * k1[1])
        k3 = deriv(theta + h / 2 * k2[0], theta_dot + h / 2 * k2[1])
        k4 = deriv(theta + h * k3[0], theta_dot + h * k3[1])
        theta = theta + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        theta_dot = theta_dot + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        return theta, theta_dot

    def dynamics(self, obs, action):
        obs = np.asarray(obs, dtype=np.float64)
        torque = self.max_torque * np.asarray(action)[..., 0]
        theta, theta_dot = self.integrate(self.angle(obs), obs[..., 2], torque)
        next_obs = np.stack([np.cos(theta), np.sin(theta), theta_dot], axis=-1)
        reward = 0.5 * (1.0 + np.cos(theta))
        return next_obs, reward, np.zeros(reward.shape, dtype=bool)

    def expert_action(self, obs):
        obs = np.asarray(obs)
        theta, theta_dot = self.angle(obs), obs[..., 2]
        balance = -(20.0 * theta + 5.0 * theta_dot) / self.max_torque
        pump = np.sign(theta_dot) * (self.gravity - self.energy(theta, theta_dot))
        u = np.where(obs[..., 0] > 0.85, balance, pump)
        return np.clip(u, -1.0, 1.0)[..., None]

    def return_bounds(self, gamma):
        return 0.0, _discounted_steps(gamma, self.spec.horizon)


ENVS = {"chainwalk": ChainWalk, "pointmass": PointMass, "swingup": Swingup}


def make_env(name: str, **kwargs) -> Env:
    try:
        return ENVS[name.lower()](**kwargs)
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None


def _discounted_steps(gamma: float, horizon: int) -> float:
    return float(horizon) if gamma == 1.0 else (1.0 - gamma ** horizon) / (1.0 - gamma)


def _episode_rng(seed: int, episode: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, episode, stream])


def rollout_returns(env: Env, policy: Policy, n_episodes: int, gamma: float, seed: int) -> np.ndarray:
    """Discounted returns of ``n_episodes`` batched rollouts from seeded initial states."""
    obs = np.stack([env.initial_obs(_episode_rng(seed, i)) for i in range(n_episodes)])
    returns = np.zeros(n_episodes)
    alive = np.ones(n_episodes, dtype=bool)
    for t in range(env.spec.horizon):
        actions = env.clip(np.asarray(policy(obs), dtype=np.float64))
        obs, reward, absorbing = env.dynamics(obs, actions)
        returns += np.where(alive, gamma ** t * reward, 0.0)
        alive &= ~absorbing
        if not alive.any():
            break
    return returns


def actual_value(env: Env, policy: Policy, n_episodes: int = 100, gamma: float = 0.99,
                 seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo mean and standard error of the discounted return."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    returns = rollout_returns(env, policy, n_episodes, gamma, seed)
    if np.all(returns == returns[0]):  # also covers n_episodes == 1
        return float(returns[0]), 0.0
    stderr = float(returns.std(ddof=1) / math.sqrt(n_episodes))
    return float(returns.mean()), stderr


def policy_evaluation_sweeps(env, policy: Policy, gamma: float) -> Iterator[tuple[np.ndarray, float]]:
    """Synchronous policy-evaluation sweeps, yielding ``(values, sup-norm residual)``."""
    if not hasattr(env, "tabular_step"):
        raise UnsupportedEnvError(f"{type(env).__name__} has no tabular model")
    n = env.n_states
    nxt, rew, absorbing = np.zeros(n, dtype=np.int64), np.zeros(n), np.zeros(n, dtype=bool)
    for i in range(n):
        action = np.asarray(policy(env.state_obs(i)[None, :]))[0]
        nxt[i], rew[i], absorbing[i] = env.tabular_step(i, action)
    cont = np.where(absorbing, 0.0, gamma)
    values = np.zeros(n)
    while True:
        new = rew + cont * values[nxt]
        residual = float(np.max(np.abs(new - values)))
        values = new
        yield values, residual


def dp_policy_evaluation(env, policy: Policy, gamma: float, tol: float = 1e-10,
                         max_sweeps: int = 1_000_000) -> np.ndarray:
    """Value of every tabular state under a deterministic policy."""
    for sweep, (values, residual) in enumerate(policy_evaluation_sweeps(env, policy, gamma)):
        if residual < tol:
            return values
        if sweep >= max_sweeps:
            raise RuntimeError(f"policy evaluation did not converge in {max_sweeps} sweeps")


@dataclass(frozen=True)
class BehaviorSpec:
    """Epsilon-greedy mixture of the scripted expert and uniform noise.

    ``epsilons`` is a schedule applied over equal consecutive blocks of
    episodes: with ``(0.0, 0.3, 0.7)`` the first third of the episodes is pure
    expert, the next third takes random actions 30% of the time, and so on.
    """
    epsilons: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)

    def epsilon_for(self, episode: int, n_episodes: int) -> float:
        block = min(episode * len(self.epsilons) // n_episodes, len(self.epsilons) - 1)
        return self.epsilons[block]


def generate_dataset(env: Env, behavior: BehaviorSpec, n_episodes: int = 200,
                     seed: int = 0) -> Dataset:
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    columns = {k: [] for k in ("obs", "actions", "rewards", "next_obs", "terminals", "episode_ids")}
    low, high = env.spec.low, env.spec.high
    for ep in range(n_episodes):
        eps = behavior.epsilon_for(ep, n_episodes)
        act_rng = _episode_rng(seed, ep, 1)
        obs = env.initial_obs(_episode_rng(seed, ep))
        for t in range(env.spec.horizon):
            if act_rng.random() < eps:
                action = act_rng.uniform(low, high)
            else:
                action = env.clip(env.expert_action(obs))
            next_obs, reward, absorbing = env.dynamics(obs, action)
            terminal = bool(absorbing) or t == env.spec.horizon - 1
            columns["obs"].append(obs)
            columns["actions"].append(action)
            columns["rewards"].append(float(reward))
            columns["next_obs"].append(next_obs)
            columns["terminals"].append(terminal)
            columns["episode_ids"].append(ep)
            obs = next_obs
            if terminal:
                break
    meta = {"env": env.spec.name, "epsilons": list(behavior.epsilons),
            "n_episodes": n_episodes, "seed": seed}
    return Dataset.from_columns(env.spec.name, env.spec.obs_dim, env.spec.act_dim,
                                meta=meta, **columns)
