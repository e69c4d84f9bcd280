"""Offline RL trainers: BC, CRR and D4PG.

All three share :func:`critic_update`; they differ only in the policy update
hook. FQE reuses the same critic update with a frozen policy.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .dataset import Dataset
from .distributional import AtomGrid, cross_entropy_loss, project_probs, scalar_td_loss, softmax
from .models import LOG_STD_MAX, LOG_STD_MIN, Critic, Policy, squashed_gaussian_log_prob

log = logging.getLogger(__name__)

ALGORITHMS = ("BC", "CRR", "D4PG")
ARTIFACT_VERSION = 1


@dataclass(frozen=True)
class HyperparameterSetting:
    algorithm: str
    hidden_size: int
    num_blocks: int
    learning_rate: float
    learner_steps: int
    beta: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if (self.beta is not None) != (self.algorithm == "CRR"):
            raise ValueError("beta is required for CRR and forbidden otherwise")
        if self.hidden_size < 1 or self.num_blocks < 0 or self.learner_steps < 0:
            raise ValueError("invalid architecture or step count")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


@dataclass(frozen=True)
class TrainerConfig:
    gamma: float = 0.99
    batch_size: int = 64
    target_update_period: int = 100
    crr_advantage_samples: int = 4
    crr_weight_cap: float = 20.0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.batch_size < 1 or self.target_update_period < 1 or self.crr_advantage_samples < 1:
            raise ValueError("batch_size, target_update_period and crr_advantage_samples must be >= 1")


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    terminals: np.ndarray

    @classmethod
    def from_dataset(cls, dataset: Dataset, idx=None) -> Batch:
        sl = slice(None) if idx is None else idx
        return cls(dataset.obs[sl].astype(np.float64), dataset.actions[sl].astype(np.float64),
                   dataset.rewards[sl].astype(np.float64), dataset.next_obs[sl].astype(np.float64),
                   dataset.terminals[sl].astype(bool))

    def __len__(self):
        return self.rewards.shape[0]


class BatchSampler:
    """Uniform sampling of transitions with replacement."""

    def __init__(self, dataset: Dataset, batch_size: int, rng: np.random.Generator):
        if len(dataset) == 0:
            raise ValueError("cannot sample from an empty dataset")
        self.data = Batch.from_dataset(dataset)
        self.batch_size = batch_size
        self.rng = rng

    def sample(self) -> Batch:
        idx = self.rng.integers(0, len(self.data), size=self.batch_size)
        d = self.data
        return Batch(d.obs[idx], d.actions[idx], d.rewards[idx], d.next_obs[idx], d.terminals[idx])


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# critic
# ---------------------------------------------------------------------------

def critic_loss_and_grad(critic: Critic, target: Critic, policy: Policy, batch: Batch, gamma: float):
    """Mean Bellman loss over the batch and its gradient w.r.t. the critic parameters.

    Targets come from ``target`` evaluated at the policy's evaluation action
    on ``next_obs`` and are treated as constants. Terminal transitions use a
    zero discount.
    """
    next_actions = policy.act(batch.next_obs)
    discount = np.where(batch.terminals, 0.0, gamma)
    target_out, _ = target.forward(batch.next_obs, next_actions)
    out, cache = critic.forward(batch.obs, batch.actions)
    n = len(batch)
    if critic.distributional:
        target_probs = project_probs(critic.grid, batch.rewards, discount, softmax(target_out))
        losses, dout = cross_entropy_loss(out, target_probs)
    else:
        target_q = batch.rewards + discount * target_out[:, 0]
        losses, diff = scalar_td_loss(out[:, 0], target_q)
        dout = diff[:, None]
    grads, _ = critic.backward(cache, dout / n)
    return float(losses.mean()), grads


@dataclass
class Learner:
    """Parameters plus Adam state for one network."""
    values: np.ndarray
    opt: nn.AdamState

    @classmethod
    def of(cls, values: np.ndarray) -> Learner:
        return cls(values.copy(), nn.AdamState.zeros(values.size))

    def apply(self, grads: np.ndarray, lr: float) -> None:
        self.values, self.opt = nn.adam_step(self.opt, self.values, grads, lr)


def critic_update(critic: Critic, target: Critic, policy: Policy, batch: Batch,
                  gamma: float, learner: Learner, lr: float) -> tuple[Critic, float]:
    """One Adam step on the shared critic objective. Returns the new critic and the loss."""
    loss, grads = critic_loss_and_grad(critic, target, policy, batch, gamma)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite critic loss {loss}")
    try:
        learner.apply(grads, lr)
    except nn.TrainingError as exc:
        raise DivergenceError(str(exc)) from exc
    return critic.with_values(learner.values), loss


# ---------------------------------------------------------------------------
# policy updates
# ---------------------------------------------------------------------------

def weighted_log_likelihood_grad(policy: Policy, batch: Batch, weights: np.ndarray | None = None):
    """Loss ``-mean(w * log pi(a|s))`` and its gradient w.r.t. ``policy.flat()``."""
    if policy.kind != "gaussian":
        raise ValueError("likelihood updates require a gaussian policy")
    n = len(batch)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    mu, cache = nn.forward(policy.params, batch.obs)
    u = policy.unsquash(batch.actions)
    log_std = policy.clamped_log_std()
    inv_var = np.exp(-2.0 * log_std)
    resid = u - mu
    loss = -float(np.mean(w * squashed_gaussian_log_prob(policy, mu, batch.actions)))
    dmu = -(w[:, None] * resid * inv_var) / n
    grads, _ = nn.backward(policy.params, cache, dmu)
    dlog_std = (w[:, None] * (1.0 - resid * resid * inv_var)).sum(axis=0) / n
    inside = (policy.log_std > LOG_STD_MIN) & (policy.log_std < LOG_STD_MAX)
    dlog_std = np.where(inside, dlog_std, 0.0)
    return loss, np.concatenate([grads, dlog_std])


def bc_loss_and_grad(policy: Policy, batch: Batch):
    return weighted_log_likelihood_grad(policy, batch)


def crr_weight(critic: Critic, policy: Policy, obs, actions, beta: float, m: int,
               rng: np.random.Generator | None = None, cap: float = 20.0,
               sampled_actions: np.ndarray | None = None) -> np.ndarray:
    """Exponential-advantage weights ``min(exp(A / beta), cap)``.

    The baseline averages Q over ``m`` actions drawn from the policy; pass
    ``sampled_actions`` of shape ``(m, batch, act_dim)`` to fix the draws.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    if sampled_actions is None:
        if m < 1:
            raise ValueError("m must be at least 1")
        sampled_actions = policy.sample(obs, rng, m)
    m = sampled_actions.shape[0]
    obs_rep = np.broadcast_to(obs, (m,) + obs.shape).reshape(-1, obs.shape[-1])
    baseline = critic.q_values(obs_rep, sampled_actions.reshape(-1, actions.shape[-1]))
    baseline = baseline.reshape(m, -1).mean(axis=0)
    advantage = critic.q_values(obs, actions) - baseline
    return np.exp(np.minimum(advantage / beta, math.log(cap)))


def crr_loss_and_grad(policy: Policy, critic: Critic, batch: Batch, beta: float,
                      config: TrainerConfig, rng: np.random.Generator):
    w = crr_weight(critic, policy, batch.obs, batch.actions, beta, config.crr_advantage_samples,
                   rng, config.crr_weight_cap)
    return weighted_log_likelihood_grad(policy, batch, w)


def d4pg_objective_and_grad(policy: Policy, critic: Critic, batch: Batch):
    """Objective ``mean Q(s, pi(s))`` and its *ascent* gradient w.r.t. the policy network."""
    n = len(batch)
    mu, pcache = nn.forward(policy.params, batch.obs)
    actions = policy.squash(mu)
    out, ccache = critic.forward(batch.obs, actions)
    q = critic.q_from_output(out)
    _, dinput = critic.backward(ccache, critic.dq_doutput(out) / n)
    da = dinput[:, batch.obs.shape[1]:]
    dmu = da * policy.scale * (1.0 - np.tanh(mu) ** 2)
    grads, _ = nn.backward(policy.params, pcache, dmu)
    return float(q.mean()), grads


# Single-step wrappers matching the update-rule names used in the docs.
def bc_policy_update(policy: Policy, batch: Batch, learner: Learner, lr: float):
    loss, grads = bc_loss_and_grad(policy, batch)
    learner.apply(grads, lr)
    return policy.with_flat(learner.values), loss


def crr_policy_update(policy, critic, batch, beta, config, learner, lr, rng):
    loss, grads = crr_loss_and_grad(policy, critic, batch, beta, config, rng)
    learner.apply(grads, lr)
    return policy.with_flat(learner.values), loss


def d4pg_policy_update(policy, critic, batch, learner, lr):
    objective, grads = d4pg_objective_and_grad(policy, critic, batch)
    learner.apply(-grads, lr)
    return policy.with_flat(learner.values), objective


# ---------------------------------------------------------------------------
# training loop and artifacts
# ---------------------------------------------------------------------------

@dataclass
class PolicyArtifact:
    setting: HyperparameterSetting
    env_name: str
    policy: Policy
    critic: Critic
    training_log: dict = field(default_factory=dict)
    status: str = "ok"

    @property
    def grid(self) -> AtomGrid:
        return self.critic.grid

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        nn.write_weights(self.policy.params, directory / "policy.ohsw")
        nn.write_weights(self.critic.params, directory / "critic.ohsw")
        g = self.critic.grid
        manifest = {
            "format_version": ARTIFACT_VERSION,
            "env": self.env_name,
            "setting": asdict(self.setting),
            "status": self.status,
            "policy": {"kind": self.policy.kind, "low": self.policy.low.tolist(),
                       "high": self.policy.high.tolist(), "log_std": self.policy.log_std.tolist()},
            "grid": {"v_min": g.v_min, "v_max": g.v_max, "n_atoms": g.n_atoms},
            "training_log": {k: [float(x) for x in v] for k, v in self.training_log.items()},
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> PolicyArtifact:
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        if manifest["format_version"] != ARTIFACT_VERSION:
            raise ValueError(f"unsupported artifact version {manifest['format_version']}")
        p = manifest["policy"]
        policy = Policy(nn.read_weights(directory / "policy.ohsw"), p["kind"], p["low"], p["high"],
                        p["log_std"])
        critic = Critic(nn.read_weights(directory / "critic.ohsw"), AtomGrid(**manifest["grid"]))
        log_ = {k: np.asarray(v) for k, v in manifest["training_log"].items()}
        return cls(HyperparameterSetting(**manifest["setting"]), manifest["env"], policy, critic,
                   log_, manifest["status"])


def policy_kind(algorithm: str) -> str:
    return "deterministic" if algorithm == "D4PG" else "gaussian"


def grid_for(dataset: Dataset, gamma: float, n_atoms: int = 51) -> AtomGrid:
    from .envs import make_env
    lo, hi = make_env(dataset.env_name).return_bounds(gamma)
    return AtomGrid.for_return_range(lo, hi, n_atoms)


def train_snapshots(dataset: Dataset, setting: HyperparameterSetting, config: TrainerConfig,
                    snapshot_steps, grid: AtomGrid | None = None, hook=None) -> list[PolicyArtifact]:
    """Train once and return an artifact at each requested step count.

    The setting's own ``learner_steps`` is ignored; each snapshot's setting
    records the step count it was taken at. ``hook(step, policy, critic,
    target)`` is called after every update, for instrumentation.
    """
    snapshot_steps = sorted(set(int(s) for s in snapshot_steps))
    if not snapshot_steps or snapshot_steps[0] < 0:
        raise ValueError("snapshot steps must be non-negative and non-empty")
    grid = grid or grid_for(dataset, config.gamma)
    rng = np.random.default_rng(setting.seed)
    spec_low = np.full(dataset.act_dim, -1.0)
    spec_high = np.full(dataset.act_dim, 1.0)
    if dataset.env_name:
        spec = dataset.env_spec
        spec_low, spec_high = spec.low, spec.high
    policy = Policy.init(policy_kind(setting.algorithm), dataset.obs_dim, dataset.act_dim,
                         setting.hidden_size, setting.num_blocks, rng, spec_low, spec_high)
    critic = Critic.init(dataset.obs_dim, dataset.act_dim, setting.hidden_size, setting.num_blocks,
                         rng, grid)
    target = critic.copy()
    sampler = BatchSampler(dataset, config.batch_size, rng)
    critic_learner, policy_learner = Learner.of(critic.params.values), Learner.of(policy.flat())
    lr = setting.learning_rate
    critic_losses, policy_losses = [], []
    out, status = [], "ok"

    def snapshot(step):
        s = replace(setting, learner_steps=step)
        logs = {"critic_loss": critic_losses[:step], "policy_loss": policy_losses[:step]}
        return PolicyArtifact(s, dataset.env_name, policy.quantized(), critic.quantized(),
                              logs, status)

    pending = list(snapshot_steps)
    step = 0
    while pending and pending[0] == 0:
        out.append(snapshot(pending.pop(0)))
    while pending:
        batch = sampler.sample()
        try:
            critic, closs = critic_update(critic, target, policy, batch, config.gamma,
                                          critic_learner, lr)
            pgrads, ploss = _policy_step(setting, policy, critic, batch, config, rng)
            if not (math.isfinite(ploss) and np.all(np.isfinite(pgrads))):
                raise DivergenceError("non-finite policy update")
            policy_learner.apply(pgrads, lr)
            policy = policy.with_flat(policy_learner.values)
            if not (policy.is_finite() and critic.is_finite()):
                raise DivergenceError("parameters became non-finite")
        except DivergenceError as exc:
            log.warning("training diverged at step %d for %s: %s", step, setting, exc)
            status = f"diverged@{step}"
            while pending:
                out.append(snapshot(pending.pop(0)))
            break
        critic_losses.append(closs)
        policy_losses.append(ploss)
        if step % config.target_update_period == 0:
            target = critic.copy()
        if hook is not None:
            hook(step, policy, critic, target)
        step += 1
        while pending and pending[0] == step:
            out.append(snapshot(pending.pop(0)))
    return out


def _policy_step(setting, policy, critic, batch, config, rng):
    """Descent direction for the algorithm's policy loss."""
    if setting.algorithm == "BC":
        return bc_loss_and_grad(policy, batch)[::-1]
    if setting.algorithm == "CRR":
        return crr_loss_and_grad(policy, critic, batch, setting.beta, config, rng)[::-1]
    objective, grads = d4pg_objective_and_grad(policy, critic, batch)
    return -grads, -objective


def train(dataset: Dataset, setting: HyperparameterSetting, config: TrainerConfig,
          grid: AtomGrid | None = None) -> PolicyArtifact:
    return train_snapshots(dataset, setting, config, [setting.learner_steps], grid)[0]
