"""Fitted Q-Evaluation: fit a fresh critic for a frozen policy from logged data."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .dataset import Dataset
from .distributional import AtomGrid
from .models import Critic, Policy
from .orl import BatchSampler, DivergenceError, Learner, critic_update, grid_for

log = logging.getLogger(__name__)

FQE_VERSION = 1


@dataclass(frozen=True)
class FqeConfig:
    hidden_size: int = 64
    num_blocks: int = 1
    learning_rate: float = 1e-4
    learner_steps: int = 10_000
    target_update_period: int = 100
    gamma: float = 0.99
    distributional: bool = True
    batch_size: int = 64
    n_atoms: int = 51
    seed: int = 0

    def __post_init__(self):
        if self.hidden_size < 1 or self.num_blocks < 0 or self.learner_steps < 0:
            raise ValueError("invalid FQE architecture or step count")
        if self.learning_rate <= 0 or self.target_update_period < 1 or self.batch_size < 1:
            raise ValueError("learning rate, target period and batch size must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")


@dataclass
class FqeCritic:
    critic: Critic
    evaluated_policy_ref: str
    config: FqeConfig
    steps: int
    loss_trace: list = field(default_factory=list)
    status: str = "ok"

    @property
    def grid(self) -> AtomGrid | None:
        return self.critic.grid

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        nn.write_weights(self.critic.params, directory / "critic.ohsw")
        g = self.critic.grid
        manifest = {
            "format_version": FQE_VERSION,
            "evaluated_policy_ref": self.evaluated_policy_ref,
            "config": asdict(self.config),
            "steps": self.steps,
            "status": self.status,
            "grid": None if g is None else {"v_min": g.v_min, "v_max": g.v_max, "n_atoms": g.n_atoms},
            "loss_trace": [float(x) for x in self.loss_trace],
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> FqeCritic:
        directory = Path(directory)
        m = json.loads((directory / "manifest.json").read_text())
        if m["format_version"] != FQE_VERSION:
            raise ValueError(f"unsupported FQE critic version {m['format_version']}")
        grid = None if m["grid"] is None else AtomGrid(**m["grid"])
        critic = Critic(nn.read_weights(directory / "critic.ohsw"), grid)
        return cls(critic, m["evaluated_policy_ref"], FqeConfig(**m["config"]), m["steps"],
                   m["loss_trace"], m["status"])


def fqe_step_sweep(dataset: Dataset, policy: Policy, config: FqeConfig, checkpoints,
                   policy_ref: str = "", grid: AtomGrid | None = None, hook=None) -> list[FqeCritic]:
    """Single FQE run returning a critic snapshot at every checkpoint step.

    ``hook(step, critic, target)`` is called after every update.
    """
    checkpoints = [int(c) for c in checkpoints]
    if not checkpoints or any(b <= a for a, b in zip(checkpoints, checkpoints[1:])) or checkpoints[0] < 0:
        raise ValueError("checkpoints must be non-negative and strictly increasing")
    if config.distributional:
        grid = grid or grid_for(dataset, config.gamma, config.n_atoms)
    else:
        grid = None
    frozen = policy.flat().copy()
    rng = np.random.default_rng(config.seed)
    critic = Critic.init(dataset.obs_dim, dataset.act_dim, config.hidden_size, config.num_blocks,
                         rng, grid)
    target = critic.copy()
    sampler = BatchSampler(dataset, config.batch_size, rng)
    learner = Learner.of(critic.params.values)
    losses: list[float] = []
    snapshots, status = [], "ok"
    pending = list(checkpoints)

    def snap(step):
        cfg = replace(config, learner_steps=step)
        return FqeCritic(critic.quantized(), policy_ref, cfg, step, losses[:step], status)

    step = 0
    while pending and pending[0] == 0:
        snapshots.append(snap(pending.pop(0)))
    while pending:
        try:
            critic, loss = critic_update(critic, target, policy, sampler.sample(), config.gamma,
                                         learner, config.learning_rate)
            if not critic.is_finite():
                raise DivergenceError("critic parameters became non-finite")
        except DivergenceError as exc:
            log.warning("FQE diverged at step %d for %s: %s", step, policy_ref, exc)
            status = f"diverged@{step}"
            while pending:
                snapshots.append(snap(pending.pop(0)))
            break
        losses.append(loss)
        if step % config.target_update_period == 0:
            target = critic.copy()
        if hook is not None:
            hook(step, critic, target)
        step += 1
        while pending and pending[0] == step:
            snapshots.append(snap(pending.pop(0)))
    if not np.array_equal(frozen, policy.flat()):
        raise AssertionError("evaluation policy was modified during FQE")
    return snapshots


def fqe(dataset: Dataset, policy: Policy, config: FqeConfig, policy_ref: str = "",
        grid: AtomGrid | None = None) -> FqeCritic:
    return fqe_step_sweep(dataset, policy, config, [config.learner_steps], policy_ref, grid)[0]
