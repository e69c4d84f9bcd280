"""Pipeline configuration: TOML schema, validation and grid expansion.

Example (every key optional except ``env``)::

    env = "pointmass"
    master_seed = 0
    gamma = 0.99
    statistics = ["v_s0", "soft_opc", "avg_q", "td_err"]
    soft_opc_thresholds = []          # empty: deciles of logged returns
    ks = [1, 3, 5]
    ground_truth_episodes = 100

    [dataset]
    episodes = 200
    epsilons = [0.0, 0.25, 0.5, 0.75, 1.0]

    [grid]
    algorithms = ["BC", "CRR", "D4PG"]
    hidden_size = [32, 64]
    num_blocks = [1]
    learning_rate = [1e-3, 1e-4]
    learner_steps = [2000, 4000]
    beta = [1.0]                      # CRR cells only

    [trainer]
    batch_size = 64
    target_update_period = 100
    crr_advantage_samples = 4
    crr_weight_cap = 20.0

    [fqe]
    hidden_size = 64
    num_blocks = 1
    learning_rate = 1e-4
    learner_steps = 10000
    target_update_period = 100
    distributional = true
    batch_size = 64
    n_atoms = 51
    checkpoints = [2000, 4000, 6000, 8000]

Unknown keys anywhere are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .envs import ENVS
from .ohs import STATISTICS
from .orl import ALGORITHMS, HyperparameterSetting

GRID_AXES = ("algorithm", "hidden_size", "num_blocks", "learning_rate", "learner_steps", "beta")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSection:
    episodes: int = 200
    epsilons: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    seed: int | None = None


@dataclass(frozen=True)
class GridSection:
    algorithms: tuple[str, ...] = ALGORITHMS
    hidden_size: tuple[int, ...] = (32, 64)
    num_blocks: tuple[int, ...] = (1,)
    learning_rate: tuple[float, ...] = (1e-3, 1e-4)
    learner_steps: tuple[int, ...] = (2000, 4000)
    beta: tuple[float, ...] = (1.0,)


@dataclass(frozen=True)
class TrainerSection:
    batch_size: int = 64
    target_update_period: int = 100
    crr_advantage_samples: int = 4
    crr_weight_cap: float = 20.0


@dataclass(frozen=True)
class FqeSection:
    hidden_size: int = 64
    num_blocks: int = 1
    learning_rate: float = 1e-4
    learner_steps: int = 10_000
    target_update_period: int = 100
    distributional: bool = True
    batch_size: int = 64
    n_atoms: int = 51
    checkpoints: tuple[int, ...] = (2000, 4000, 6000, 8000)


@dataclass(frozen=True)
class PipelineConfig:
    env: str
    master_seed: int = 0
    gamma: float = 0.99
    statistics: tuple[str, ...] = STATISTICS
    soft_opc_thresholds: tuple[float, ...] = ()
    ks: tuple[int, ...] = (1, 3, 5)
    ground_truth_episodes: int = 100
    output_dir: str = "ohs-run"
    workers: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    grid: GridSection = field(default_factory=GridSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    fqe: FqeSection = field(default_factory=FqeSection)

    def __post_init__(self):
        validate(self)

    @property
    def dataset_seed(self) -> int:
        if self.dataset.seed is not None:
            return self.dataset.seed
        return derive_seed(self.master_seed, "dataset")

    def cells(self) -> list[GridCell]:
        return expand_grid(self)

    def snapshot(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> PipelineConfig:
        return dataclasses.replace(self, **changes)


_SECTIONS = {"dataset": DatasetSection, "grid": GridSection, "trainer": TrainerSection,
             "fqe": FqeSection}


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a table")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS and cls is PipelineConfig:
            kwargs[key] = _build(_SECTIONS[key], value, key)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(raw: dict) -> PipelineConfig:
    if "env" not in raw:
        raise ConfigError("config: missing required key 'env'")
    return _build(PipelineConfig, raw, "config")


def load_config(path: str | Path) -> PipelineConfig:
    try:
        raw = tomllib.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw)


def validate(cfg: PipelineConfig) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg.env.lower() in ENVS, f"unknown env {cfg.env!r}; choose from {sorted(ENVS)}")
    need(0.0 < cfg.gamma <= 1.0, "gamma must lie in (0, 1]")
    need(all(s in STATISTICS for s in cfg.statistics), f"statistics must be drawn from {STATISTICS}")
    need(cfg.ground_truth_episodes >= 1, "ground_truth_episodes must be >= 1")
    need(cfg.workers >= 0, "workers must be >= 0")
    need(cfg.dataset.episodes >= 1, "dataset.episodes must be >= 1")
    need(len(cfg.dataset.epsilons) >= 1 and all(0.0 <= e <= 1.0 for e in cfg.dataset.epsilons),
         "dataset.epsilons must be a non-empty list of values in [0, 1]")
    g = cfg.grid
    for axis in ("algorithms", "hidden_size", "num_blocks", "learning_rate", "learner_steps"):
        need(len(getattr(g, axis)) > 0, f"grid.{axis} must be non-empty")
    need(all(a in ALGORITHMS for a in g.algorithms), f"grid.algorithms must be drawn from {ALGORITHMS}")
    need("CRR" not in g.algorithms or len(g.beta) > 0, "grid.beta must be non-empty when CRR is used")
    need(all(h >= 1 for h in g.hidden_size), "grid.hidden_size entries must be >= 1")
    need(all(b >= 0 for b in g.num_blocks), "grid.num_blocks entries must be >= 0")
    need(all(lr > 0 for lr in g.learning_rate), "grid.learning_rate entries must be > 0")
    need(all(s >= 0 for s in g.learner_steps), "grid.learner_steps entries must be >= 0")
    need(all(b > 0 for b in g.beta), "grid.beta entries must be > 0")
    t = cfg.trainer
    need(t.batch_size >= 1 and t.target_update_period >= 1 and t.crr_advantage_samples >= 1,
         "trainer sizes must be >= 1")
    need(t.crr_weight_cap > 0, "trainer.crr_weight_cap must be > 0")
    f = cfg.fqe
    need(f.hidden_size >= 1 and f.num_blocks >= 0 and f.learner_steps >= 0, "invalid fqe architecture")
    need(f.learning_rate > 0 and f.target_update_period >= 1 and f.batch_size >= 1 and f.n_atoms >= 2,
         "invalid fqe optimization settings")
    need(all(c >= 0 for c in f.checkpoints), "fqe.checkpoints must be non-negative")
    need(len(cfg.ks) > 0 and all(k >= 1 for k in cfg.ks), "ks must be a non-empty list of positive integers")
    need(max(cfg.ks) <= len(expand_grid(cfg)), "ks must not exceed the number of grid cells")


@dataclass(frozen=True)
class GridCell:
    algorithm: str
    hidden_size: int
    num_blocks: int
    learning_rate: float
    learner_steps: int
    beta: float | None

    @property
    def cell_id(self) -> str:
        parts = [self.algorithm, f"h{self.hidden_size}", f"b{self.num_blocks}",
                 f"lr{self.learning_rate:g}", f"s{self.learner_steps}"]
        if self.beta is not None:
            parts.append(f"beta{self.beta:g}")
        return "-".join(parts)

    @property
    def training_key(self) -> tuple:
        """Coordinates shared by cells that come from one training run."""
        return (self.algorithm, self.hidden_size, self.num_blocks, self.learning_rate, self.beta)

    @property
    def training_id(self) -> str:
        parts = [self.algorithm, f"h{self.hidden_size}", f"b{self.num_blocks}",
                 f"lr{self.learning_rate:g}"]
        if self.beta is not None:
            parts.append(f"beta{self.beta:g}")
        return "-".join(parts)

    def setting(self, master_seed: int) -> HyperparameterSetting:
        return HyperparameterSetting(self.algorithm, self.hidden_size, self.num_blocks,
                                     self.learning_rate, self.learner_steps, self.beta,
                                     derive_seed(master_seed, "train", *self.training_key))

    def axis_value(self, axis: str):
        return getattr(self, axis)


def expand_grid(cfg: PipelineConfig) -> list[GridCell]:
    g = cfg.grid
    cells = []
    for algo in g.algorithms:
        betas = g.beta if algo == "CRR" else (None,)
        for h, b, lr, steps, beta in itertools.product(g.hidden_size, g.num_blocks, g.learning_rate,
                                                       g.learner_steps, betas):
            cells.append(GridCell(algo, int(h), int(b), float(lr), int(steps),
                                  None if beta is None else float(beta)))
    return cells


def derive_seed(master_seed: int, *coords) -> int:
    """Stable 63-bit seed from the master seed and job coordinates."""
    payload = json.dumps([master_seed, *coords], sort_keys=True, default=str).encode()
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little") >> 1


def parse_only(expr: str | None) -> dict[str, set[str]]:
    """Parse ``--only "algorithm=BC,hidden_size=64"`` into axis -> allowed values."""
    if not expr:
        return {}
    out: dict[str, set[str]] = {}
    for part in expr.split(","):
        if "=" not in part:
            raise ConfigError(f"--only: expected axis=value, got {part!r}")
        axis, value = (s.strip() for s in part.split("=", 1))
        if axis not in GRID_AXES:
            raise ConfigError(f"--only: unknown axis {axis!r}; choose from {GRID_AXES}")
        out.setdefault(axis, set()).add(value)
    return out


def _matches(value, allowed: set[str]) -> bool:
    for a in allowed:
        if isinstance(value, str) or value is None:
            if str(value) == a:
                return True
        else:
            try:
                if float(a) == float(value):
                    return True
            except ValueError:
                continue
    return False


def filter_cells(cells: list[GridCell], only: dict[str, set[str]]) -> list[GridCell]:
    return [c for c in cells if all(_matches(c.axis_value(axis), vals) for axis, vals in only.items())]
