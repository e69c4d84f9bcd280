"""Logged transition datasets and their binary file format.

Layout (little-endian)::

    header   : b"OHSD", version u32, obs_dim u32, act_dim u32, n_episodes u32
    episodes : n_episodes x (episode_id u32, length u32)
    records  : one per transition, in episode order:
               obs f32[obs_dim], action f32[act_dim], reward f32,
               next_obs f32[obs_dim], terminal u8

Provenance (env name, behavior schedule) is kept in a JSON sidecar next to
the binary file; the binary itself round-trips bit-exactly.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

DATASET_MAGIC = b"OHSD"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4s4I")


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    terminal: bool
    episode_id: int
    step: int


@dataclass
class Dataset:
    """Column store of transitions grouped into contiguous episodes."""

    env_name: str
    obs_dim: int
    act_dim: int
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    terminals: np.ndarray
    episode_ids: np.ndarray
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_columns(cls, env_name, obs_dim, act_dim, *, obs, actions, rewards, next_obs,
                     terminals, episode_ids, meta=None) -> Dataset:
        ds = cls(
            env_name, obs_dim, act_dim,
            obs=np.asarray(obs, dtype=np.float32).reshape(-1, obs_dim),
            actions=np.asarray(actions, dtype=np.float32).reshape(-1, act_dim),
            rewards=np.asarray(rewards, dtype=np.float32).reshape(-1),
            next_obs=np.asarray(next_obs, dtype=np.float32).reshape(-1, obs_dim),
            terminals=np.asarray(terminals, dtype=bool).reshape(-1),
            episode_ids=np.asarray(episode_ids, dtype=np.int64).reshape(-1),
            meta=dict(meta or {}),
        )
        ds.validate()
        return ds

    def __len__(self) -> int:
        return int(self.rewards.shape[0])

    @property
    def env_spec(self):
        from .envs import make_env
        return make_env(self.env_name).spec

    @property
    def episode_bounds(self) -> list[tuple[int, int]]:
        """``(start, stop)`` transition indices of each episode, in order."""
        if len(self) == 0:
            return []
        change = np.flatnonzero(np.diff(self.episode_ids)) + 1
        starts = np.concatenate([[0], change])
        stops = np.concatenate([change, [len(self)]])
        return [(int(a), int(b)) for a, b in zip(starts, stops)]

    @property
    def n_episodes(self) -> int:
        return len(self.episode_bounds)

    @property
    def steps(self) -> np.ndarray:
        out = np.zeros(len(self), dtype=np.int64)
        for start, stop in self.episode_bounds:
            out[start:stop] = np.arange(stop - start)
        return out

    @property
    def initial_indices(self) -> np.ndarray:
        return np.array([start for start, _ in self.episode_bounds], dtype=np.int64)

    def episodes(self) -> list[list[Transition]]:
        steps = self.steps
        return [[self.transition(i, int(steps[i])) for i in range(a, b)]
                for a, b in self.episode_bounds]

    def transition(self, i: int, step: int | None = None) -> Transition:
        if step is None:
            step = int(self.steps[i])
        return Transition(self.obs[i], self.actions[i], float(self.rewards[i]), self.next_obs[i],
                          bool(self.terminals[i]), int(self.episode_ids[i]), step)

    def __iter__(self) -> Iterator[Transition]:
        for episode in self.episodes():
            yield from episode

    def episode_returns(self, gamma: float) -> np.ndarray:
        steps = self.steps
        disc = self.rewards.astype(np.float64) * gamma ** steps
        return np.array([disc[a:b].sum() for a, b in self.episode_bounds])

    def select_episodes(self, order) -> Dataset:
        """New dataset containing the given episodes (by position) in the given order."""
        bounds = self.episode_bounds
        idx = np.concatenate([np.arange(*bounds[k]) for k in order] + [np.zeros(0, dtype=np.int64)])
        return Dataset(self.env_name, self.obs_dim, self.act_dim, self.obs[idx], self.actions[idx],
                       self.rewards[idx], self.next_obs[idx], self.terminals[idx],
                       self.episode_ids[idx], dict(self.meta))

    def validate(self) -> None:
        n = len(self)
        for name in ("obs", "actions", "next_obs", "terminals", "episode_ids"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"column {name} has inconsistent length")
        if self.obs.shape[1:] != (self.obs_dim,) or self.next_obs.shape[1:] != (self.obs_dim,):
            raise ValueError("observation width differs from obs_dim")
        if self.actions.shape[1:] != (self.act_dim,):
            raise ValueError("action width differs from act_dim")
        ids = [int(self.episode_ids[a]) for a, _ in self.episode_bounds]
        if len(set(ids)) != len(ids):
            raise ValueError("episode ids must be unique and episodes contiguous")
        for a, b in self.episode_bounds:
            if self.terminals[a:b - 1].any():
                raise ValueError(f"episode {self.episode_ids[a]} has a terminal before its end")

    # -- binary IO -----------------------------------------------------------
    def to_bytes(self) -> bytes:
        bounds = self.episode_bounds
        parts = [_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, self.obs_dim, self.act_dim, len(bounds))]
        table = np.array([(self.episode_ids[a], b - a) for a, b in bounds], dtype="<u4")
        parts.append(table.tobytes())
        parts.append(self._records().tobytes())
        return b"".join(parts)

    def _record_dtype(self):
        return np.dtype([("obs", "<f4", (self.obs_dim,)), ("action", "<f4", (self.act_dim,)),
                         ("reward", "<f4"), ("next_obs", "<f4", (self.obs_dim,)), ("terminal", "u1")])

    def _records(self) -> np.ndarray:
        rec = np.empty(len(self), dtype=self._record_dtype())
        rec["obs"], rec["action"], rec["reward"] = self.obs, self.actions, self.rewards
        rec["next_obs"], rec["terminal"] = self.next_obs, self.terminals
        return rec

    @classmethod
    def from_bytes(cls, raw: bytes, env_name: str = "", meta: dict | None = None) -> Dataset:
        magic, version, obs_dim, act_dim, n_episodes = _HEADER.unpack_from(raw)
        if magic != DATASET_MAGIC:
            raise ValueError(f"not a dataset file (magic {magic!r})")
        if version != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        offset = _HEADER.size
        table = np.frombuffer(raw, dtype="<u4", count=2 * n_episodes, offset=offset).reshape(-1, 2)
        offset += table.nbytes
        shell = cls(env_name, obs_dim, act_dim, *([np.empty(0)] * 6))
        n = int(table[:, 1].sum())
        rec = np.frombuffer(raw, dtype=shell._record_dtype(), count=n, offset=offset)
        if offset + rec.nbytes != len(raw):
            raise ValueError("dataset file has trailing or missing bytes")
        ds = cls(env_name, obs_dim, act_dim, rec["obs"].copy(), rec["action"].copy(),
                 rec["reward"].copy(), rec["next_obs"].copy(), rec["terminal"].astype(bool),
                 np.repeat(table[:, 0].astype(np.int64), table[:, 1]), dict(meta or {}))
        ds.validate()
        return ds

    def save(self, path: str | Path) -> str:
        """Write binary + JSON sidecar; returns the SHA-256 of the binary."""
        path = Path(path)
        raw = self.to_bytes()
        path.write_bytes(raw)
        digest = hashlib.sha256(raw).hexdigest()
        sidecar = {"env": self.env_name, "sha256": digest, "meta": self.meta}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
        return digest

    @classmethod
    def load(cls, path: str | Path) -> Dataset:
        path = Path(path)
        sidecar_path = path.with_suffix(".json")
        sidecar = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else {}
        return cls.from_bytes(path.read_bytes(), sidecar.get("env", ""), sidecar.get("meta"))
