"""Offline selection statistics and ranking-quality metrics.

Statistics summarize a (critic, policy, dataset) triple as one number:

``v_s0``      mean Q over episode-initial states at the policy's action
``soft_opc``  mean Q over logged pairs of successful episodes minus mean Q over all logged pairs
``avg_q``     mean Q over every logged state at the policy's action
``td_err``    mean one-step TD error over logged transitions

Metrics compare a statistic across policies against ground-truth values:
Spearman rank correlation, regret@k and mean absolute error.
"""
from __future__ import annotations

import logging
import statistics as pystats
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .dataset import Dataset

log = logging.getLogger(__name__)

STATISTICS = ("v_s0", "soft_opc", "avg_q", "td_err")
SOURCES = ("ORL", "OPE")
GROUPS = ("BC", "CRR", "D4PG", "all")


class UndefinedStatisticError(ValueError):
    """A statistic or metric has no value for this input (reported, not fatal)."""


def _require_data(dataset: Dataset):
    if len(dataset) == 0:
        raise UndefinedStatisticError("dataset has no transitions")


def _as64(x):
    return np.asarray(x, dtype=np.float64)


def v_s0(critic, policy: Callable, dataset: Dataset) -> float:
    _require_data(dataset)
    s0 = _as64(dataset.obs[dataset.initial_indices])
    return float(np.mean(critic.q_values(s0, policy(s0))))


def avg_q(critic, policy: Callable, dataset: Dataset) -> float:
    _require_data(dataset)
    obs = _as64(dataset.obs)
    return float(np.mean(critic.q_values(obs, policy(obs))))


def td_err(critic, policy: Callable, dataset: Dataset, gamma: float = 0.99) -> float:
    _require_data(dataset)
    obs, next_obs = _as64(dataset.obs), _as64(dataset.next_obs)
    q = critic.q_values(obs, _as64(dataset.actions))
    q_next = critic.q_values(next_obs, policy(next_obs))
    discount = np.where(dataset.terminals, 0.0, gamma)
    return float(np.mean(_as64(dataset.rewards) + discount * q_next - q))


def soft_opc(critic, policy: Callable, dataset: Dataset, threshold: float,
             gamma: float = 0.99) -> float:
    """Success means an episode's discounted return is strictly above ``threshold``."""
    _require_data(dataset)
    returns = dataset.episode_returns(gamma)
    success_mask = np.zeros(len(dataset), dtype=bool)
    for (start, stop), ret in zip(dataset.episode_bounds, returns):
        success_mask[start:stop] = ret > threshold
    if not success_mask.any():
        raise UndefinedStatisticError(f"no episode has return above {threshold}")
    q = critic.q_values(_as64(dataset.obs), _as64(dataset.actions))
    return float(q[success_mask].mean() - q.mean())


def default_thresholds(dataset: Dataset, gamma: float) -> list[float]:
    """Deciles (10%..90%) of the logged episode-return distribution."""
    returns = dataset.episode_returns(gamma)
    return [float(x) for x in np.quantile(returns, np.arange(1, 10) / 10.0)]


def spearman(stat_values: Sequence[float], actual_values: Sequence[float]) -> float:
    """Pearson correlation of average ranks."""
    x, y = _as64(stat_values), _as64(actual_values)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise UndefinedStatisticError("need two equal-length sequences with at least 2 entries")
    rx, ry = rankdata(x) - (x.size + 1) / 2.0, rankdata(y) - (y.size + 1) / 2.0
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0.0:
        raise UndefinedStatisticError("ranks have zero variance")
    return float(np.clip((rx * ry).sum() / denom, -1.0, 1.0))


def top_k(stat_values: Sequence[float], k: int) -> list[int]:
    """Indices of the ``k`` largest values; ties go to the lower index."""
    order = sorted(range(len(stat_values)), key=lambda i: (-stat_values[i], i))
    return order[:k]


def regret_at_k(stat_values: Sequence[float], actual_values: Sequence[float], k: int) -> float:
    n = len(stat_values)
    if n != len(actual_values) or not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}] and inputs must have equal length")
    chosen = top_k(list(stat_values), k)
    return float(max(actual_values) - max(actual_values[i] for i in chosen))


def abs_error(stat_value: float, actual_value: float) -> float:
    return abs(float(stat_value) - float(actual_value))


def median_policy_regret(actual_values: Sequence[float]) -> float:
    """Regret of picking the policy with median actual value (lower median for even counts)."""
    return float(max(actual_values) - pystats.median_low(actual_values))


@dataclass(frozen=True)
class StatisticValue:
    policy_id: str
    source: str
    kind: str
    value: float
    params: str = ""


@dataclass
class RankingMetrics:
    kind: str
    source: str
    params: str
    group: str
    n: int
    spearman: float | None
    regret_at_k: dict = field(default_factory=dict)
    normalized_regret_at_k: dict = field(default_factory=dict)
    median_baseline: float | None = None
    normalized_median_baseline: float | None = None
    mean_abs_error: float | None = None
    note: str = ""


def _normalize(regret: float, best: float) -> float:
    return regret / abs(best) if best != 0 else float("nan")


def group_metrics(kind, source, params, group, stat, actual, ks) -> RankingMetrics:
    n = len(stat)
    if n < 2:
        log.info("skipping %s/%s/%s group %s: only %d policies", kind, source, params, group, n)
        return RankingMetrics(kind, source, params, group, n, None,
                              note="undefined: fewer than 2 policies")
    note = ""
    try:
        rho = spearman(stat, actual)
    except UndefinedStatisticError as exc:
        rho, note = None, f"spearman undefined: {exc}"
    best = max(actual)
    regrets = {k: regret_at_k(stat, actual, min(k, n)) for k in ks}
    baseline = median_policy_regret(actual)
    return RankingMetrics(
        kind, source, params, group, n, rho,
        regret_at_k=regrets,
        normalized_regret_at_k={k: _normalize(r, best) for k, r in regrets.items()},
        median_baseline=baseline,
        normalized_median_baseline=_normalize(baseline, best),
        mean_abs_error=float(np.mean([abs_error(s, a) for s, a in zip(stat, actual)])),
        note=note,
    )


def rank_report(statistics: Sequence[StatisticValue], actual_values: Mapping[str, float],
                algorithms: Mapping[str, str], ks: Sequence[int] = (1, 5),
                groups: Sequence[str] = GROUPS) -> list[RankingMetrics]:
    """Ranking metrics per (statistic kind, source, params, group).

    Policies without an actual value or with a non-finite statistic are left
    out. For ``soft_opc`` an extra row per (source, group) repeats the
    threshold with the highest Spearman correlation, with params prefixed by
    ``best:``.
    """
    by_key: dict[tuple[str, str, str], dict[str, float]] = {}
    for sv in statistics:
        by_key.setdefault((sv.kind, sv.source, sv.params), {})[sv.policy_id] = sv.value
    out = []
    for (kind, source, params) in sorted(by_key, key=_key_order):
        values = by_key[(kind, source, params)]
        for group in groups:
            ids = sorted(pid for pid, v in values.items()
                         if pid in actual_values and np.isfinite(v)
                         and (group == "all" or algorithms.get(pid) == group))
            stat = [values[pid] for pid in ids]
            actual = [actual_values[pid] for pid in ids]
            out.append(group_metrics(kind, source, params, group, stat, actual, ks))
    out.extend(_best_threshold_rows(out, groups))
    return out


def _key_order(key):
    kind, source, params = key
    kind_rank = STATISTICS.index(kind) if kind in STATISTICS else len(STATISTICS)
    return (kind_rank, SOURCES.index(source) if source in SOURCES else 99, _param_sort(params))


def _param_sort(params: str):
    if params.startswith("threshold="):
        return (0, float(params.split("=", 1)[1]), params)
    return (1, 0.0, params)


def _best_threshold_rows(rows: list[RankingMetrics], groups) -> list[RankingMetrics]:
    best = []
    for source in SOURCES:
        for group in groups:
            candidates = [r for r in rows if r.kind == "soft_opc" and r.source == source
                          and r.group == group and r.spearman is not None]
            if not candidates:
                continue
            top = max(candidates, key=lambda r: r.spearman)  # first maximum wins
            row = RankingMetrics(**{**top.__dict__, "params": f"best:{top.params}"})
            best.append(row)
    return best
