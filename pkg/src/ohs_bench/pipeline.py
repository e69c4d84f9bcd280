"""Stage orchestration: data, training grid, ground truth, FQE, statistics, reports.

Output layout under ``out``::

    data/dataset.ohsd (+ .json sidecar)  data/stamp.json
    train/<training_id>/s<steps>/         policy artifact per grid cell
    ground_truth/<cell_id>.json
    fqe/<cell_id>/s<steps>/               FQE critic per checkpoint
    stats/statistics.json
    reports/{statistics,ranking,scatter,fqe_steps}.csv  reports/schema.json
    manifest.json

Every job writes a stamp holding the hash of its inputs; a job whose stamp
matches is skipped, so re-running a finished stage does nothing. Job seeds
come from :func:`~ohs_bench.config.derive_seed`, never from execution order,
so results do not depend on the worker count.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, ohs
from .config import GridCell, PipelineConfig, derive_seed, filter_cells
from .dataset import Dataset
from .envs import BehaviorSpec, actual_value, generate_dataset, make_env
from .fqe import FqeConfig, FqeCritic, fqe_step_sweep
from .orl import PolicyArtifact, TrainerConfig, grid_for, train_snapshots

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train", "ground-truth", "fqe", "stats", "report")
REPORT_VERSION = 1
STAT_COLUMNS = ("policy_id", "algorithm", "source", "statistic", "params", "value",
                "actual_value", "abs_error")
SCATTER_COLUMNS = ("env", "policy_id", "algorithm", "source", "estimate", "actual_value")


class StageDependencyError(RuntimeError):
    def __init__(self, stage: str, missing_stage: str, detail: str):
        self.stage, self.missing_stage = stage, missing_stage
        super().__init__(f"stage '{stage}' needs the outputs of stage '{missing_stage}': {detail}")


def _hash(obj) -> str:
    payload = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(payload).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    tmp.replace(path)


def _read_json(path: Path):
    return json.loads(path.read_text())


def _stamp_matches(path: Path, input_hash: str) -> dict | None:
    if not path.exists():
        return None
    stamp = _read_json(path)
    return stamp if stamp.get("input_hash") == input_hash else None


@dataclass
class RunManifest:
    config: dict
    artifacts: dict = field(default_factory=dict)
    cells: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)
    versions: dict = field(default_factory=dict)

    @classmethod
    def for_config(cls, cfg: PipelineConfig, path: Path) -> RunManifest:
        cells = {c.cell_id: {"status": "pending", "stages": {}} for c in cfg.cells()}
        m = cls(cfg.snapshot(), cells=cells, versions={
            "ohs_bench": __version__, "numpy": np.__version__, "python": platform.python_version()})
        if path.exists():
            old = _read_json(path)
            if old.get("config") == m.config:
                m.artifacts, m.stages = old.get("artifacts", {}), old.get("stages", {})
                for cid, entry in old.get("cells", {}).items():
                    if cid in m.cells:
                        m.cells[cid] = entry
        return m

    def record(self, cell_id: str, stage: str, status: str, artifact: str | None = None) -> None:
        entry = self.cells[cell_id]
        entry["stages"][stage] = status
        if artifact is not None:
            entry.setdefault("artifacts", {})[stage] = artifact
        order = [s for s in STAGES if s in entry["stages"]]
        failed = [f"{s}: {entry['stages'][s]}" for s in order if entry["stages"][s].startswith("failed")]
        notes = [f"{s}: {entry['stages'][s]}" for s in order if entry["stages"][s].startswith("diverged")]
        entry["status"] = failed[0] if failed else (notes[0] if notes else "ok")

    def failures(self) -> list[str]:
        return [cid for cid, e in self.cells.items() if e["status"].split(": ", 1)[-1].startswith("failed")]

    def save(self, path: Path) -> None:
        _write_json(path, asdict(self))


class Pipeline:
    def __init__(self, cfg: PipelineConfig, out: str | Path | None = None, workers: int | None = None,
                 only: dict[str, set[str]] | None = None):
        self.cfg = cfg
        self.out = Path(out if out is not None else cfg.output_dir)
        w = workers if workers is not None else cfg.workers
        self.workers = w if w and w > 0 else (os.cpu_count() or 1)
        self.only = only or {}
        self.cells = filter_cells(cfg.cells(), self.only)
        self.manifest_path = self.out / "manifest.json"
        self.manifest = RunManifest.for_config(cfg, self.manifest_path)

    # paths
    @property
    def dataset_path(self) -> Path:
        return self.out / "data" / "dataset.ohsd"

    def train_dir(self, cell: GridCell) -> Path:
        return self.out / "train" / cell.training_id / f"s{cell.learner_steps}"

    def gt_path(self, cell: GridCell) -> Path:
        return self.out / "ground_truth" / f"{cell.cell_id}.json"

    def fqe_dir(self, cell: GridCell, steps: int | None = None) -> Path:
        base = self.out / "fqe" / cell.cell_id
        return base if steps is None else base / f"s{steps}"

    @property
    def stats_path(self) -> Path:
        return self.out / "stats" / "statistics.json"

    @property
    def report_dir(self) -> Path:
        return self.out / "reports"

    @property
    def fqe_checkpoints(self) -> list[int]:
        return sorted(set(self.cfg.fqe.checkpoints) | {self.cfg.fqe.learner_steps})

    # helpers
    def _map(self, fn, jobs):
        if self.workers <= 1 or len(jobs) <= 1:
            return [fn(j) for j in jobs]
        with ProcessPoolExecutor(max_workers=min(self.workers, len(jobs))) as pool:
            return list(pool.map(fn, jobs))

    def _live_cells(self, stage: str) -> list[GridCell]:
        """Selected cells whose earlier stages have not failed."""
        live = []
        for cell in self.cells:
            status = self.manifest.cells[cell.cell_id]["stages"]
            failed = [s for s in STAGES[:STAGES.index(stage)] if status.get(s, "").startswith("failed")]
            if failed:
                log.warning("%s: skipping %s (failed at %s)", stage, cell.cell_id, failed[0])
            else:
                live.append(cell)
        return live

    def _rel(self, path) -> str:
        return Path(path).relative_to(self.out).as_posix()

    def _finish(self, stage: str, started: float, **info) -> None:
        self.manifest.stages[stage] = {"seconds": round(time.perf_counter() - started, 3), **info}
        self.manifest.save(self.manifest_path)

    def _dataset_hash(self, stage: str) -> str:
        stamp = self.out / "data" / "stamp.json"
        if not stamp.exists() or not self.dataset_path.exists():
            raise StageDependencyError(stage, "gen-data", f"{self.dataset_path} not found")
        return _read_json(stamp)["sha256"]

    def _train_stamp(self, stage: str, cell: GridCell) -> dict:
        path = self.train_dir(cell) / "stamp.json"
        if not path.exists():
            raise StageDependencyError(stage, "train", f"no artifact for {cell.cell_id} at {path.parent}")
        return _read_json(path)

    # stages
    def gen_data(self) -> dict:
        t0 = time.perf_counter()
        cfg = self.cfg
        inputs = {"env": cfg.env, "episodes": cfg.dataset.episodes,
                  "epsilons": list(cfg.dataset.epsilons), "seed": cfg.dataset_seed}
        input_hash = _hash(inputs)
        stamp_path = self.out / "data" / "stamp.json"
        stamp = _stamp_matches(stamp_path, input_hash)
        if stamp and self.dataset_path.exists() and \
                hashlib.sha256(self.dataset_path.read_bytes()).hexdigest() == stamp["sha256"]:
            log.info("gen-data: dataset up to date, skipping")
            self._finish("gen-data", t0, skipped=True)
            return stamp
        env = make_env(cfg.env)
        ds = generate_dataset(env, BehaviorSpec(tuple(cfg.dataset.epsilons)), cfg.dataset.episodes,
                              seed=cfg.dataset_seed)
        self.dataset_path.parent.mkdir(parents=True, exist_ok=True)
        digest = ds.save(self.dataset_path)
        stamp = {"input_hash": input_hash, "sha256": digest, "transitions": len(ds)}
        _write_json(stamp_path, stamp)
        self.manifest.artifacts["dataset"] = self._rel(self.dataset_path)
        self._finish("gen-data", t0, skipped=False)
        return stamp

    def train(self) -> list[str]:
        t0 = time.perf_counter()
        ds_hash = self._dataset_hash("train")
        trainer = asdict(self.cfg.trainer) | {"gamma": self.cfg.gamma}
        runs: dict[tuple, list[GridCell]] = {}
        for cell in self.cfg.cells():
            runs.setdefault(cell.training_key, []).append(cell)
        wanted = {c.training_key for c in self.cells}
        jobs = []
        for key, cells in runs.items():
            if key not in wanted:
                continue
            steps = sorted({c.learner_steps for c in cells})
            setting = cells[0].setting(self.cfg.master_seed)
            job = {"out": str(self.out), "dataset": str(self.dataset_path), "trainer": trainer,
                   "setting": asdict(setting), "steps": steps,
                   "dirs": {c.learner_steps: str(self.train_dir(c)) for c in cells}}
            job["input_hash"] = _hash({"ds": ds_hash, "trainer": trainer, "setting": job["setting"],
                                       "steps": steps})
            jobs.append(job)
        results = self._map(_train_job, jobs)
        for job, statuses in zip(jobs, results):
            for cell in runs[tuple(_setting_key(job["setting"]))]:
                self.manifest.record(cell.cell_id, "train", statuses[str(cell.learner_steps)],
                                     self._rel(self.train_dir(cell)))
        self._finish("train", t0, jobs=len(jobs), cells=len(self.cells))
        return [c.cell_id for c in self.cells]

    def ground_truth(self) -> None:
        t0 = time.perf_counter()
        cfg = self.cfg
        eval_seed = derive_seed(cfg.master_seed, "ground-truth")
        jobs = []
        for cell in self._live_cells("ground-truth"):
            stamp = self._train_stamp("ground-truth", cell)
            inputs = {"train": stamp["input_hash"], "episodes": cfg.ground_truth_episodes,
                      "gamma": cfg.gamma, "seed": eval_seed, "env": cfg.env}
            jobs.append({"cell_id": cell.cell_id, "artifact": str(self.train_dir(cell)),
                         "path": str(self.gt_path(cell)), "env": cfg.env, "gamma": cfg.gamma,
                         "episodes": cfg.ground_truth_episodes, "seed": eval_seed,
                         "input_hash": _hash(inputs)})
        for job, status in zip(jobs, self._map(_ground_truth_job, jobs)):
            self.manifest.record(job["cell_id"], "ground-truth", status, self._rel(job["path"]))
        self._finish("ground-truth", t0, jobs=len(jobs))

    def fqe(self) -> None:
        t0 = time.perf_counter()
        cfg = self.cfg
        ds_hash = self._dataset_hash("fqe")
        f = asdict(cfg.fqe)
        checkpoints = self.fqe_checkpoints
        jobs = []
        for cell in self._live_cells("fqe"):
            stamp = self._train_stamp("fqe", cell)
            fcfg = {k: v for k, v in f.items() if k != "checkpoints"}
            fcfg |= {"gamma": cfg.gamma, "seed": derive_seed(cfg.master_seed, "fqe", cell.cell_id)}
            inputs = {"ds": ds_hash, "train": stamp["input_hash"], "fqe": fcfg, "checkpoints": checkpoints}
            jobs.append({"cell_id": cell.cell_id, "artifact": str(self.train_dir(cell)),
                         "dataset": str(self.dataset_path), "fqe": fcfg, "checkpoints": checkpoints,
                         "dir": str(self.fqe_dir(cell)), "input_hash": _hash(inputs)})
        for job, status in zip(jobs, self._map(_fqe_job, jobs)):
            final = Path(job["dir"]) / f"s{cfg.fqe.learner_steps}"
            self.manifest.record(job["cell_id"], "fqe", status, self._rel(final))
        self._finish("fqe", t0, jobs=len(jobs))

    def stats(self) -> list[dict]:
        t0 = time.perf_counter()
        cfg = self.cfg
        ds_hash = self._dataset_hash("stats")
        dataset = Dataset.load(self.dataset_path)
        thresholds = list(cfg.soft_opc_thresholds) or ohs.default_thresholds(dataset, cfg.gamma)
        live = self._live_cells("stats")
        upstream = []
        for cell in live:
            train = self._train_stamp("stats", cell)
            fstamp = self.fqe_dir(cell) / "stamp.json"
            if not fstamp.exists():
                raise StageDependencyError("stats", "fqe", f"no FQE critic for {cell.cell_id}")
            upstream.append([cell.cell_id, train["input_hash"], _read_json(fstamp)["input_hash"]])
        inputs = {"ds": ds_hash, "cells": upstream, "statistics": list(cfg.statistics),
                  "thresholds": thresholds, "gamma": cfg.gamma, "checkpoints": self.fqe_checkpoints}
        input_hash = _hash(inputs)
        existing = _stamp_matches(self.stats_path, input_hash)
        if existing:
            log.info("stats: up to date, skipping")
            self._finish("stats", t0, skipped=True)
            return existing["cells"]
        jobs = [{"cell_id": c.cell_id, "algorithm": c.algorithm, "dataset": str(self.dataset_path),
                 "artifact": str(self.train_dir(c)), "fqe_dir": str(self.fqe_dir(c)),
                 "final": cfg.fqe.learner_steps, "checkpoints": self.fqe_checkpoints,
                 "statistics": list(cfg.statistics), "thresholds": thresholds, "gamma": cfg.gamma}
                for c in live]
        cells = self._map(_stats_job, jobs)
        for entry in cells:
            self.manifest.record(entry["cell_id"], "stats", entry["status"])
        _write_json(self.stats_path, {"input_hash": input_hash, "thresholds": thresholds, "cells": cells})
        self.manifest.artifacts["statistics"] = self._rel(self.stats_path)
        self._finish("stats", t0, skipped=False)
        return cells

    def report(self) -> dict[str, Path]:
        t0 = time.perf_counter()
        if not self.stats_path.exists():
            raise StageDependencyError("report", "stats", f"{self.stats_path} not found")
        stats = _read_json(self.stats_path)
        live = self._live_cells("report")
        wanted = {c.cell_id for c in live}
        cells = [e for e in stats["cells"] if e["cell_id"] in wanted]
        actual, algorithms = {}, {}
        for cell in live:
            path = self.gt_path(cell)
            if not path.exists():
                raise StageDependencyError("report", "ground-truth", f"{path} not found")
            gt = _read_json(path)
            if gt.get("value") is not None:
                actual[cell.cell_id] = gt["value"]
            algorithms[cell.cell_id] = cell.algorithm
        values = [ohs.StatisticValue(e["cell_id"], s["source"], s["kind"], s["value"], s["params"])
                  for e in cells for s in e["statistics"] if s["value"] is not None]
        ks = sorted(self.cfg.ks)
        rows = ohs.rank_report(values, actual, algorithms, ks=ks)
        sweep_rows = _fqe_step_rows(cells, actual, algorithms, ks)
        self.report_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "statistics": self.report_dir / "statistics.csv",
            "ranking": self.report_dir / "ranking.csv",
            "scatter": self.report_dir / "scatter.csv",
            "fqe_steps": self.report_dir / "fqe_steps.csv",
        }
        paths["statistics"].write_text(_statistics_csv(values, actual, algorithms))
        paths["ranking"].write_text(_ranking_csv(rows, ks))
        paths["scatter"].write_text(_scatter_csv(self.cfg.env, values, actual, algorithms))
        paths["fqe_steps"].write_text(_ranking_csv(sweep_rows, ks, first=("fqe_steps",)))
        _write_json(self.report_dir / "schema.json", {"version": REPORT_VERSION, "columns": {
            "statistics": list(STAT_COLUMNS), "ranking": list(_ranking_columns(ks)),
            "scatter": list(SCATTER_COLUMNS), "fqe_steps": ["fqe_steps", *_ranking_columns(ks)]}})
        self.manifest.artifacts["reports"] = {k: self._rel(p) for k, p in paths.items()}
        self._finish("report", t0)
        return paths

    def run_stage(self, stage: str):
        fn = {"gen-data": self.gen_data, "train": self.train, "ground-truth": self.ground_truth,
              "fqe": self.fqe, "stats": self.stats, "report": self.report}.get(stage)
        if fn is None:
            raise ValueError(f"unknown stage {stage!r}; choose from {STAGES}")
        return fn()

    def run(self) -> RunManifest:
        for stage in STAGES:
            log.info("stage %s", stage)
            self.run_stage(stage)
        return self.manifest


def run(cfg: PipelineConfig, out=None, workers=None, only=None) -> RunManifest:
    return Pipeline(cfg, out, workers, only).run()


# jobs (top-level so they pickle into worker processes)

def _setting_key(setting: dict) -> tuple:
    return (setting["algorithm"], setting["hidden_size"], setting["num_blocks"],
            setting["learning_rate"], setting["beta"])


def _train_job(job: dict) -> dict[str, str]:
    from .orl import HyperparameterSetting
    stamps = {s: Path(d) / "stamp.json" for s, d in job["dirs"].items()}
    cached = {s: _stamp_matches(p, job["input_hash"]) for s, p in stamps.items()}
    if all(cached.values()):
        return {str(s): c["status"] for s, c in cached.items()}
    try:
        dataset = Dataset.load(job["dataset"])
        config = TrainerConfig(**job["trainer"])
        setting = HyperparameterSetting(**job["setting"])
        artifacts = train_snapshots(dataset, setting, config, job["steps"], grid_for(dataset, config.gamma))
    except Exception as exc:  # recorded per job, the grid carries on
        log.exception("training failed for %s", job["setting"])
        return {str(s): f"failed: {type(exc).__name__}: {exc}" for s in job["dirs"]}
    out = {}
    for art in artifacts:
        d = Path(job["dirs"][art.setting.learner_steps])
        art.save(d)
        _write_json(d / "stamp.json", {"input_hash": job["input_hash"], "status": art.status})
        out[str(art.setting.learner_steps)] = art.status
    return out


def _ground_truth_job(job: dict) -> str:
    path = Path(job["path"])
    if (c := _stamp_matches(path, job["input_hash"])) is not None:
        return c["status"]
    try:
        art = PolicyArtifact.load(job["artifact"])
        value, stderr = actual_value(make_env(job["env"]), art.policy.act, job["episodes"],
                                     job["gamma"], seed=job["seed"])
        result = {"value": value, "stderr": stderr, "status": "ok"}
    except Exception as exc:
        log.exception("ground truth failed for %s", job["cell_id"])
        result = {"value": None, "stderr": None, "status": f"failed: {type(exc).__name__}: {exc}"}
    _write_json(path, {"input_hash": job["input_hash"], "cell_id": job["cell_id"],
                       "episodes": job["episodes"], "seed": job["seed"], **result})
    return result["status"]


def _fqe_job(job: dict) -> str:
    base = Path(job["dir"])
    stamp_path = base / "stamp.json"
    if (c := _stamp_matches(stamp_path, job["input_hash"])) is not None:
        return c["status"]
    try:
        dataset = Dataset.load(job["dataset"])
        art = PolicyArtifact.load(job["artifact"])
        config = FqeConfig(**job["fqe"])
        critics = fqe_step_sweep(dataset, art.policy, config, job["checkpoints"],
                                 policy_ref=job["artifact"])
        for fc in critics:
            fc.save(base / f"s{fc.steps}")
        status = critics[-1].status
    except Exception as exc:
        log.exception("FQE failed for %s", job["cell_id"])
        status = f"failed: {type(exc).__name__}: {exc}"
    _write_json(stamp_path, {"input_hash": job["input_hash"], "status": status})
    return status


def _safe(fn, *args) -> float | None:
    try:
        value = fn(*args)
    except ohs.UndefinedStatisticError:
        return None
    return value if math.isfinite(value) else None


def _statistic_rows(critic, policy, dataset, source, kinds, thresholds, gamma) -> list[dict]:
    scalar = {"v_s0": lambda: ohs.v_s0(critic, policy, dataset),
              "avg_q": lambda: ohs.avg_q(critic, policy, dataset),
              "td_err": lambda: ohs.td_err(critic, policy, dataset, gamma)}
    rows = []
    for kind in kinds:
        if kind == "soft_opc":
            for t in thresholds:
                value = _safe(ohs.soft_opc, critic, policy, dataset, t, gamma)
                rows.append({"source": source, "kind": kind, "params": f"threshold={t:.6g}", "value": value})
        else:
            rows.append({"source": source, "kind": kind, "params": "", "value": _safe(scalar[kind])})
    return rows


def _stats_job(job: dict) -> dict:
    entry = {"cell_id": job["cell_id"], "algorithm": job["algorithm"], "statistics": [],
             "fqe_sweep": {}, "status": "ok"}
    try:
        dataset = Dataset.load(job["dataset"])
        art = PolicyArtifact.load(job["artifact"])
        policy = art.policy.act
        kinds, thresholds, gamma = job["statistics"], job["thresholds"], job["gamma"]
        entry["statistics"] += _statistic_rows(art.critic, policy, dataset, "ORL", kinds, thresholds, gamma)
        fqe_dir = Path(job["fqe_dir"])
        critics = {s: FqeCritic.load(fqe_dir / f"s{s}") for s in job["checkpoints"]}
        final = critics[job["final"]]
        entry["statistics"] += _statistic_rows(final.critic, policy, dataset, "OPE", kinds, thresholds, gamma)
        entry["fqe_sweep"] = {str(s): _safe(ohs.v_s0, fc.critic, policy, dataset)
                              for s, fc in critics.items()}
    except Exception as exc:
        log.exception("statistics failed for %s", job["cell_id"])
        entry["status"] = f"failed: {type(exc).__name__}: {exc}"
    return entry


# report writers

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x) if math.isfinite(x) else "nan"
    return str(x)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def _ranking_columns(ks) -> tuple:
    return ("statistic", "source", "params", "group", "n", "spearman",
            *[f"regret@{k}" for k in ks], *[f"normalized_regret@{k}" for k in ks],
            "median_baseline", "normalized_median_baseline", "mean_abs_error", "note")


def _ranking_csv(rows, ks, first=()) -> str:
    out = []
    for r in rows:
        lead = [getattr(r, "fqe_steps")] if first else []
        out.append([*lead, r.kind, r.source, r.params, r.group, r.n, r.spearman,
                    *[r.regret_at_k.get(k) for k in ks], *[r.normalized_regret_at_k.get(k) for k in ks],
                    r.median_baseline, r.normalized_median_baseline, r.mean_abs_error, r.note])
    return _csv([*first, *_ranking_columns(ks)], out)


def _statistics_csv(values, actual, algorithms) -> str:
    rows = []
    for sv in sorted(values, key=lambda s: (s.policy_id, s.source, ohs.STATISTICS.index(s.kind),
                                            ohs._param_sort(s.params))):
        a = actual.get(sv.policy_id)
        err = ohs.abs_error(sv.value, a) if a is not None else None
        rows.append([sv.policy_id, algorithms.get(sv.policy_id, ""), sv.source, sv.kind, sv.params,
                     float(sv.value), a, err])
    return _csv(STAT_COLUMNS, rows)


def _scatter_csv(env, values, actual, algorithms) -> str:
    rows = [[env, sv.policy_id, algorithms.get(sv.policy_id, ""), sv.source, float(sv.value),
             actual.get(sv.policy_id)]
            for sv in sorted(values, key=lambda s: (s.source, s.policy_id)) if sv.kind == "v_s0"]
    return _csv(SCATTER_COLUMNS, rows)


def _fqe_step_rows(cells, actual, algorithms, ks) -> list:
    steps = sorted({int(s) for e in cells for s in e["fqe_sweep"]})
    rows = []
    for s in steps:
        values = {e["cell_id"]: e["fqe_sweep"].get(str(s)) for e in cells}
        for group in ohs.GROUPS:
            ids = sorted(pid for pid, v in values.items() if v is not None and pid in actual
                         and (group == "all" or algorithms.get(pid) == group))
            r = ohs.group_metrics("v_s0", "OPE", "", group, [values[p] for p in ids],
                                  [actual[p] for p in ids], ks)
            r.fqe_steps = s
            rows.append(r)
    return rows
