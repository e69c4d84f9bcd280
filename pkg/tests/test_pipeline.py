import csv
import json

import numpy as np
import pytest

from ohs_bench import pipeline as pipeline_mod
from ohs_bench.config import config_from_dict, parse_only
from ohs_bench.dataset import Dataset
from ohs_bench.fqe import FqeCritic
from ohs_bench.ohs import v_s0
from ohs_bench.orl import PolicyArtifact
from ohs_bench.pipeline import STAT_COLUMNS, Pipeline, StageDependencyError, run

TINY = {
    "env": "chainwalk", "ks": [1, 2], "ground_truth_episodes": 5,
    "dataset": {"episodes": 20},
    "grid": {"hidden_size": [8], "learning_rate": [1e-3], "learner_steps": [20, 40]},
    "fqe": {"hidden_size": 8, "learner_steps": 50, "checkpoints": [25]},
}


def tiny(**overrides):
    return config_from_dict({**TINY, **overrides})


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    manifest = run(tiny(), out=out, workers=1)
    return out, manifest


def test_run_emits_every_report(tiny_run):
    out, manifest = tiny_run
    for name in ("statistics.csv", "ranking.csv", "scatter.csv", "fqe_steps.csv", "schema.json"):
        assert (out / "reports" / name).exists(), name
    assert set(manifest.cells) == {c.cell_id for c in tiny().cells()}
    assert all(e["status"] == "ok" for e in manifest.cells.values())
    header = (out / "reports" / "statistics.csv").read_text().splitlines()[0]
    assert header.split(",") == list(STAT_COLUMNS)


def test_manifest_provenance_recomputes_a_report_number(tiny_run):
    out, _ = tiny_run
    m = json.loads((out / "manifest.json").read_text())
    cell_id, entry = sorted(m["cells"].items())[0]
    ds = Dataset.load(out / m["artifacts"]["dataset"])
    policy = PolicyArtifact.load(out / entry["artifacts"]["train"]).policy
    critic = FqeCritic.load(out / entry["artifacts"]["fqe"]).critic
    rows = [r for r in read_rows(out / m["artifacts"]["reports"]["statistics"])
            if r["policy_id"] == cell_id and r["source"] == "OPE" and r["statistic"] == "v_s0"]
    assert float(rows[0]["value"]) == v_s0(critic, policy, ds)
    gt = json.loads((out / entry["artifacts"]["ground-truth"]).read_text())
    assert float(rows[0]["actual_value"]) == gt["value"]


def test_rerun_is_idempotent_and_deterministic(tiny_run, tmp_path):
    out, _ = tiny_run
    before = {p.name: p.read_bytes() for p in (out / "reports").iterdir()}
    mtimes = {p: p.stat().st_mtime_ns for p in (out / "train").rglob("*.ohsw")}
    run(tiny(), out=out, workers=1)
    assert {p: p.stat().st_mtime_ns for p in (out / "train").rglob("*.ohsw")} == mtimes
    fresh = tmp_path / "fresh"
    run(tiny(), out=fresh, workers=2)
    for name, data in before.items():
        assert (out / "reports" / name).read_bytes() == data, name
        assert (fresh / "reports" / name).read_bytes() == data, name


def test_gen_data_twice_is_a_no_op(tmp_path):
    pipe = Pipeline(tiny(), out=tmp_path, workers=1)
    pipe.gen_data()
    stamp = pipe.dataset_path.stat().st_mtime_ns
    pipe.gen_data()
    assert pipe.manifest.stages["gen-data"]["skipped"] is True
    assert pipe.dataset_path.stat().st_mtime_ns == stamp


def test_changed_seed_regenerates_data(tmp_path):
    Pipeline(tiny(), out=tmp_path, workers=1).gen_data()
    first = (tmp_path / "data" / "dataset.ohsd").read_bytes()
    pipe = Pipeline(tiny(master_seed=5), out=tmp_path, workers=1)
    pipe.gen_data()
    assert pipe.manifest.stages["gen-data"]["skipped"] is False
    assert (tmp_path / "data" / "dataset.ohsd").read_bytes() != first


@pytest.mark.parametrize("stage,missing", [("report", "stats"), ("stats", "gen-data"),
                                           ("train", "gen-data"), ("fqe", "gen-data")])
def test_missing_upstream_raises_dependency_error(tmp_path, stage, missing):
    with pytest.raises(StageDependencyError) as info:
        Pipeline(tiny(), out=tmp_path, workers=1).run_stage(stage)
    assert info.value.missing_stage == missing
    assert f"'{missing}'" in str(info.value)


def test_ground_truth_needs_training(tmp_path):
    pipe = Pipeline(tiny(), out=tmp_path, workers=1)
    pipe.gen_data()
    with pytest.raises(StageDependencyError, match="'train'"):
        pipe.ground_truth()


def test_only_filter_trains_selected_cells(tmp_path):
    pipe = Pipeline(tiny(), out=tmp_path, workers=1, only=parse_only("algorithm=BC"))
    pipe.gen_data()
    trained = pipe.train()
    assert len(trained) == 2 and all(c.startswith("BC-") for c in trained)
    assert sorted(p.name for p in (tmp_path / "train").iterdir()) == ["BC-h8-b1-lr0.001"]


def test_single_cell_zero_steps_marks_spearman_undefined(tmp_path):
    cfg = tiny(ks=[1], grid={"algorithms": ["BC"], "hidden_size": [8], "learning_rate": [1e-3],
                             "learner_steps": [0]})
    run(cfg, out=tmp_path, workers=1)
    rows = read_rows(tmp_path / "reports" / "ranking.csv")
    assert rows and all(r["spearman"] == "" for r in rows)
    assert any("fewer than 2" in r["note"] for r in rows)


def test_failed_job_is_recorded_and_reports_still_emitted(tmp_path, monkeypatch):
    real = pipeline_mod.train_snapshots

    def failing(dataset, setting, *args, **kwargs):
        if setting.algorithm == "CRR":
            raise RuntimeError("boom")
        return real(dataset, setting, *args, **kwargs)

    monkeypatch.setattr(pipeline_mod, "train_snapshots", failing)
    manifest = run(tiny(), out=tmp_path, workers=1)
    failed = manifest.failures()
    assert sorted(failed) == sorted(c.cell_id for c in tiny().cells() if c.algorithm == "CRR")
    assert "boom" in manifest.cells[failed[0]]["status"]
    ids = {r["policy_id"] for r in read_rows(tmp_path / "reports" / "statistics.csv")}
    assert ids and not any(i.startswith("CRR") for i in ids)


def test_scatter_rows_pair_estimates_with_actual_values(tiny_run):
    out, _ = tiny_run
    rows = read_rows(out / "reports" / "scatter.csv")
    assert {r["source"] for r in rows} == {"ORL", "OPE"}
    assert all(np.isfinite(float(r["estimate"])) and np.isfinite(float(r["actual_value"])) for r in rows)
    assert len(rows) == 2 * len(tiny().cells())
