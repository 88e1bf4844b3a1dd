"""
End-to-end checks of the command line on a tiny configuration.
"""

import json
import shutil

import pandas as pd
import pytest

from app import main
from src.config import OUT_ENV_VAR

TINY_RUN = {
    "model": {"vocab": 16, "seq_len": 6, "d_model": 8, "n_blocks": 2, "ffn_hidden": 12, "n_classes": 4,
              "edited_layers": ["blocks.1.ffn.w_out"]},
    "recipe": {"lr0": 0.1, "epochs": 5, "rank": 2},
    "benchmark": {"n_edits": 4, "instances_per_edit": 1, "holdout_size": 20, "n_train": 128, "n_test": 32},
    "base_epochs": 2,
    "progress_holdout": 10,
    "rollback_count": 2,
    # tiny recipe: ES is not pinned
    "es_target": 0.0,
    "drift_min_updates": 3,
    "radius_grid": [1e-9, 2.5],
    "ranks": [1, 2],
    "layer_windows": ["0-0", "1-1"],
}


def _run(*argv):
    return main([*argv, "--quiet"])


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("config") / "tiny.json"
    path.write_text(json.dumps(TINY_RUN), encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, config_file):
    out = tmp_path_factory.mktemp("run")
    with pytest.MonkeyPatch.context() as mp:
        mp.delenv(OUT_ENV_VAR, raising=False)
        assert _run("run", "--config", config_file, "--out", str(out)) == 0
    return out


@pytest.fixture(autouse=True)
def _no_env_out(monkeypatch):
    monkeypatch.delenv(OUT_ENV_VAR, raising=False)


def test_run_writes_every_stage(run_dir):
    for name in ("config.json", "benchmark/meta.json", "base_model.json", "train_report.json", "edits/pool.json",
                 "edits/memory.json", "edits/records.jsonl", "edits/progress.csv", "holdout_cleared.jsonl",
                 "metrics.json", "metrics.csv", "timings.json", "run.log"):
        assert (run_dir / name).exists(), name
    metrics = json.loads((run_dir / "metrics.json").read_text(encoding="utf-8"))
    assert metrics["n_edits"] == 4
    assert metrics["err"] == metrics["es_rate"]
    assert metrics["mismatches"] == 0
    assert metrics["trainable_params_per_edit"] == 2 * (8 + 12)
    assert len(pd.read_csv(run_dir / "edits" / "progress.csv")) == 4


def test_same_seed_gives_identical_artifacts(run_dir, config_file, tmp_path):
    assert _run("run", "--config", config_file, "--out", str(tmp_path)) == 0
    for name in ("metrics.json", "edits/memory.json", "edits/pool.json", "benchmark/edit_stream.jsonl"):
        assert (tmp_path / name).read_bytes() == (run_dir / name).read_bytes(), name


def test_environment_overrides_out(config_file, tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV_VAR, str(tmp_path / "env"))
    assert _run("gen", "--config", config_file, "--out", str(tmp_path / "flag")) == 0
    assert (tmp_path / "env" / "benchmark" / "meta.json").exists()
    assert not (tmp_path / "flag").exists()


def test_rollback_then_eval(run_dir, config_file, tmp_path):
    copy = tmp_path / "copy"
    shutil.copytree(run_dir, copy)
    assert _run("rollback", "--config", config_file, "--out", str(copy), "--edit-ids", "1") == 0
    assert json.loads((copy / "rollbacks.json").read_text(encoding="utf-8")) == [1]
    table = pd.read_csv(copy / "rollback_table.csv")
    assert table["logits_match"].all()
    assert (table.loc[table["deleted"], "edit_id"] == 1).all()

    assert _run("eval", "--config", config_file, "--out", str(copy)) == 0
    metrics = json.loads((copy / "metrics.json").read_text(encoding="utf-8"))
    assert metrics["n_rolled_back"] == 1 and metrics["restored_to_base"] == 1
    assert metrics["total_memory_entries"] == 3


def test_random_rollback(run_dir, config_file, tmp_path):
    copy = tmp_path / "copy"
    shutil.copytree(run_dir, copy)
    assert _run("rollback", "--config", config_file, "--out", str(copy), "--random", "2") == 0
    assert len(json.loads((copy / "rollbacks.json").read_text(encoding="utf-8"))) == 2
    assert _run("rollback", "--config", config_file, "--out", str(copy), "--random", "9") == 1


def test_drift_sweep(run_dir, config_file):
    code = _run("drift", "--config", config_file, "--out", str(run_dir))
    drift = pd.read_csv(run_dir / "drift.csv")
    metrics = json.loads((run_dir / "metrics.json").read_text(encoding="utf-8"))
    assert list(drift.columns) == ["radius", "updates", "mismatches", "err", "trr", "centers"]
    assert drift["centers"].tolist() == [4, 1]
    assert drift["updates"].tolist() == [0, 3]

    degenerate, widest = drift.iloc[0], drift.iloc[1]
    assert degenerate["mismatches"] == 0
    assert degenerate["err"] == metrics["err"]
    assert degenerate["trr"] == metrics["trr_base"]
    assert widest["mismatches"] >= 1
    # the only check that depends on training quality
    assert code == (0 if widest["err"] < metrics["err"] else 1)


def test_drift_without_a_widening_radius_fails(run_dir, config_file, tmp_path):
    copy = tmp_path / "copy"
    shutil.copytree(run_dir, copy)
    assert _run("drift", "--config", config_file, "--out", str(copy), "--radius-grid", "1e-9") == 1
    assert pd.read_csv(copy / "drift.csv")["updates"].tolist() == [0]


def test_drift_needs_the_edit_run(config_file, tmp_path):
    assert _run("gen", "--config", config_file, "--out", str(tmp_path)) == 0
    assert _run("train-base", "--config", config_file, "--out", str(tmp_path)) == 0
    assert _run("drift", "--config", config_file, "--out", str(tmp_path)) == 1


def test_rank_and_layer_ablations(run_dir, config_file):
    assert _run("ablate-rank", "--config", config_file, "--out", str(run_dir), "--ranks", "1,2") == 0
    ranks = pd.read_csv(run_dir / "ablate_rank.csv")
    assert ranks["rank"].tolist() == [1, 2]
    assert ranks["trainable_params"].tolist() == [20, 40]

    assert _run("ablate-layers", "--config", config_file, "--out", str(run_dir)) == 0
    layers = pd.read_csv(run_dir / "ablate_layers.csv")
    assert layers["layers"].tolist() == ["0-0", "1-1"]
    assert layers["es"].between(0, 1).all()


def test_dump_keys(run_dir, config_file):
    assert _run("dump-keys", "--config", config_file, "--out", str(run_dir)) == 0
    keys = pd.read_csv(run_dir / "keys.csv")
    assert len(keys) == 4
    assert list(keys.columns[:5]) == ["edit_id", "instance_id", "lora_id", "pc1", "pc2"]
    assert "k7" in keys.columns


def test_missing_artifact_fails_cleanly(config_file, tmp_path):
    assert _run("eval", "--config", config_file, "--out", str(tmp_path)) == 1


@pytest.mark.parametrize("argv", [["run", "--bogus"], ["teleport"], ["rollback", "--edit-ids", "1", "--random", "2"]])
def test_usage_errors(argv):
    assert main(argv) == 2
