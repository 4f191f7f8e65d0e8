import json
import subprocess
import sys

import numpy as np
import pytest

from nsgp_repre import cli, harness
from nsgp_repre.data import load

SMALL = {"task": {"input_dim": 6, "classes_per_stage": [2, 2, 2], "train_per_class": 30,
                  "test_per_class": 20}, "epochs": 3, "hidden": [16, 16], "K": 3}


@pytest.fixture
def cfg(tmp_path, monkeypatch):
    monkeypatch.delenv(harness.ENV_OUTPUT_DIR, raising=False)
    monkeypatch.delenv(harness.ENV_SEED, raising=False)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return path


def test_init_config_round_trips(tmp_path):
    assert cli.main(["init-config", str(tmp_path / "c.json")]) == 0
    doc = json.loads((tmp_path / "c.json").read_text())
    assert harness.ExperimentConfig.from_dict(doc) == harness.ExperimentConfig()


def test_gen_data(cfg, tmp_path):
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d"), "--csv"]) == 0
    assert load(tmp_path / "d" / "datasets.bin") == load(tmp_path / "d" / "datasets.csv")
    meta = json.loads((tmp_path / "d" / "task.json").read_text())
    assert len(meta["sha256"]) == 64


def test_full_pipeline(cfg, tmp_path):
    run = tmp_path / "run"
    assert cli.main(["run", "--config", str(cfg), "--out", str(run)]) == 0
    assert cli.main(["anatomy", str(run)]) == 0
    assert cli.main(["spectra", str(run)]) == 0
    assert cli.main(["emit-plots", str(run)]) == 0
    for name in ("metrics.csv", "metrics.json", "anatomy.csv", "spectra.csv", "plots/accuracy.png",
                 "plots/anatomy.png", "plots/spectra.png"):
        assert (run / name).exists(), name
    assert (run / "spectra.csv").read_text().startswith("layer,index,lambda\n")


def test_run_from_saved_data_matches_regenerated(cfg, tmp_path):
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    assert cli.main(["run", "--config", str(cfg), "--data", str(tmp_path / "d" / "datasets.bin"),
                     "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_env_overrides_output_and_seed(cfg, tmp_path, monkeypatch):
    monkeypatch.setenv(harness.ENV_OUTPUT_DIR, str(tmp_path / "envout"))
    monkeypatch.setenv(harness.ENV_SEED, "3")
    assert cli.main(["run", "--config", str(cfg), "--method", "finetune"]) == 0
    written = json.loads((tmp_path / "envout" / "config.json").read_text())
    assert written["seed"] == 3 and written["task"]["seed"] == 3
    # an explicit flag beats the environment
    assert cli.main(["run", "--config", str(cfg), "--method", "finetune", "--seed", "4",
                     "--out", str(tmp_path / "flag")]) == 0
    assert json.loads((tmp_path / "flag" / "config.json").read_text())["seed"] == 4


def test_ablation_and_plots(cfg, tmp_path):
    out = tmp_path / "ab"
    assert cli.main(["ablation", "--config", str(cfg), "--seeds", "2", "--methods", "finetune,nsgp_repre",
                     "--out", str(out)]) == 0
    table = json.loads((out / "ablation.json").read_text())["table"]
    assert [r["method"] for r in table] == ["finetune", "nsgp_repre"]
    assert cli.main(["emit-plots", str(out)]) == 0
    assert (out / "plots" / "ablation.png").exists()


def test_invalid_metrics_give_nonzero_exit(cfg, tmp_path, monkeypatch):
    real = harness.run_experiment

    def broken(config, stages=None):
        res = real(config, stages)
        res.record.mse[0, 0] = np.nan
        return res

    monkeypatch.setattr(harness, "run_experiment", broken)
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 1
    assert not (tmp_path / "r" / "metrics.csv").exists()


def test_errors_give_nonzero_exit(cfg, tmp_path, capsys):
    assert cli.main(["anatomy", str(tmp_path / "missing")]) == 1
    assert cli.main(["emit-plots", str(tmp_path)]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"method": "nope"}))
    assert cli.main(["run", "--config", str(bad)]) == 1
    assert "error:" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def test_spectra_without_projections_fails(cfg, tmp_path):
    assert cli.main(["run", "--config", str(cfg), "--method", "finetune", "--out", str(tmp_path / "r")]) == 0
    assert cli.main(["spectra", str(tmp_path / "r")]) == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "nsgp_repre", "init-config"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["method"] == "nsgp_repre"
