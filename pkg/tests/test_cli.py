import json

import numpy as np
import pandas as pd
import pytest

from main import EXIT_CONFIG, EXIT_DATA, EXIT_OK, detect_settings, main


def write_json(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


@pytest.fixture
def forecast_setup(tmp_path):
    manifest = write_json(tmp_path / "data.json", {
        "task": "forecasting", "w": 8, "synthetic": {"kind": "ar1", "m": 2, "length": 300, "seed": 0},
    })
    config = write_json(tmp_path / "tiny_fc.json", {
        "name": "tiny_fc",
        "model": {"name": "tiny_fc", "task": "forecasting", "m": 2, "w": 8, "d": 8, "ff": 16},
        "train": {"epochs": 1, "batch_size": 32},
    })
    return tmp_path, manifest, config


def train_args(config, manifest, out, *extra):
    return ["train", "--config", config, "--data", manifest, "--epochs", "1",
            "--replicates", "1", "--seed", "0", "--out", str(out), *extra]


def test_cost_report(tmp_path):
    report = tmp_path / "cost.json"
    assert main(["cost", "--config", "smd", "--report", str(report)]) == EXIT_OK
    payload = json.loads(report.read_text())
    assert set(payload) == {"comparison", "dense", "sbt"}
    assert payload["comparison"]["bits"]["sbt"] < payload["comparison"]["bits"]["dense"]


def test_cost_table_over_all_presets(capsys):
    assert main(["cost", "--all"]) == EXIT_OK
    assert "~×" in capsys.readouterr().out


def test_cost_table_follows_convention(tmp_path):
    rows = {}
    for convention in ("per_sample", "per_timestep"):
        report = tmp_path / f"{convention}.json"
        assert main(["cost", "--all", "--convention", convention, "--report", str(report)]) == EXIT_OK
        rows[convention] = json.loads(report.read_text())["rows"]
    dense = lambda table: [r["flops"] for r in table if r["model"] == "dense"]
    assert all(t > s for s, t in zip(dense(rows["per_sample"]), dense(rows["per_timestep"])))


def test_detect_settings_follow_the_preset():
    assert detect_settings("smd").r == 0.005
    assert detect_settings("smd", r=0.02).r == 0.02
    assert detect_settings("smd", q=1e-4).q == 1e-4
    assert detect_settings("smd", q=1e-4).r == 0.005
    assert detect_settings("not_a_preset").r == 0.01


def test_unknown_preset_exits_with_config_error(capsys):
    assert main(["cost", "--config", "no_such_preset"]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_unknown_scenario_is_config_error():
    assert main(["cost", "--config", "smd", "--compare", "dense,int4"]) == EXIT_CONFIG


def test_missing_model_exits_with_data_error(tmp_path):
    manifest = write_json(tmp_path / "data.json", {
        "task": "forecasting", "w": 8, "synthetic": {"kind": "ar1", "m": 2, "length": 300},
    })
    assert main(["eval", "--model", str(tmp_path / "none.sbt"), "--data", manifest]) == EXIT_DATA


def test_task_flag_mismatch(forecast_setup):
    tmp_path, manifest, config = forecast_setup
    assert main(train_args(config, manifest, tmp_path / "run", "--task", "classify")) == EXIT_CONFIG


def test_forecast_train_pack_unpack(forecast_setup):
    tmp_path, manifest, config = forecast_setup
    run = tmp_path / "run"
    assert main(train_args(config, manifest, run)) == EXIT_OK
    for name in ("config.json", "norm_stats.json", "summary.json", "train_log_seed0.jsonl",
                 "checkpoint_seed0.npz", "model_seed0.sbt"):
        assert (run / name).is_file(), name
    summary = json.loads((run / "summary.json").read_text())
    assert summary["replicates"]["seeds"] == [0]

    predictions = tmp_path / "pred.csv"
    report = tmp_path / "forecast.json"
    assert main(["forecast", "--model", str(run / "model_seed0.sbt"), "--data", manifest,
                 "--emit-predictions", str(predictions), "--report", str(report)]) == EXIT_OK
    frame = pd.read_csv(predictions)
    assert list(frame.columns) == ["t", "x0_pred", "x0_true", "x1_pred", "x1_true"]
    assert set(json.loads(report.read_text())) == {"mse", "mae", "n"}

    packed = tmp_path / "repacked.sbt"
    assert main(["pack", "--checkpoint", str(run / "checkpoint_seed0.npz"), "--out", str(packed)]) == EXIT_OK
    assert packed.read_bytes() == (run / "model_seed0.sbt").read_bytes()

    exported = tmp_path / "weights.npz"
    assert main(["unpack", "--model", str(packed), "--out", str(exported)]) == EXIT_OK
    with np.load(exported) as arrays:
        assert "input_proj.mask" in arrays.files
        assert "layers.0.norm1.alpha" in arrays.files


def test_anomaly_train_and_detect(tmp_path):
    manifest = write_json(tmp_path / "data.json", {
        "task": "anomaly", "w": 8,
        "synthetic": {"kind": "anomaly_stream", "m": 2, "length": 600, "n_segments": 4, "seed": 1},
    })
    config = write_json(tmp_path / "tiny_an.json", {
        "name": "tiny_an",
        "model": {"name": "tiny_an", "task": "anomaly", "m": 2, "w": 8, "d": 8, "ff": 16},
    })
    run = tmp_path / "run"
    assert main(train_args(config, manifest, run)) == EXIT_OK
    report = tmp_path / "detect.json"
    assert main(["detect", "--model", str(run / "model_seed0.sbt"), "--data", manifest,
                 "--threshold", "pot", "--report", str(report)]) == EXIT_OK
    payload = json.loads(report.read_text())
    assert payload["mode"] == "pot"
    assert 0.0 <= payload["adjusted"]["f1"] <= 1.0


def test_classification_train_and_eval(tmp_path):
    manifest = write_json(tmp_path / "data.json", {
        "task": "classification", "w": 16, "synthetic": {"kind": "sinusoid", "m": 2, "n_samples": 60},
    })
    config = write_json(tmp_path / "tiny_clf.json", {
        "name": "tiny_clf",
        "model": {"name": "tiny_clf", "task": "classification", "m": 2, "w": 16, "d": 8, "ff": 16, "n_classes": 2},
    })
    run = tmp_path / "run"
    assert main(train_args(config, manifest, run, "--task", "classify")) == EXIT_OK
    report = tmp_path / "eval.json"
    assert main(["eval", "--model", str(run / "model_seed0.sbt"), "--data", manifest,
                 "--report", str(report)]) == EXIT_OK
    payload = json.loads(report.read_text())
    assert 0.0 <= payload["accuracy"] <= 1.0
    assert payload["task"] == "classification"


def test_window_mismatch_exits_with_config_error(forecast_setup, capsys):
    tmp_path, manifest, config = forecast_setup
    run = tmp_path / "run"
    assert main(train_args(config, manifest, run)) == EXIT_OK
    wider = write_json(tmp_path / "wider.json", {
        "task": "forecasting", "w": 10, "synthetic": {"kind": "ar1", "m": 2, "length": 300, "seed": 0},
    })
    assert main(["eval", "--model", str(run / "model_seed0.sbt"), "--data", wider]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
