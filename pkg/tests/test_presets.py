import json

import pytest

from sbt.errors import ConfigError
from sbt.model import Linear
from utils.get_model import get_model
from utils.presets import list_presets, load_all_presets, load_preset

SHIPPED = {
    "arabic_digits", "ecl", "ettm1", "face_detection", "heartbeat", "insect_wingbeats",
    "japanese_vowels", "msl", "smap", "smd", "weather",
}


def test_shipped_presets():
    assert set(list_presets()) == SHIPPED
    presets = load_all_presets()
    assert len(presets) == 11
    assert all(p.model.name == p.name for p in presets)
    anomaly = [p for p in presets if p.model.task == "anomaly"]
    assert anomaly and all(p.detect is not None for p in anomaly)


def test_lookup_normalizes_names():
    assert load_preset("Japanese-Vowels").model.n_classes == 9


def test_unknown_preset_suggests_closest():
    with pytest.raises(ConfigError, match="did you mean 'japanese_vowels'"):
        load_preset("japanese_vowel")


def test_bare_model_config_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({"task": "forecasting", "m": 2, "w": 8, "d": 8, "ff": 16}))
    preset = load_preset(str(path))
    assert preset.name == "tiny"
    assert preset.train.epochs == 50


def test_invalid_preset_files(tmp_path):
    broken = tmp_path / "broken.json"
    broken.write_text("{")
    with pytest.raises(ConfigError):
        load_preset(str(broken))
    extra = tmp_path / "extra.json"
    extra.write_text(json.dumps({"name": "x", "model": {"task": "anomaly", "m": 2, "w": 8, "d": 8}, "lr": 1}))
    with pytest.raises(ConfigError):
        load_preset(str(extra))
    with pytest.raises(ConfigError):
        load_preset(str(tmp_path / "absent.json"))


def test_get_model_twins_and_seed():
    config = load_preset("smap").model
    dense = get_model(config, seed=4, dense=True)
    assert dense.config.dense_mode and dense.config.seed == 4
    assert isinstance(dense.modules["layers.0.attn.q"], Linear)
    assert dense.config.attention == "canonical"

    sbt = get_model(dense.config, dense=False)
    assert not sbt.config.dense_mode
    assert sbt.config.attention == "step_t"
