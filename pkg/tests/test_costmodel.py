import numpy as np
import pytest

from sbt.costmodel import (
    LayerSpec,
    attention_flops,
    bit_size,
    compare_scenarios,
    extra_flops,
    instrumented_count,
    layer_specs,
    linear_flops,
    model_flops,
    preset_table,
    render_table,
)
from sbt.errors import ConfigError
from sbt.model import build_model, count_params, freeze, parse_config
from utils.presets import list_presets, load_preset

FORECASTING = ("ecl", "weather", "ettm1")


def test_linear_flops_formula():
    spec = LayerSpec("input_proj", "linear", (64, 13), kept=416, rows=30)
    assert spec.kr == pytest.approx(0.5)
    assert linear_flops(spec) == 416
    assert linear_flops(spec, "per_timestep") == 416 * 30
    qkv = LayerSpec("layers.0.attn.q", "linear", (64, 64), kept=2048, rows=30, scope="qkv")
    assert linear_flops(qkv) == 2048 * 30


def test_output_projection_counted_once_per_window():
    smd = load_preset("smd").model
    specs = {s.name: s for s in layer_specs(smd)}
    wo, wq = specs["layers.0.attn.o"], specs["layers.0.attn.q"]
    assert wo.scope == "outside"
    assert linear_flops(wo) == wo.kept
    assert linear_flops(wo, "per_timestep") == wo.kept * smd.w
    assert linear_flops(wq) == wq.kept * smd.w


def test_attention_flops_formulas():
    canonical = attention_flops(LayerSpec("a", "attention", (30, 64, 2), variant="canonical"))
    assert canonical["qk"] == 57_600
    step_t = attention_flops(LayerSpec("a", "attention", (50, 50, 2), variant="step_t"))
    assert (step_t["qk"], step_t["av"]) == (2_450, 4_900)
    masked = attention_flops(LayerSpec("a", "attention", (30, 64, 2), variant="qkv_random", kr_a=0.5))
    assert masked["qk"] == pytest.approx(14_400)
    assert masked["qk"] == pytest.approx(canonical["qk"] / 4)


def test_spec_kind_checks():
    with pytest.raises(ConfigError):
        linear_flops(LayerSpec("a", "attention", (4, 4, 2), variant="canonical"))
    with pytest.raises(ConfigError):
        attention_flops(LayerSpec("l", "linear", (4, 4), kept=16))
    with pytest.raises(ConfigError):
        LayerSpec("a", "attention", (4, 4, 2), variant="qkv_random", kr_a=0.0)


def test_extra_terms():
    attn = LayerSpec("a", "attention", (50, 50, 2), variant="step_t")
    assert extra_flops(attn) == {"softmax": 2 * 49 * 2, "q_scale": 2_500}
    assert extra_flops(LayerSpec("n", "norm", (10, 8), norm_kind="layer")) == {"norm": 320}
    assert extra_flops(LayerSpec("n", "norm", (10, 8), norm_kind="batch")) == {"norm": 160}


def test_smd_flops_match_published_totals():
    smd = load_preset("smd").model
    sbt = model_flops(smd)
    dense = model_flops(smd.dense_twin())
    assert sbt.total == pytest.approx(1.9e6, rel=0.15)
    assert dense.total == pytest.approx(19.5e6, rel=0.15)
    assert sbt.total == pytest.approx(sbt.simplified + sbt.extras_total)
    assert sbt.extras_total > 0


def test_bit_sizes():
    heartbeat = load_preset("heartbeat").model
    assert bit_size(count_params(heartbeat.dense_twin()), "dense") == pytest.approx(5.4e6, rel=0.02)
    jv = count_params(load_preset("japanese_vowels").model)
    assert bit_size(jv, "sbt") == 41_632 + 32 * (14 + 256)
    with pytest.raises(ConfigError):
        bit_size(jv, "int4")


@pytest.mark.parametrize("name", FORECASTING)
def test_forecasting_bit_savings(name):
    comparison = compare_scenarios(load_preset(name).model)
    assert comparison.savings("sbt") >= 30


@pytest.mark.parametrize("name", list_presets())
def test_scenario_ordering(name):
    bits = compare_scenarios(load_preset(name).model).bits
    assert bits["sbt"] < bits["pruned8"] < bits["pruned32"] < bits["dense"]


@pytest.mark.parametrize("dense_mode", [False, True])
def test_instrumented_count_matches_closed_form(rng, dense_mode):
    config = parse_config({"task": "forecasting", "m": 3, "w": 6, "d": 8, "h": 2, "ff": 12,
                           "seed": 1, "dense_mode": dense_mode})
    frozen = freeze(build_model(config))
    counter = instrumented_count(frozen, rng.normal(size=(1, 6, 3)))
    expected = model_flops(config, "per_timestep")
    assert counter.total == expected.simplified
    for name, count in expected.flops.items():
        assert counter.counts[name] == count, name


def test_qkv_random_attention_flops_in_expectation(rng):
    measured, predicted = [], []
    for seed in range(20):
        config = parse_config({"task": "classification", "m": 3, "w": 16, "d": 16, "h": 2, "ff": 8,
                               "n_classes": 2, "seed": seed, "attention": "qkv_random"})
        counter = instrumented_count(freeze(build_model(config)), rng.normal(size=(1, 16, 3)))
        closed = model_flops(config, "per_timestep").flops
        attention_keys = [k for k in closed if k.endswith((".qk", ".av"))]
        measured.append(sum(counter.counts[k] for k in attention_keys))
        predicted.append(sum(closed[k] for k in attention_keys))
    assert np.mean(measured) == pytest.approx(np.mean(predicted), rel=0.10)


def test_flops_reject_unknown_convention():
    with pytest.raises(ConfigError):
        model_flops(load_preset("smd").model, "per_token")


def test_render_table():
    table = render_table([compare_scenarios(load_preset("smd").model)])
    assert list(table["model"]) == ["dense", "sbt"]
    assert table.loc[0, "bit_savings"] == ""
    assert table.loc[1, "bit_savings"].startswith("~×")
    assert table.loc[1, "flop_savings"].startswith("~×")


def test_preset_table_covers_every_preset():
    table = preset_table([load_preset(name).model for name in list_presets()])
    assert len(table) == 22
    assert set(table["dataset"]) == set(list_presets())
