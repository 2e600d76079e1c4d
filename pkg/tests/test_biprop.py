import logging

import numpy as np
import pytest

from sbt.biprop import (
    BipropLayerNorm,
    BipropLinear,
    binary_signs,
    compute_alpha,
    compute_mask,
    effective_forward,
    freeze,
    init_layer,
    keep_count,
    mask_churn,
    ste_backward,
)
from sbt.errors import ConfigError


@pytest.mark.parametrize("total,p,expected", [(10, 0.5, 5), (7, 0.5, 4), (8, 0.75, 2), (5, 0.0, 5), (3, 0.9, 1)])
def test_keep_count(total, p, expected):
    assert keep_count(total, p) == expected


def test_mask_ties_go_to_lower_index():
    mask = compute_mask(np.ones((2, 2)), 0.5)
    assert mask.tolist() == [[True, True], [False, False]]


def test_mask_keeps_largest_magnitude_scores():
    scores = np.array([0.1, -3.0, 0.5, 2.0])
    assert compute_mask(scores, 0.5).tolist() == [False, True, False, True]


def test_mask_rejects_bad_prune_rate_and_empty_scores():
    with pytest.raises(ConfigError):
        compute_mask(np.ones(4), 1.0)
    with pytest.raises(ConfigError):
        compute_mask(np.ones(4), -0.1)
    with pytest.raises(ValueError):
        compute_mask(np.zeros(0), 0.5)


def test_alpha_is_mean_kept_magnitude():
    w = np.array([0.5, -1.0, 2.0, -0.1])
    mask = np.array([True, True, False, False])
    assert compute_alpha(w, mask) == pytest.approx(0.75)


def test_alpha_of_fully_pruned_module_is_zero(caplog):
    with caplog.at_level(logging.WARNING):
        alpha = compute_alpha(np.ones(4), np.zeros(4, dtype=bool), "layers.0.ff1")
    assert alpha == 0.0
    assert "layers.0.ff1" in caplog.text


def test_sign_of_zero_is_positive():
    assert binary_signs(np.array([-2.0, 0.0, 3.0])).tolist() == [-1, 1, 1]


def test_biprop_identities_on_random_layers():
    rng = np.random.default_rng(0)
    for i in range(1000):
        shape = tuple(rng.integers(1, 12, size=2))
        p = float(rng.choice([0.0, 0.25, 0.5, 0.75, 0.9]))
        layer = init_layer(f"l{i}", shape, p, rng)
        total = shape[0] * shape[1]
        assert layer.mask.sum() == total - int(np.floor(total * p))
        expected_alpha = np.abs(layer.weight[layer.mask]).mean()
        assert abs(layer.alpha - expected_alpha) <= 1e-12
        w_eff = layer.effective_weight()
        nonzero = w_eff[w_eff != 0]
        assert np.allclose(np.abs(nonzero), layer.alpha, rtol=0, atol=1e-15)


def test_effective_forward_matches_materialized_weights(rng):
    layer = init_layer("proj", (6, 4), 0.5, rng)
    x = rng.normal(size=(3, 5, 4))
    expected = x @ (layer.alpha * binary_signs(layer.weight) * layer.mask).T
    assert np.allclose(effective_forward(layer, x), expected)


def test_straight_through_gradient_reaches_every_score(rng):
    layer = init_layer("proj", (3, 4), 0.5, rng)
    x = rng.normal(size=(2, 4))
    g = rng.normal(size=(2, 3))
    effective_forward(layer, x)
    d_scores, dx = ste_backward(layer, g, x)
    assert np.allclose(d_scores, g.T @ x)
    assert np.allclose(layer.scores.grad, d_scores)
    # pruned entries still receive a gradient
    assert np.all(d_scores[~layer.mask] != 0)
    assert np.allclose(dx, g @ layer.effective_weight())


def test_differentiate_alpha_adds_gain_path(rng):
    plain = init_layer("a", (3, 4), 0.5, np.random.default_rng(7))
    with_alpha = init_layer("a", (3, 4), 0.5, np.random.default_rng(7), differentiate_alpha=True)
    x = rng.normal(size=(2, 4))
    g = rng.normal(size=(2, 3))
    d_plain, _ = ste_backward(plain, g, x)
    d_alpha, _ = ste_backward(with_alpha, g, x)
    d_w = g.T @ x
    kept = with_alpha.mask.sum()
    extra = (d_w * with_alpha.signs * with_alpha.mask).sum() * (np.abs(with_alpha.weight) - with_alpha.alpha) / kept
    assert np.allclose(d_alpha - d_plain, extra)


def test_scores_move_masks_but_not_latent_weights(rng):
    module = BipropLinear(init_layer("proj", (4, 4), 0.5, rng))
    weight_before = module.state.weight.copy()
    module.state.scores.value[...] = rng.normal(size=(4, 4))
    module.forward(rng.normal(size=(2, 4)))
    assert np.array_equal(module.state.weight, weight_before)
    assert module.state.mask.sum() == 8


def test_layer_norm_gain_starts_at_one(rng):
    norm = BipropLayerNorm(init_layer("norm", (8,), 0.5, rng, kind="layernorm-gain"))
    assert norm.state.alpha == 1.0
    y = norm.forward(rng.normal(size=(2, 3, 8)))
    assert np.all(y[..., ~norm.state.mask] == 0.0)


def test_layer_norm_rejects_linear_state(rng):
    with pytest.raises(ConfigError):
        BipropLayerNorm(init_layer("proj", (4, 4), 0.5, rng))


def test_freeze_is_read_only_snapshot(rng):
    layer = init_layer("proj", (3, 3), 0.5, rng)
    frozen = freeze(layer)
    assert frozen.nonzero == 5
    with pytest.raises(ValueError):
        frozen.mask[0, 0] = not frozen.mask[0, 0]
    before = frozen.mask.copy()
    layer.scores.value[...] = layer.scores.value[::-1, ::-1].copy()
    layer.refresh()
    assert np.array_equal(frozen.mask, before)
    assert frozen.materialize(np.float64).shape == (3, 3)


def test_mask_churn():
    a = np.array([True, True, False, False])
    b = np.array([True, False, True, False])
    assert mask_churn(a, b) == 0.5
    assert mask_churn(a, a) == 0.0
