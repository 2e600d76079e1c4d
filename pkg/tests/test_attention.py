import numpy as np
import pytest

from conftest import central_difference
from sbt.attention import (
    AttentionPlan,
    apply_activation_mask,
    attend,
    attend_backward,
    build_step_t_mask,
    magnitude_mask,
    mask_digest,
    mask_projections,
    sample_qkv_masks,
)
from sbt.errors import ConfigError, DivergenceError, ShapeError


def _qkv(rng, b, w, d, dtype=np.float64):
    return tuple(rng.normal(size=(b, w, d)).astype(dtype) for _ in range(3))


def test_step_t_mask_layout():
    mask = build_step_t_mask(4)
    allowed = np.isfinite(mask)
    expected = np.array([
        [1, 0, 0, 0],
        [0, 1, 0, 0],
        [0, 0, 1, 0],
        [1, 1, 1, 0],
    ], dtype=bool)
    assert np.array_equal(allowed, expected)


def test_step_t_needs_two_steps():
    with pytest.raises(ConfigError):
        build_step_t_mask(1)
    with pytest.raises(ConfigError):
        AttentionPlan.build(1, 4, 1, "step_t")


def test_plan_rejects_bad_heads_and_variant():
    with pytest.raises(ConfigError):
        AttentionPlan.build(3, 8, 4)
    with pytest.raises(ConfigError):
        AttentionPlan.build(2, 8, 4, "sliding")


@pytest.mark.parametrize("w", [2, 3, 8, 50])
def test_step_t_earlier_rows_copy_values(rng, w):
    plan = AttentionPlan.build(2, 8, w, "step_t")
    q, k, v = _qkv(rng, 3, w, 8)
    out, cache = attend(plan, q, k, v)
    assert np.allclose(out[:, :-1, :], v[:, :-1, :], rtol=0, atol=1e-12)
    # last step never attends to itself
    assert np.all(cache.probs[:, -1, -1] == 0.0)
    assert np.allclose(cache.probs[:, -1, :-1].sum(-1), 1.0)


@pytest.mark.parametrize("w", [2, 5, 16])
def test_step_t_fast_path_matches_full_path(rng, w):
    plan = AttentionPlan.build(4, 8, w, "step_t")
    q, k, v = _qkv(rng, 2, w, 8)
    full, _ = attend(plan, q, k, v)
    fast, cache = attend(plan, q, k, v, fast_step_t=True)
    assert cache is None
    assert np.allclose(full, fast, rtol=0, atol=1e-12)


def test_identity_variant_returns_values(rng):
    plan = AttentionPlan.build(2, 8, 6, "identity")
    q, k, v = _qkv(rng, 2, 6, 8)
    out, _ = attend(plan, q, k, v)
    assert np.allclose(out, v)


def test_canonical_rows_are_distributions(rng):
    plan = AttentionPlan.build(2, 8, 5)
    q, k, v = _qkv(rng, 2, 5, 8)
    _, cache = attend(plan, q, k, v)
    assert np.allclose(cache.probs.sum(-1), 1.0)
    assert plan.scale == pytest.approx(0.5)


def test_key_padding_hides_padded_steps(rng):
    plan = AttentionPlan.build(2, 8, 5)
    q, k, v = _qkv(rng, 2, 5, 8)
    valid = np.array([[True] * 5, [True, True, True, False, False]])
    _, cache = attend(plan, q, k, v, key_padding=valid)
    # heads of sample 1 sit at rows 2 and 3 after the head split
    assert np.all(cache.probs[2:, :, 3:] == 0.0)
    assert np.allclose(cache.probs.sum(-1), 1.0)


def test_qkv_masks_have_exact_keep_counts():
    for p in (0.0, 0.25, 0.5, 0.9):
        masks = sample_qkv_masks(7, 6, p, 3)
        expected = 42 - int(np.floor(42 * p))
        assert all(m.sum() == expected for m in masks)


def test_qkv_masks_are_seeded_and_independent():
    a = AttentionPlan.build(2, 8, 6, "qkv_random", 0.5, seed=[1, 0])
    b = AttentionPlan.build(2, 8, 6, "qkv_random", 0.5, seed=[1, 0])
    c = AttentionPlan.build(2, 8, 6, "qkv_random", 0.5, seed=[2, 0])
    assert mask_digest(a) == mask_digest(b)
    assert mask_digest(a) != mask_digest(c)
    assert not np.array_equal(a.qkv_masks[0], a.qkv_masks[1])


def test_qkv_masks_apply_elementwise(rng):
    plan = AttentionPlan.build(2, 8, 6, "qkv_random", 0.5, seed=0)
    q, k, v = _qkv(rng, 3, 6, 8)
    mq, mk, mv, masks = mask_projections(plan, q, k, v)
    assert np.all(mq[:, ~masks[0]] == 0.0)
    assert np.array_equal(mv[:, masks[2]], v[:, masks[2]])


def test_magnitude_mask_keeps_largest_per_sample(rng):
    x = rng.normal(size=(3, 4, 4))
    mask = magnitude_mask(x, 0.5)
    assert mask.shape == x.shape
    for i in range(3):
        assert mask[i].sum() == 8
        assert np.abs(x[i][mask[i]]).min() >= np.abs(x[i][~mask[i]]).max()


def test_apply_activation_mask_checks_inputs(rng):
    x = rng.normal(size=(2, 3, 4))
    with pytest.raises(ValueError):
        apply_activation_mask(x)
    with pytest.raises(ShapeError):
        apply_activation_mask(x, np.ones((4, 4), dtype=bool))


@pytest.mark.parametrize("variant", ["canonical", "step_t"])
def test_attend_backward_matches_finite_differences(rng, variant):
    plan = AttentionPlan.build(2, 4, 4, variant)
    q, k, v = _qkv(rng, 2, 4, 4)
    g = rng.normal(size=q.shape)

    _, cache = attend(plan, q, k, v)
    dq, dk, dv = attend_backward(plan, g, cache)

    def loss():
        return float((attend(plan, q, k, v)[0] * g).sum())

    for target, analytic in zip((q, k, v), (dq, dk, dv)):
        numeric = central_difference(loss, target)
        assert np.allclose(analytic, numeric, atol=1e-6)


def test_float32_inputs_stay_float32(rng):
    plan = AttentionPlan.build(2, 8, 5, "step_t")
    q, k, v = _qkv(rng, 2, 5, 8, np.float32)
    out, _ = attend(plan, q, k, v, fast_step_t=True)
    assert out.dtype == np.float32


def test_non_finite_scores_raise(rng):
    plan = AttentionPlan.build(2, 8, 5)
    q, k, v = _qkv(rng, 1, 5, 8)
    q[0, 2, 1] = np.nan
    with pytest.raises(DivergenceError):
        attend(plan, q, k, v)
