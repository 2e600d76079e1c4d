import numpy as np
import pytest

from sbt.errors import DataError, ShapeError
from sbt.numerics import (
    Adam,
    GradSlot,
    RunningStats,
    adam_step,
    cross_entropy,
    matmul,
    matmul_backward,
    normalize,
    normalize_backward,
    normalize_forward,
    softmax_backward,
    softmax_last,
)

from conftest import central_difference


def test_matmul_rejects_mismatched_inner_dimension():
    with pytest.raises(ShapeError) as err:
        matmul(np.zeros((2, 3)), np.zeros((4, 5)))
    assert err.value.a_shape == (2, 3)
    assert err.value.b_shape == (4, 5)


def test_matmul_backward_matches_finite_differences(rng):
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(4, 5))
    r = rng.normal(size=(2, 3, 5))
    da, db = matmul_backward(r, a, b)
    assert np.allclose(da, central_difference(lambda: float((matmul(a, b) * r).sum()), a), rtol=1e-6)
    assert np.allclose(db, central_difference(lambda: float((matmul(a, b) * r).sum()), b), rtol=1e-6)


def test_softmax_rows_sum_to_one_and_masked_rows_are_zero():
    x = np.array([[1.0, 2.0, 3.0], [0.5, 0.5, 0.5]])
    mask = np.array([[0.0, 0.0, 0.0], [-np.inf, -np.inf, -np.inf]])
    y = softmax_last(x, mask)
    assert np.isclose(y[0].sum(), 1.0)
    assert np.all(y[1] == 0.0)


def test_softmax_ignores_masked_entries():
    y = softmax_last(np.array([[5.0, 1.0, 1.0]]), np.array([[-np.inf, 0.0, 0.0]]))
    assert y[0, 0] == 0.0
    assert np.allclose(y[0, 1:], 0.5)


def test_softmax_backward_matches_finite_differences(rng):
    x = rng.normal(size=(3, 4))
    r = rng.normal(size=(3, 4))
    analytic = softmax_backward(r, softmax_last(x))
    numeric = central_difference(lambda: float((softmax_last(x) * r).sum()), x)
    assert np.allclose(analytic, numeric, atol=1e-8)


def test_cross_entropy_gradient(rng):
    logits = rng.normal(size=(5, 3))
    labels = np.array([0, 2, 1, 1, 0])
    _, grad = cross_entropy(logits, labels)
    numeric = central_difference(lambda: cross_entropy(logits, labels)[0], logits)
    assert np.allclose(grad, numeric, atol=1e-8)


def test_layer_norm_normalizes_last_axis(rng):
    x = rng.normal(3.0, 2.0, size=(4, 6, 8))
    y = normalize(x, "layer", np.ones(8), np.zeros(8))
    assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-10)
    assert np.allclose(y.var(axis=-1), 1.0, atol=1e-3)


@pytest.mark.parametrize("kind", ["layer", "batch"])
def test_normalize_backward_matches_finite_differences(rng, kind):
    x = rng.normal(size=(3, 4, 5))
    gain = rng.normal(size=5)
    bias = rng.normal(size=5)
    r = rng.normal(size=(3, 4, 5))
    _, cache = normalize_forward(x, kind, gain, bias)
    dx, dgain, dbias = normalize_backward(r, cache)
    loss = lambda: float((normalize(x, kind, gain, bias) * r).sum())
    assert np.allclose(dx, central_difference(loss, x), rtol=1e-5, atol=1e-8)
    assert np.allclose(dgain, central_difference(loss, gain), rtol=1e-5, atol=1e-8)
    assert np.allclose(dbias, central_difference(loss, bias), rtol=1e-5, atol=1e-8)


def test_batch_norm_uses_running_stats_at_inference(rng):
    running = RunningStats.zeros(3)
    x = rng.normal(5.0, 1.0, size=(16, 4, 3))
    normalize(x, "batch", np.ones(3), np.zeros(3), running=running, training=True)
    assert np.all(running.mean > 0.4)
    y = normalize(x, "batch", np.ones(3), np.zeros(3), running=running, training=False)
    expected = (x - running.mean) / np.sqrt(running.var + 1e-5)
    assert np.allclose(y, expected)


def test_batch_norm_statistics_skip_padding(rng):
    x = rng.normal(size=(3, 4, 2))
    valid = np.ones((3, 4), dtype=bool)
    valid[0, 3] = valid[2, 2:] = False
    running = RunningStats.zeros(2)
    y = normalize(x, "batch", np.ones(2), np.zeros(2), running=running, valid=valid)
    rows = x[valid]
    assert np.allclose(y[valid], (rows - rows.mean(axis=0)) / np.sqrt(rows.var(axis=0) + 1e-5))
    assert np.allclose(running.mean, 0.1 * rows.mean(axis=0))

    shifted = x.copy()
    shifted[~valid] += 50.0
    again = normalize(shifted, "batch", np.ones(2), np.zeros(2), valid=valid)
    assert np.allclose(again[valid], y[valid])


def test_masked_batch_norm_backward_matches_finite_differences(rng):
    x = rng.normal(size=(3, 4, 5))
    valid = rng.random((3, 4)) > 0.3
    valid[0, 0] = True
    gain = rng.normal(size=5)
    bias = rng.normal(size=5)
    r = rng.normal(size=(3, 4, 5))
    _, cache = normalize_forward(x, "batch", gain, bias, valid=valid)
    dx, dgain, _ = normalize_backward(r, cache)
    loss = lambda: float((normalize(x, "batch", gain, bias, valid=valid) * r).sum())
    assert np.allclose(dx, central_difference(loss, x), rtol=1e-5, atol=1e-8)
    assert np.allclose(dgain, central_difference(loss, gain), rtol=1e-5, atol=1e-8)


def test_batch_norm_over_only_padding_raises():
    with pytest.raises(DataError):
        normalize(np.ones((2, 3, 4)), "batch", np.ones(4), np.zeros(4), valid=np.zeros((2, 3), dtype=bool))


def test_adam_step_moves_against_gradient_and_clears_it():
    slot = GradSlot("w", np.array([1.0, -1.0]))
    slot.grad[...] = [2.0, -2.0]
    adam_step(slot, lr=0.1)
    assert slot.value[0] < 1.0 and slot.value[1] > -1.0
    assert np.all(slot.grad == 0.0)
    assert slot.step == 1


def test_adam_minimizes_a_quadratic():
    slot = GradSlot("w", np.array([3.0, -2.0]))
    opt = Adam([slot], lr=0.1)
    for _ in range(500):
        slot.grad[...] = 2 * slot.value
        opt.step()
    assert np.all(np.abs(slot.value) < 0.1)
