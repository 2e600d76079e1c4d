import logging

import numpy as np
import pytest

from sbt.errors import ConfigError, DataError
from sbt.synthetic import gpd_samples, score_stream
from sbt.threshold import (
    ScoreSeries,
    _moments,
    detect,
    evaluate_detection,
    fit_gpd,
    fit_pot,
    gpd_log_likelihood,
    manual_threshold,
    point_adjust,
    pot_threshold,
    segments,
)


def test_point_adjusted_metrics():
    labels = np.array([1, 1, 1, 0, 0, 0, 1, 0], dtype=bool)
    pred = np.array([0, 1, 0, 0, 1, 0, 0, 0], dtype=bool)
    assert point_adjust(pred, labels).astype(int).tolist() == [1, 1, 1, 0, 1, 0, 0, 0]

    report = evaluate_detection(pred, labels)
    assert report.adjusted.precision == pytest.approx(0.75)
    assert report.adjusted.recall == pytest.approx(0.75)
    assert report.adjusted.f1 == pytest.approx(0.75)
    assert (report.adjusted.tp, report.adjusted.fp, report.adjusted.fn) == (3, 1, 1)
    assert report.unadjusted.tp == 1
    assert [s["detected"] for s in report.segments] == [True, False]


def test_segments():
    assert segments(np.array([0, 1, 1, 0, 1])) == [(1, 2), (4, 4)]
    assert segments(np.zeros(4)) == []


def test_manual_threshold():
    assert manual_threshold(np.arange(101), 0.01) == pytest.approx(99.0)
    with pytest.raises(ConfigError):
        manual_threshold(np.arange(10), 0.0)
    with pytest.raises(DataError):
        manual_threshold(np.array([]), 0.01)


@pytest.mark.parametrize("seed", range(10))
def test_gpd_fit_recovers_parameters(seed):
    fit = fit_gpd(gpd_samples(10_000, 0.2, 1.0, seed=seed))
    assert fit.gamma == pytest.approx(0.2, abs=0.15)
    assert fit.sigma == pytest.approx(1.0, rel=0.15)


def test_gpd_fit_of_exponential_tail():
    fit = fit_gpd(gpd_samples(5_000, 0.0, 2.0, seed=4))
    assert abs(fit.gamma) < 0.1
    assert fit.sigma == pytest.approx(2.0, rel=0.15)


def test_mle_beats_moments():
    y = gpd_samples(2_000, 0.3, 1.5, seed=1)
    fit = fit_gpd(y)
    assert fit.log_likelihood >= gpd_log_likelihood(y, *_moments(y)) - 1e-9


def test_few_excesses_fall_back_to_moments(caplog):
    y = gpd_samples(10, 0.1, 1.0, seed=2)
    with caplog.at_level(logging.WARNING):
        fit = fit_gpd(y)
    assert fit.method in ("moments", "exponential")
    assert "method of moments" in caplog.text


def test_identical_excesses_give_exponential_fit():
    fit = fit_gpd(np.full(30, 0.5))
    assert fit.method == "exponential"
    assert fit.gamma == 0.0
    assert fit.sigma == pytest.approx(0.5)


def test_no_exceedances_falls_back_to_manual(caplog):
    scores = np.ones(100)
    assert fit_pot(scores) is None
    with caplog.at_level(logging.WARNING):
        tau = pot_threshold(scores, q=1e-3)
    assert tau == pytest.approx(1.0)
    assert "manual" in caplog.text


def test_pot_threshold_grows_as_risk_shrinks():
    scores = np.random.default_rng(0).normal(size=20_000) ** 2
    taus = [pot_threshold(scores, q) for q in (1e-2, 1e-3, 1e-4)]
    assert taus[0] < taus[1] < taus[2]
    assert taus[0] > np.quantile(scores, 0.98)


def test_pot_rejects_bad_parameters():
    with pytest.raises(ConfigError):
        fit_pot(np.arange(10.0), q=0.0)
    with pytest.raises(ConfigError):
        fit_pot(np.arange(10.0), level=1.0)
    with pytest.raises(DataError):
        fit_pot(np.array([]))


def test_score_series_validation():
    with pytest.raises(DataError):
        ScoreSeries(np.array([1.0, -0.1]))
    with pytest.raises(DataError):
        ScoreSeries(np.array([1.0, 2.0]), index=np.array([3, 3]))
    with pytest.raises(DataError):
        ScoreSeries(np.array([1.0, 2.0]), labels=np.array([True]))
    assert ScoreSeries(np.array([0.5, 1.0])).index.tolist() == [0, 1]


def test_detect_errors():
    with pytest.raises(DataError):
        detect(np.ones(10), ScoreSeries(np.ones(5)))
    with pytest.raises(ConfigError):
        detect(np.ones(10), ScoreSeries(np.ones(5), labels=np.zeros(5)), mode="percentile")


def test_pot_detection_competes_with_manual():
    calibration = np.random.default_rng(11).normal(size=20_000) ** 2
    scores, labels = score_stream(5_000, n_segments=10, magnitude=3.0, seed=3)
    test = ScoreSeries(scores, labels=labels)
    manual = detect(calibration, test, "manual", r=0.01)
    pot = detect(calibration, test, "pot", q=1e-3)
    assert pot.fit is not None
    assert pot.threshold > manual.threshold
    assert pot.adjusted.f1 >= manual.adjusted.f1 - 0.05
    assert set(pot.to_dict()) == {"threshold", "mode", "adjusted", "unadjusted", "segments", "fit"}


@pytest.mark.parametrize("scale,shift", [(2.5, 0.75), (0.1, 4.0)])
def test_pot_threshold_is_affine_equivariant(scale, shift):
    scores = np.random.default_rng(5).normal(size=20_000) ** 2
    tau = pot_threshold(scores, q=1e-3)
    assert pot_threshold(scale * scores + shift, q=1e-3) == pytest.approx(scale * tau + shift, rel=1e-5)


def test_manual_threshold_falls_as_r_grows():
    scores, _ = score_stream(3_000, seed=8)
    taus = [manual_threshold(scores, r) for r in np.linspace(0.001, 0.5, 40)]
    assert np.all(np.diff(taus) <= 0)


@pytest.mark.parametrize("seed", range(5))
def test_point_adjust_only_fills_labelled_segments(seed):
    rng = np.random.default_rng(seed)
    labels = rng.random(500) < 0.1
    labels[100:130] = True
    pred = rng.random(500) < 0.05
    adjusted = point_adjust(pred, labels)

    assert np.all(adjusted[pred])
    assert np.array_equal(adjusted[~labels], pred[~labels])
    raw = evaluate_detection(pred, labels)
    assert raw.adjusted.recall >= raw.unadjusted.recall
    assert raw.adjusted.fp == raw.unadjusted.fp
