"""
Anomaly decision layer: manual quantile threshold, peaks-over-threshold
(generalized Pareto tail fit) threshold and point-adjusted P/R/F1.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import minimize
from sklearn.metrics import precision_recall_fscore_support

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

MIN_EXCEEDANCES = 20


class DetectSettings(BaseModel):
    """Per-dataset detection protocol: anomaly proportion r and POT risk q"""
    model_config = ConfigDict(extra="forbid")

    r: float = Field(0.01, gt=0.0, lt=1.0)
    q: float = Field(1e-3, gt=0.0, lt=1.0)


@dataclass
class ScoreSeries:
    """Per-window reconstruction losses indexed by window end"""
    scores: np.ndarray
    index: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.index is None:
            self.index = np.arange(self.scores.size)
        self.index = np.asarray(self.index)
        if self.index.shape != self.scores.shape:
            raise DataError(f"score index length {self.index.size} != score count {self.scores.size}")
        if np.any(self.scores < 0):
            raise DataError("anomaly scores must be nonnegative")
        if self.index.size > 1 and np.any(np.diff(self.index) <= 0):
            raise DataError("score index must be strictly increasing")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=bool)
            if self.labels.shape != self.scores.shape:
                raise DataError(f"{self.labels.size} labels for {self.scores.size} scores")


# -----------------------------------------------------------------------------
# thresholds
# -----------------------------------------------------------------------------

def manual_threshold(scores: np.ndarray, r: float) -> float:
    """(1 − r) empirical quantile with linear interpolation."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise DataError("manual_threshold: no scores")
    if not 0.0 < r < 1.0:
        raise ConfigError(f"anomaly proportion r must be in (0, 1), got {r}")
    return float(np.quantile(scores, 1.0 - r))


@dataclass
class GpdFit:
    gamma: float
    sigma: float
    n_exceed: int
    log_likelihood: float
    method: Literal["mle", "moments", "exponential"] = "mle"
    t0: float = 0.0
    n: int = 0
    q: float = 1e-3

    @property
    def threshold(self) -> float:
        """τ = t0 + σ/γ·((q·n/N_t)^(−γ) − 1), with the γ → 0 limit t0 − σ·ln(q·n/N_t)."""
        ratio = self.q * self.n / self.n_exceed
        if abs(self.gamma) < 1e-8:
            return self.t0 - self.sigma * np.log(ratio)
        return self.t0 + self.sigma / self.gamma * (ratio ** (-self.gamma) - 1.0)

    def to_dict(self) -> dict:
        return {**asdict(self), "threshold": self.threshold}


def gpd_log_likelihood(excesses: np.ndarray, gamma: float, sigma: float) -> float:
    y = np.asarray(excesses, dtype=np.float64)
    if sigma <= 0:
        return -np.inf
    n = y.size
    if abs(gamma) < 1e-12:
        return float(-n * np.log(sigma) - y.sum() / sigma)
    z = 1.0 + gamma * y / sigma
    if np.any(z <= 0):
        return -np.inf
    return float(-n * np.log(sigma) - (1.0 + 1.0 / gamma) * np.log(z).sum())


def _moments(y: np.ndarray) -> tuple[float, float]:
    mean = y.mean()
    var = y.var(ddof=1) if y.size > 1 else 0.0
    if var <= 0:
        return 0.0, float(mean)
    ratio = mean ** 2 / var
    return float(0.5 * (1.0 - ratio)), float(0.5 * mean * (ratio + 1.0))


def fit_gpd(excesses: np.ndarray, grid_size: int = 41) -> GpdFit:
    """
    Maximum-likelihood GPD fit.

    Coarse grid over γ ∈ [−0.5, 1.5] × σ log-spaced around the mean excess,
    refined by Nelder-Mead in (γ, log σ) relative to the mean excess. Fewer
    than 20 excesses fall back to the method of moments; identical excesses
    give the exponential fit γ = 0.
    """
    y = np.asarray(excesses, dtype=np.float64)
    if y.size == 0:
        raise DataError("fit_gpd: no excesses")
    if np.any(y < 0):
        raise DataError("fit_gpd: excesses must be nonnegative")
    scale = float(y.mean())

    if np.ptp(y) == 0 or scale == 0:
        sigma = scale if scale > 0 else 1e-12
        return GpdFit(0.0, sigma, y.size, gpd_log_likelihood(y, 0.0, sigma), "exponential")

    mom_gamma, mom_sigma = _moments(y)
    mom_ll = gpd_log_likelihood(y, mom_gamma, mom_sigma)

    if y.size < MIN_EXCEEDANCES:
        logger.warning("only %d exceedances; GPD falls back to the method of moments", y.size)
        if np.isfinite(mom_ll):
            return GpdFit(mom_gamma, mom_sigma, y.size, mom_ll, "moments")
        return GpdFit(0.0, scale, y.size, gpd_log_likelihood(y, 0.0, scale), "exponential")

    gammas = np.linspace(-0.5, 1.5, grid_size)
    rel_sigmas = np.logspace(-2, 2, grid_size)
    best = (-np.inf, 0.0, 1.0)
    for g in gammas:
        for s in rel_sigmas:
            ll = gpd_log_likelihood(y, g, s * scale)
            if ll > best[0]:
                best = (ll, float(g), float(s))

    def neg_ll(theta: np.ndarray) -> float:
        ll = gpd_log_likelihood(y, theta[0], scale * np.exp(theta[1]))
        return -ll if np.isfinite(ll) else 1e300

    res = minimize(neg_ll, x0=np.array([best[1], np.log(best[2])]), method="Nelder-Mead",
                   options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 4000})
    ll_best, gamma, sigma = best[0], best[1], best[2] * scale
    if np.isfinite(res.fun):
        refined = -float(res.fun)
        if refined > ll_best:
            ll_best, gamma, sigma = refined, float(res.x[0]), float(scale * np.exp(res.x[1]))

    if np.isfinite(mom_ll) and mom_ll > ll_best:
        return GpdFit(mom_gamma, mom_sigma, y.size, mom_ll, "moments")
    return GpdFit(gamma, sigma, y.size, ll_best, "mle")


def fit_pot(scores: np.ndarray, q: float = 1e-3, level: float = 0.98) -> Optional[GpdFit]:
    """GPD fit on the excesses over the ``level`` quantile; None when nothing exceeds it."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise DataError("POT: no calibration scores")
    if not 0.0 < q < 1.0:
        raise ConfigError(f"risk q must be in (0, 1), got {q}")
    if not 0.0 < level < 1.0:
        raise ConfigError(f"initial level must be in (0, 1), got {level}")
    t0 = float(np.quantile(scores, level))
    excesses = scores[scores > t0] - t0
    if excesses.size == 0:
        return None
    fit = fit_gpd(excesses)
    fit.t0, fit.n, fit.q = t0, scores.size, q
    return fit


def pot_threshold(scores: np.ndarray, q: float = 1e-3, level: float = 0.98) -> float:
    fit = fit_pot(scores, q, level)
    if fit is None:
        logger.warning("no score exceeds the initial POT level; using the manual threshold with r=%g", q)
        return manual_threshold(scores, q)
    return float(fit.threshold)


# -----------------------------------------------------------------------------
# point-adjusted evaluation
# -----------------------------------------------------------------------------

def segments(labels: np.ndarray) -> list[tuple[int, int]]:
    """Inclusive (start, end) index pairs of each run of True."""
    flags = np.asarray(labels, dtype=bool).astype(np.int8)
    edges = np.diff(np.concatenate(([0], flags, [0])))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def point_adjust(predictions: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Any hit inside a ground-truth segment marks the whole segment detected."""
    pred = np.asarray(predictions, dtype=bool).copy()
    for start, end in segments(labels):
        if pred[start:end + 1].any():
            pred[start:end + 1] = True
    return pred


@dataclass
class DetectionMetrics:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


def _metrics(pred: np.ndarray, labels: np.ndarray) -> DetectionMetrics:
    p, r, f1, _ = precision_recall_fscore_support(
        labels.astype(int), pred.astype(int), average="binary", pos_label=1, zero_division=0
    )
    tp = int(np.sum(pred & labels))
    return DetectionMetrics(float(p), float(r), float(f1), tp, int(np.sum(pred & ~labels)), int(np.sum(~pred & labels)))


@dataclass
class DetectionReport:
    threshold: float
    mode: Literal["manual", "pot"]
    adjusted: DetectionMetrics
    unadjusted: DetectionMetrics
    segments: list[dict] = field(default_factory=list)
    fit: Optional[GpdFit] = None

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "mode": self.mode,
            "adjusted": asdict(self.adjusted),
            "unadjusted": asdict(self.unadjusted),
            "segments": self.segments,
            "fit": self.fit.to_dict() if self.fit is not None else None,
        }


def evaluate_detection(
    predictions: np.ndarray,
    labels: np.ndarray,
    threshold: float = float("nan"),
    mode: Literal["manual", "pot"] = "manual",
    fit: Optional[GpdFit] = None,
) -> DetectionReport:
    pred = np.asarray(predictions, dtype=bool)
    truth = np.asarray(labels, dtype=bool)
    if pred.shape != truth.shape:
        raise DataError(f"{pred.size} predictions for {truth.size} labels")
    adjusted = point_adjust(pred, truth)
    table = [
        {"start": s, "end": e, "length": e - s + 1, "detected": bool(pred[s:e + 1].any())}
        for s, e in segments(truth)
    ]
    return DetectionReport(threshold, mode, _metrics(adjusted, truth), _metrics(pred, truth), table, fit)


def detect(
    calibration: np.ndarray,
    test: ScoreSeries,
    mode: Literal["manual", "pot"] = "manual",
    r: float = 0.01,
    q: float = 1e-3,
    level: float = 0.98,
) -> DetectionReport:
    """Pick τ on the calibration scores and evaluate x′_t > τ on the labelled test scores."""
    if test.labels is None:
        raise DataError("detection needs ground-truth labels on the test scores")
    fit = None
    match mode:
        case "manual":
            tau = manual_threshold(calibration, r)
        case "pot":
            fit = fit_pot(calibration, q, level)
            tau = pot_threshold(calibration, q, level) if fit is None else float(fit.threshold)
        case _:
            raise ConfigError(f"unknown threshold mode {mode!r}")
    return evaluate_detection(test.scores > tau, test.labels, tau, mode, fit)
