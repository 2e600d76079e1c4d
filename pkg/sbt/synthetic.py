"""
Seeded synthetic datasets with known answers.

Used by the tests and by manifests that name a ``synthetic`` source instead
of CSV tables.
"""

import numpy as np


def sinusoid_classification(
    n_samples: int = 256,
    m: int = 4,
    w: int = 16,
    seed: int = 0,
    noise: float = 0.1,
    phase_spread: float = 2 * np.pi,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Two classes told apart by the dominant frequency: one cycle per window
    for class 0, three for class 1. Phases are drawn per sample and feature
    from [0, phase_spread); a narrow spread also separates the classes step
    by step, the full circle only through how steps relate.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n_samples)
    cycles = np.where(labels == 0, 1.0, 3.0)
    t = np.arange(w) / w
    phase = rng.uniform(0.0, phase_spread, size=(n_samples, m))
    x = np.sin(2 * np.pi * cycles[:, None, None] * t[None, :, None] + phase[:, None, :])
    x += noise * rng.normal(size=x.shape)
    return x, labels


def ar1_series(length: int = 3000, m: int = 2, phi: float = 0.8, sigma: float = 1.0, seed: int = 0) -> np.ndarray:
    """x_t = φ·x_{t−1} + σ·ε_t per feature, started from the stationary law."""
    rng = np.random.default_rng(seed)
    series = np.empty((length, m))
    series[0] = rng.normal(0.0, sigma / np.sqrt(1 - phi ** 2), size=m)
    noise = rng.normal(0.0, sigma, size=(length, m))
    for t in range(1, length):
        series[t] = phi * series[t - 1] + noise[t]
    return series


def ar1_noise_floor(phi: float) -> float:
    """Best achievable one-step MSE once the series is scaled to unit variance."""
    return 1.0 - phi ** 2


def anomaly_stream(
    length: int = 4000,
    m: int = 3,
    n_segments: int = 8,
    magnitude: float = 3.0,
    seed: int = 0,
    noise: float = 0.1,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Periodic multivariate signal with injected level-shift segments of 1-5 steps.

    Returns (series, labels); anomalies are placed in the second half only so
    the first half can serve as benign training data.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    periods = rng.uniform(20, 60, size=m)
    series = np.sin(2 * np.pi * t[:, None] / periods[None, :])
    series += noise * rng.normal(size=series.shape)
    labels = np.zeros(length, dtype=bool)
    starts = np.sort(rng.choice(np.arange(length // 2, length - 5), size=n_segments, replace=False))
    for start in starts:
        span = int(rng.integers(1, 6))
        sign = rng.choice([-1.0, 1.0], size=m)
        series[start:start + span] += sign * magnitude
        labels[start:start + span] = True
    return series, labels


def score_stream(
    length: int = 5000, n_segments: int = 10, magnitude: float = 3.0, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """
    Squared-Gaussian scores, like per-step reconstruction error, with segments
    shifted by ``magnitude`` standard deviations before squaring.
    """
    rng = np.random.default_rng(seed)
    z = rng.normal(size=length)
    labels = np.zeros(length, dtype=bool)
    starts = rng.choice(np.arange(10, length - 10), size=n_segments, replace=False)
    for start in starts:
        span = int(rng.integers(1, 6))
        z[start:start + span] = np.abs(z[start:start + span]) + magnitude
        labels[start:start + span] = True
    return z ** 2, labels


def gpd_samples(n: int, gamma: float, sigma: float, seed: int = 0) -> np.ndarray:
    """Inverse-CDF draws from GPD(γ, σ); γ = 0 gives the exponential law."""
    rng = np.random.default_rng(seed)
    u = 1.0 - rng.random(n)
    if gamma == 0:
        return -sigma * np.log(u)
    return sigma / gamma * (u ** (-gamma) - 1.0)
