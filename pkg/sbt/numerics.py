"""
Dense array math with hand-written reverse-mode gradients.

Covers exactly what a small Transformer encoder needs: batched matmul,
masked softmax over the last axis, layer/batch normalization, ReLU,
cross-entropy and the Adam update. Every forward helper has a matching
``*_backward``. Training runs in float64, frozen inference in float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Literal, Optional

import numpy as np

from .errors import DataError, ShapeError

TRAIN_DTYPE = np.float64
INFER_DTYPE = np.float32

NormKind = Literal["layer", "batch"]


# -----------------------------------------------------------------------------
# matmul
# -----------------------------------------------------------------------------

def _check_matmul(a: np.ndarray, b: np.ndarray) -> None:
    if not (2 <= a.ndim <= 3 and 2 <= b.ndim <= 3):
        raise ShapeError("matmul", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0] and 1 not in (a.shape[0], b.shape[0]):
        raise ShapeError("matmul", a.shape, b.shape)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(…, n, k) @ (…, k, p) with a leading batch axis broadcast when present."""
    _check_matmul(a, b)
    return np.matmul(a, b)


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    if grad.ndim == 3 and shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    return grad


def matmul_backward(g: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """da = g·bᵀ, db = aᵀ·g."""
    da = np.matmul(g, np.swapaxes(b, -1, -2))
    db = np.matmul(np.swapaxes(a, -1, -2), g)
    return _reduce_to(da, a.shape), _reduce_to(db, b.shape)


# -----------------------------------------------------------------------------
# softmax
# -----------------------------------------------------------------------------

def softmax_last(x: np.ndarray, additive_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Softmax over the last axis; a row with every entry at −∞ comes out all zeros."""
    z = x if additive_mask is None else x + additive_mask
    live = np.isfinite(z)
    row_max = np.max(np.where(live, z, -np.inf), axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(live, np.exp(np.where(live, z, 0.0) - row_max), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    return np.divide(e, s, out=np.zeros_like(e), where=s > 0)


def softmax_backward(g: np.ndarray, y: np.ndarray) -> np.ndarray:
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


# -----------------------------------------------------------------------------
# elementwise
# -----------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    return g * (x > 0)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient wrt the logits."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_z
    n = logits.shape[0]
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return loss, grad / n


# -----------------------------------------------------------------------------
# normalization
# -----------------------------------------------------------------------------

@dataclass
class RunningStats:
    """Batch-norm running statistics used at inference"""
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def zeros(cls, features: int, dtype=TRAIN_DTYPE) -> "RunningStats":
        return cls(mean=np.zeros(features, dtype=dtype), var=np.ones(features, dtype=dtype))

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray, count: int) -> None:
        unbiased = batch_var * count / max(count - 1, 1)
        self.mean = (1 - self.momentum) * self.mean + self.momentum * batch_mean
        self.var = (1 - self.momentum) * self.var + self.momentum * unbiased


@dataclass
class NormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gain: np.ndarray
    axes: tuple
    count: int
    batch_stats: bool
    weights: Optional[np.ndarray] = None


def normalize_forward(
    x: np.ndarray,
    kind: NormKind,
    gain: np.ndarray,
    bias: np.ndarray,
    eps: float = 1e-5,
    running: Optional[RunningStats] = None,
    training: bool = True,
    valid: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, NormCache]:
    """
    Layer or batch normalization with affine gain and bias.

    ``valid`` (x.shape[:-1], bool) restricts batch statistics to valid steps;
    padded steps are still normalized but do not move the mean or variance.
    """
    weights = None
    match kind:
        case "layer":
            axes = (x.ndim - 1,)
            use_batch_stats = True
        case "batch":
            axes = tuple(range(x.ndim - 1))
            use_batch_stats = training or running is None
            if valid is not None:
                weights = np.asarray(valid, dtype=x.dtype)[..., None]
        case _:
            raise ValueError(f"unknown normalization kind: {kind}")

    if weights is not None:
        count = int(weights.sum())
        if count == 0:
            raise DataError("batch normalization over a batch that is entirely padding")
    else:
        count = int(np.prod([x.shape[a] for a in axes]))
    if use_batch_stats:
        if weights is None:
            mean = x.mean(axis=axes, keepdims=True)
            var = x.var(axis=axes, keepdims=True)
        else:
            mean = (x * weights).sum(axis=axes, keepdims=True) / count
            var = (((x - mean) ** 2) * weights).sum(axis=axes, keepdims=True) / count
        if kind == "batch" and training and running is not None:
            running.update(mean.reshape(-1), var.reshape(-1), count)
    else:
        mean = running.mean.astype(x.dtype)
        var = running.var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    y = xhat * gain + bias
    return y, NormCache(xhat, inv_std, gain, axes, count, use_batch_stats, weights)


def normalize(
    x: np.ndarray,
    kind: NormKind,
    gain: np.ndarray,
    bias: np.ndarray,
    eps: float = 1e-5,
    running: Optional[RunningStats] = None,
    training: bool = True,
    valid: Optional[np.ndarray] = None,
) -> np.ndarray:
    return normalize_forward(x, kind, gain, bias, eps, running, training, valid)[0]


def normalize_backward(g: np.ndarray, cache: NormCache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dgain, dbias)."""
    reduce_axes = tuple(range(g.ndim - 1))
    dgain = (g * cache.xhat).sum(axis=reduce_axes)
    dbias = g.sum(axis=reduce_axes)
    dxhat = g * cache.gain
    if not cache.batch_stats:
        return dxhat * cache.inv_std, dgain, dbias
    n = cache.count
    axes = cache.axes
    # every output depends on the statistics, only weighted inputs feed them
    s1 = dxhat.sum(axis=axes, keepdims=True)
    s2 = (dxhat * cache.xhat).sum(axis=axes, keepdims=True)
    w = 1.0 if cache.weights is None else cache.weights
    dx = cache.inv_std * (dxhat - w * (s1 + cache.xhat * s2) / n)
    return dx, dgain, dbias


# -----------------------------------------------------------------------------
# optimizer
# -----------------------------------------------------------------------------

@dataclass
class GradSlot:
    """One trainable tensor together with its gradient and Adam moments"""
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)
    step: int = 0

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=TRAIN_DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.m is None:
            self.m = np.zeros_like(self.value)
        if self.v is None:
            self.v = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"GradSlot[{self.name}]", self.value.shape, self.grad.shape)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def adam_step(
    slot: GradSlot,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> GradSlot:
    """Bias-corrected Adam update in place; the gradient is cleared afterwards."""
    slot.step += 1
    g = slot.grad
    slot.m[...] = beta1 * slot.m + (1 - beta1) * g
    slot.v[...] = beta2 * slot.v + (1 - beta2) * (g * g)
    m_hat = slot.m / (1 - beta1 ** slot.step)
    v_hat = slot.v / (1 - beta2 ** slot.step)
    slot.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    slot.zero_grad()
    return slot


class Adam:
    """Adam over a fixed list of GradSlots"""

    def __init__(self, slots: Iterable[GradSlot], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.slots = list(slots)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self) -> None:
        for slot in self.slots:
            adam_step(slot, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for slot in self.slots:
            slot.zero_grad()
