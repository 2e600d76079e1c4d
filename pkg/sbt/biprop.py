"""
Biprop: score-driven top-k masks over frozen random weights, binarized to ±α.

A Biprop module never trains its latent weights W. Only the scores S move;
every forward pass recomputes the mask M from |S|, the gain term α from the
surviving |W|, and uses W_eff = α · sign(W) ⊙ M. Gradients reach S through
the straight-through estimator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import GradSlot, INFER_DTYPE, NormCache, normalize_backward, normalize_forward

logger = logging.getLogger(__name__)

BipropKind = Literal["linear", "layernorm-gain"]


def keep_count(total: int, prune_rate: float) -> int:
    """Number of surviving entries: total − ⌊total·p⌋."""
    return total - int(np.floor(total * prune_rate))


def _check_prune_rate(p: float) -> None:
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"prune rate must be in [0, 1), got {p}")


def compute_mask(scores: np.ndarray, prune_rate: float) -> np.ndarray:
    """Keep the entries with the largest |S|; ties go to the lower flat index."""
    _check_prune_rate(prune_rate)
    if scores.size == 0:
        raise ValueError("compute_mask: empty score tensor")
    magnitude = np.abs(scores).ravel()
    order = np.argsort(-magnitude, kind="stable")
    mask = np.zeros(magnitude.size, dtype=bool)
    mask[order[:keep_count(magnitude.size, prune_rate)]] = True
    return mask.reshape(scores.shape)


def compute_alpha(weights: np.ndarray, mask: np.ndarray, name: str = "") -> float:
    """Mean |W| over the surviving entries; 0 when nothing survives."""
    if weights.shape != mask.shape:
        raise ShapeError("compute_alpha", weights.shape, mask.shape)
    kept = int(mask.sum())
    if kept == 0:
        logger.warning("Biprop module %s has every weight pruned; its output is zero", name or "?")
        return 0.0
    return float(np.abs(weights[mask]).sum() / kept)


def binary_signs(weights: np.ndarray) -> np.ndarray:
    """sign(W) with sign(0) = +1, as int8."""
    return np.where(weights >= 0, 1, -1).astype(np.int8)


def _materialize(mask: np.ndarray, signs: np.ndarray, alpha: float, dtype) -> np.ndarray:
    return (dtype(alpha) * signs.astype(dtype)) * mask.astype(dtype)


@dataclass(frozen=True)
class EffectiveWeights:
    """Frozen (M, B, α) triple of one Biprop module"""
    name: str
    kind: BipropKind
    mask: np.ndarray
    signs: np.ndarray
    alpha: float

    def __post_init__(self):
        if self.mask.shape != self.signs.shape:
            raise ShapeError(f"EffectiveWeights[{self.name}]", self.mask.shape, self.signs.shape)
        self.mask.flags.writeable = False
        self.signs.flags.writeable = False

    @property
    def shape(self) -> tuple:
        return self.mask.shape

    @property
    def nonzero(self) -> int:
        return int(self.mask.sum()) if self.alpha != 0 else 0

    def materialize(self, dtype=INFER_DTYPE) -> np.ndarray:
        return _materialize(self.mask, self.signs, self.alpha, np.dtype(dtype).type)


@dataclass
class BipropLayerState:
    """Latent weights, trainable scores and the per-step derived mask and gain"""
    name: str
    kind: BipropKind
    weight: np.ndarray
    scores: GradSlot
    prune_rate: float
    differentiate_alpha: bool = False
    has_bias: bool = False
    mask: Optional[np.ndarray] = field(default=None, repr=False)
    alpha: float = 0.0

    def __post_init__(self):
        _check_prune_rate(self.prune_rate)
        if self.has_bias:
            raise ConfigError(f"{self.name}: Biprop modules carry no bias")
        if self.scores.value.shape != self.weight.shape:
            raise ShapeError(f"BipropLayerState[{self.name}]", self.weight.shape, self.scores.value.shape)
        self.signs = binary_signs(self.weight)

    @property
    def shape(self) -> tuple:
        return self.weight.shape

    def refresh(self) -> None:
        """Recompute M and α from the current scores."""
        self.mask = compute_mask(self.scores.value, self.prune_rate)
        self.alpha = compute_alpha(self.weight, self.mask, self.name)

    def effective_weight(self, dtype=None) -> np.ndarray:
        if self.mask is None:
            self.refresh()
        return _materialize(self.mask, self.signs, self.alpha, np.dtype(dtype or self.weight.dtype).type)


def init_layer(
    name: str,
    shape: tuple,
    prune_rate: float,
    rng: np.random.Generator,
    kind: BipropKind = "linear",
    differentiate_alpha: bool = False,
) -> BipropLayerState:
    """
    Kaiming-normal latent weights and an independent score draw of the same scale.

    Layer-norm gains start at one, the usual gain initialization, so every
    surviving gain binarizes to +α = 1.
    """
    fan_in = shape[-1]
    std = np.sqrt(2.0 / fan_in)
    if kind == "layernorm-gain":
        weight = np.ones(shape)
    else:
        weight = rng.normal(0.0, std, size=shape)
    scores = rng.normal(0.0, std, size=shape)
    state = BipropLayerState(
        name=name,
        kind=kind,
        weight=weight,
        scores=GradSlot(f"{name}.scores", scores),
        prune_rate=prune_rate,
        differentiate_alpha=differentiate_alpha,
    )
    state.refresh()
    return state


def effective_forward(layer: BipropLayerState, x: np.ndarray) -> np.ndarray:
    """
    x · W_effᵀ for linear modules, x ⊙ W_eff for layer-norm gains.

    M and α are recomputed from the current scores on every call.
    """
    layer.refresh()
    w_eff = layer.effective_weight(x.dtype)
    if x.shape[-1] != layer.shape[-1]:
        raise ShapeError(f"effective_forward[{layer.name}]", x.shape, layer.shape)
    if layer.kind == "layernorm-gain":
        return x * w_eff
    return np.matmul(x, w_eff.T)


def ste_backward(layer: BipropLayerState, g: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Straight-through gradients for the forward pass that produced ``g``.

    Returns (dS, dx). dS is ∂L/∂W_eff, pruned entries included; it is also
    accumulated into ``layer.scores.grad``.
    """
    w_eff = layer.effective_weight(g.dtype)
    if layer.kind == "layernorm-gain":
        reduce_axes = tuple(range(g.ndim - 1))
        d_w = (g * x).sum(axis=reduce_axes)
        dx = g * w_eff
    else:
        out_features, in_features = layer.shape
        d_w = g.reshape(-1, out_features).T @ x.reshape(-1, in_features)
        dx = np.matmul(g, w_eff)

    d_scores = d_w.copy()
    if layer.differentiate_alpha:
        kept = int(layer.mask.sum())
        if kept:
            d_alpha = float((d_w * layer.signs * layer.mask).sum())
            d_scores += d_alpha * (np.abs(layer.weight) - layer.alpha) / kept

    layer.scores.grad += d_scores
    return d_scores, dx


def freeze(layer: BipropLayerState) -> EffectiveWeights:
    layer.refresh()
    return EffectiveWeights(
        name=layer.name,
        kind=layer.kind,
        mask=layer.mask.copy(),
        signs=layer.signs.copy(),
        alpha=layer.alpha,
    )


def mask_churn(previous: np.ndarray, current: np.ndarray) -> float:
    """Fraction of mask entries that flipped between two snapshots."""
    if previous.shape != current.shape:
        raise ShapeError("mask_churn", previous.shape, current.shape)
    return float(np.mean(previous != current))


# -----------------------------------------------------------------------------
# trainable modules
# -----------------------------------------------------------------------------

class BipropLinear:
    """Bias-free linear layer whose weight is α · sign(W) ⊙ M"""

    def __init__(self, state: BipropLayerState):
        self.state = state
        self._x: Optional[np.ndarray] = None

    @property
    def name(self) -> str:
        return self.state.name

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        self._x = x
        return effective_forward(self.state, x)

    def backward(self, g: np.ndarray) -> np.ndarray:
        _, dx = ste_backward(self.state, g, self._x)
        return dx

    def slots(self) -> list[GradSlot]:
        return [self.state.scores]


class BipropLayerNorm:
    """Layer normalization whose gain vector is a Biprop module; no bias"""

    def __init__(self, state: BipropLayerState, eps: float = 1e-5):
        if state.kind != "layernorm-gain":
            raise ConfigError(f"{state.name}: expected a layernorm-gain state, got {state.kind}")
        self.state = state
        self.eps = eps
        self._xhat: Optional[np.ndarray] = None
        self._cache: Optional[NormCache] = None

    @property
    def name(self) -> str:
        return self.state.name

    def forward(self, x: np.ndarray, training: bool = True, valid: Optional[np.ndarray] = None) -> np.ndarray:
        # per-step statistics; padding needs no special case
        d = x.shape[-1]
        self._xhat, self._cache = normalize_forward(x, "layer", np.ones(d), np.zeros(d), self.eps)
        return effective_forward(self.state, self._xhat)

    def backward(self, g: np.ndarray) -> np.ndarray:
        _, dxhat = ste_backward(self.state, g, self._xhat)
        dx, _, _ = normalize_backward(dxhat, self._cache)
        return dx

    def slots(self) -> list[GradSlot]:
        return [self.state.scores]
