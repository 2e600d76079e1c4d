"""
Multi-head self-attention and its sparsity variants.

  canonical      full softmax(QKᵀ·scale)·V
  step_t         only the last time step attends to the past; earlier rows copy V
  qkv_random     fixed element-wise random masks on the Q, K, V activations
  qkv_magnitude  per-sample magnitude pruning of the Q, K, V activations
  identity       every row attends only to itself
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional, Sequence

import numpy as np

from .errors import ConfigError, DivergenceError, ShapeError
from .numerics import GradSlot, matmul, matmul_backward, softmax_backward, softmax_last

logger = logging.getLogger(__name__)

Variant = Literal["canonical", "step_t", "qkv_random", "qkv_magnitude", "identity"]
VARIANTS: tuple[str, ...] = ("canonical", "step_t", "qkv_random", "qkv_magnitude", "identity")


# -----------------------------------------------------------------------------
# masks
# -----------------------------------------------------------------------------

def build_step_t_mask(w: int) -> np.ndarray:
    """
    Additive w×w mask: rows 0..w−2 see only themselves, row w−1 sees every
    earlier step but not itself.
    """
    if w < 2:
        raise ConfigError(f"step_t attention needs a window of at least 2, got {w}")
    mask = np.full((w, w), -np.inf)
    idx = np.arange(w - 1)
    mask[idx, idx] = 0.0
    mask[w - 1, : w - 1] = 0.0
    return mask


def build_identity_mask(w: int) -> np.ndarray:
    mask = np.full((w, w), -np.inf)
    np.fill_diagonal(mask, 0.0)
    return mask


def key_padding_mask(valid: np.ndarray) -> np.ndarray:
    """(B, w) validity flags → additive (B, 1, w) mask over keys."""
    return np.where(valid[:, None, :], 0.0, -np.inf)


def sample_qkv_masks(w: int, d: int, prune_rate: float, seed) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Three independent (w, d) keep-masks with exactly w·d − ⌊w·d·p⌋ ones each."""
    if not 0.0 <= prune_rate < 1.0:
        raise ConfigError(f"activation prune rate must be in [0, 1), got {prune_rate}")
    rng = np.random.default_rng(seed)
    total = w * d
    keep = total - int(np.floor(total * prune_rate))
    masks = []
    for _ in range(3):
        flat = np.zeros(total, dtype=bool)
        flat[rng.choice(total, size=keep, replace=False)] = True
        masks.append(flat.reshape(w, d))
    return tuple(masks)


def magnitude_mask(x: np.ndarray, prune_rate: float) -> np.ndarray:
    """Per-sample keep-mask over the trailing (w, d) block, largest |x| first."""
    samples = x.shape[0] if x.ndim == 3 else 1
    flat = np.abs(x).reshape(samples, -1)
    keep = flat.shape[1] - int(np.floor(flat.shape[1] * prune_rate))
    order = np.argsort(-flat, axis=1, kind="stable")
    mask = np.zeros(flat.shape, dtype=bool)
    np.put_along_axis(mask, order[:, :keep], True, axis=1)
    return mask.reshape(x.shape)


def apply_activation_mask(
    x: np.ndarray,
    mask: Optional[np.ndarray] = None,
    prune_rate: Optional[float] = None,
) -> np.ndarray:
    """Fixed mask when ``mask`` is given, otherwise per-sample magnitude pruning."""
    if mask is None:
        if prune_rate is None:
            raise ValueError("apply_activation_mask needs a mask or a prune rate")
        mask = magnitude_mask(x, prune_rate)
    if mask.shape != x.shape[-mask.ndim:]:
        raise ShapeError("apply_activation_mask", x.shape, mask.shape)
    return x * mask


# -----------------------------------------------------------------------------
# plan
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class AttentionPlan:
    """Static description of one attention module and its masks"""
    h: int
    d: int
    w: int
    variant: str = "canonical"
    activation_prune_rate: float = 0.0
    scale_by_head_dim: bool = True
    seed: tuple = (0,)
    step_mask: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    qkv_masks: Optional[tuple] = field(default=None, repr=False, compare=False)

    @classmethod
    def build(
        cls,
        h: int,
        d: int,
        w: int,
        variant: str = "canonical",
        activation_prune_rate: float = 0.0,
        seed: Sequence[int] | int = 0,
        scale_by_head_dim: bool = True,
    ) -> "AttentionPlan":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown attention variant {variant!r}; expected one of {', '.join(VARIANTS)}")
        if h < 1 or d % h != 0:
            raise ConfigError(f"model width {d} is not divisible by {h} heads")
        seed = tuple(seed) if isinstance(seed, (list, tuple)) else (int(seed),)

        step_mask = None
        qkv_masks = None
        match variant:
            case "step_t":
                step_mask = build_step_t_mask(w)
            case "identity":
                step_mask = build_identity_mask(w)
            case "qkv_random":
                qkv_masks = sample_qkv_masks(w, d, activation_prune_rate, list(seed))
            case "qkv_magnitude":
                if not 0.0 <= activation_prune_rate < 1.0:
                    raise ConfigError(f"activation prune rate must be in [0, 1), got {activation_prune_rate}")

        for arr in (step_mask, *(qkv_masks or ())):
            if arr is not None:
                arr.flags.writeable = False
        return cls(h, d, w, variant, activation_prune_rate, scale_by_head_dim, seed, step_mask, qkv_masks)

    @property
    def head_dim(self) -> int:
        return self.d // self.h

    @property
    def scale(self) -> float:
        return float(1.0 / np.sqrt(self.head_dim if self.scale_by_head_dim else self.d))


def mask_digest(plan: AttentionPlan) -> str:
    """SHA-256 over the plan's fixed masks; constant for the life of a model."""
    digest = hashlib.sha256(plan.variant.encode())
    for arr in (plan.step_mask, *(plan.qkv_masks or ())):
        if arr is not None:
            digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()


# -----------------------------------------------------------------------------
# functional core
# -----------------------------------------------------------------------------

def split_heads(x: np.ndarray, h: int) -> np.ndarray:
    """(B, w, d) → (B·h, w, d/h)"""
    b, w, d = x.shape
    return x.reshape(b, w, h, d // h).transpose(0, 2, 1, 3).reshape(b * h, w, d // h)


def merge_heads(x: np.ndarray, h: int) -> np.ndarray:
    """(B·h, w, d′) → (B, w, h·d′)"""
    bh, w, dh = x.shape
    return x.reshape(bh // h, h, w, dh).transpose(0, 2, 1, 3).reshape(bh // h, w, h * dh)


def mask_projections(
    plan: AttentionPlan, q: np.ndarray, k: np.ndarray, v: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, Optional[tuple]]:
    """Apply the plan's activation masks; returns the masks used for the backward pass."""
    match plan.variant:
        case "qkv_random":
            masks = plan.qkv_masks
        case "qkv_magnitude":
            p = plan.activation_prune_rate
            masks = (magnitude_mask(q, p), magnitude_mask(k, p), magnitude_mask(v, p))
        case _:
            return q, k, v, None
    return q * masks[0], k * masks[1], v * masks[2], masks


@dataclass
class AttendCache:
    qh: np.ndarray
    kh: np.ndarray
    vh: np.ndarray
    probs: np.ndarray


def _additive_mask(plan: AttentionPlan, key_padding: Optional[np.ndarray]) -> Optional[np.ndarray]:
    mask = plan.step_mask
    if key_padding is not None:
        pad = np.repeat(key_padding_mask(key_padding), plan.h, axis=0)
        mask = pad if mask is None else mask[None, :, :] + pad
    return mask


def attend(
    plan: AttentionPlan,
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    key_padding: Optional[np.ndarray] = None,
    counter=None,
    prefix: str = "attn",
    fast_step_t: bool = False,
) -> tuple[np.ndarray, Optional[AttendCache]]:
    """
    Per-head softmax(QKᵀ·scale + mask)·V on already projected (B, w, d) inputs.

    With ``fast_step_t`` the step_t variant scores only the last row and
    copies V for the others; no cache is returned in that mode.
    """
    if not (q.shape == k.shape == v.shape):
        raise ShapeError("attend", q.shape, k.shape if q.shape != k.shape else v.shape)
    if q.shape[-1] != plan.d:
        raise ShapeError("attend", q.shape, (plan.w, plan.d))

    qh, kh, vh = (split_heads(t, plan.h) for t in (q, k, v))

    if fast_step_t and plan.variant == "step_t" and key_padding is None:
        last = qh[:, -1:, :]
        past_t = np.swapaxes(kh[:, :-1, :], -1, -2)
        scores = matmul(last, past_t) * plan.scale
        _guard(scores, prefix)
        weights = softmax_last(scores)
        out = vh.copy()
        out[:, -1:, :] = matmul(weights, vh[:, :-1, :])
        if counter is not None:
            counter.matmul(f"{prefix}.qk", last, past_t)
            full = np.zeros((qh.shape[0], plan.w, plan.w), dtype=weights.dtype)
            idx = np.arange(plan.w - 1)
            full[:, idx, idx] = 1.0
            full[:, -1, :-1] = weights[:, 0, :]
            counter.matmul(f"{prefix}.av", full, vh)
        return merge_heads(out, plan.h), None

    kt = np.swapaxes(kh, -1, -2)
    scores = matmul(qh, kt) * plan.scale
    _guard(scores, prefix)
    mask = _additive_mask(plan, key_padding)
    probs = softmax_last(scores, None if mask is None else mask.astype(scores.dtype))
    out = matmul(probs, vh)
    if counter is not None:
        counter.matmul(f"{prefix}.qk", qh, kt)
        counter.matmul(f"{prefix}.av", probs, vh)
    return merge_heads(out, plan.h), AttendCache(qh, kh, vh, probs)


def _guard(scores: np.ndarray, prefix: str) -> None:
    if not np.all(np.isfinite(scores)):
        raise DivergenceError(f"{prefix}: non-finite attention scores")


def attend_backward(plan: AttentionPlan, g: np.ndarray, cache: AttendCache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    gh = split_heads(g, plan.h)
    d_probs, d_vh = matmul_backward(gh, cache.probs, cache.vh)
    d_scores = softmax_backward(d_probs, cache.probs) * plan.scale
    d_qh, d_kt = matmul_backward(d_scores, cache.qh, np.swapaxes(cache.kh, -1, -2))
    d_kh = np.swapaxes(d_kt, -1, -2)
    return merge_heads(d_qh, plan.h), merge_heads(d_kh, plan.h), merge_heads(d_vh, plan.h)


def multi_head_attention(
    plan: AttentionPlan,
    z: np.ndarray,
    wq: Callable[[np.ndarray], np.ndarray],
    wk: Callable[[np.ndarray], np.ndarray],
    wv: Callable[[np.ndarray], np.ndarray],
    wo: Callable[[np.ndarray], np.ndarray],
    key_padding: Optional[np.ndarray] = None,
    counter=None,
    prefix: str = "attn",
    fast_step_t: bool = False,
) -> np.ndarray:
    """Stateless attention sublayer; projections are plain callables (dense, Biprop or packed)."""
    if z.ndim != 3 or z.shape[1:] != (plan.w, plan.d):
        raise ShapeError("multi_head_attention", z.shape, (plan.w, plan.d))
    q, k, v, _ = mask_projections(plan, wq(z), wk(z), wv(z))
    out, _ = attend(plan, q, k, v, key_padding, counter, prefix, fast_step_t)
    return wo(out)


# -----------------------------------------------------------------------------
# trainable module
# -----------------------------------------------------------------------------

class MultiHeadAttention:
    """Attention sublayer with cached forward state for the backward pass"""

    def __init__(self, plan: AttentionPlan, wq, wk, wv, wo):
        self.plan = plan
        self.wq, self.wk, self.wv, self.wo = wq, wk, wv, wo
        self._masks: Optional[tuple] = None
        self._cache: Optional[AttendCache] = None

    def forward(self, z: np.ndarray, key_padding: Optional[np.ndarray] = None, training: bool = True) -> np.ndarray:
        if z.ndim != 3 or z.shape[1:] != (self.plan.w, self.plan.d):
            raise ShapeError("MultiHeadAttention", z.shape, (self.plan.w, self.plan.d))
        q = self.wq.forward(z, training)
        k = self.wk.forward(z, training)
        v = self.wv.forward(z, training)
        q, k, v, self._masks = mask_projections(self.plan, q, k, v)
        out, self._cache = attend(self.plan, q, k, v, key_padding)
        return self.wo.forward(out, training)

    def backward(self, g: np.ndarray) -> np.ndarray:
        d_out = self.wo.backward(g)
        dq, dk, dv = attend_backward(self.plan, d_out, self._cache)
        if self._masks is not None:
            dq, dk, dv = dq * self._masks[0], dk * self._masks[1], dv * self._masks[2]
        return self.wq.backward(dq) + self.wk.backward(dk) + self.wv.backward(dv)

    def slots(self) -> list[GradSlot]:
        return [s for proj in (self.wq, self.wk, self.wv, self.wo) for s in proj.slots()]
