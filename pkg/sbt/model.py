"""
Transformer encoder for multivariate windows, dense or sparse-binary.

Layout (post-norm, residual around both sublayers):

    input_proj → + positional → N × [attention → add → norm → FF(ReLU) → add → norm] → decoder

``module_specs`` is the single list of every parameterized module; the
builder, the parameter census, the freezer and the cost model all walk it.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import biprop
from .attention import AttentionPlan, MultiHeadAttention, multi_head_attention
from .biprop import BipropLayerNorm, BipropLinear, EffectiveWeights, init_layer, keep_count
from .errors import ConfigError, DataError, ShapeError
from .numerics import (
    INFER_DTYPE,
    GradSlot,
    RunningStats,
    matmul,
    normalize,
    normalize_backward,
    normalize_forward,
    relu,
    relu_backward,
)

logger = logging.getLogger(__name__)

Task = Literal["classification", "anomaly", "forecasting"]

TASK_NORM = {"classification": "batch", "forecasting": "layer", "anomaly": "none"}


# -----------------------------------------------------------------------------
# configuration
# -----------------------------------------------------------------------------

class ModelConfig(BaseModel):
    """Architecture of one encoder; unset fields take their task defaults on validation"""
    model_config = ConfigDict(extra="forbid")

    name: str = "custom"
    task: Task
    m: int = Field(gt=0)
    w: int = Field(gt=0)
    d: int = Field(gt=0)
    h: int = Field(2, gt=0)
    n_layers: int = Field(2, ge=1)
    ff: int = Field(256, gt=0)
    dense_ff: Optional[int] = Field(None, gt=0)
    n_classes: Optional[int] = None
    norm: Optional[Literal["batch", "layer", "none"]] = None
    prune_rate: float = Field(0.5, ge=0.0, lt=1.0)
    dense_mode: bool = False
    attention: Optional[Literal["canonical", "step_t", "qkv_random", "qkv_magnitude", "identity"]] = None
    activation_prune_rate: Optional[float] = Field(None, ge=0.0, lt=1.0)
    positional: Optional[Literal["sinusoidal", "learnable"]] = None
    head: Literal["time_average", "feature_mean"] = "time_average"
    seed: int = 0
    differentiate_alpha: bool = False
    scale_by_head_dim: bool = True
    eps: float = Field(1e-5, gt=0.0)

    @model_validator(mode="after")
    def _task_defaults(self):
        if self.d % self.h:
            raise ValueError(f"d={self.d} is not divisible by h={self.h}")
        if self.task == "classification" and (self.n_classes is None or self.n_classes < 2):
            raise ValueError("classification needs n_classes >= 2")
        if self.norm is None:
            self.norm = TASK_NORM[self.task]
        if self.attention is None:
            if self.dense_mode:
                self.attention = "canonical"
            else:
                self.attention = "qkv_random" if self.task == "classification" else "step_t"
        if self.activation_prune_rate is None:
            self.activation_prune_rate = self.prune_rate
        if self.positional is None:
            self.positional = "learnable" if self.dense_mode and self.task == "classification" else "sinusoidal"
        if self.attention == "step_t" and self.w < 2:
            raise ValueError("step_t attention needs w >= 2")
        return self

    @property
    def ff_width(self) -> int:
        return self.dense_ff if self.dense_mode and self.dense_ff else self.ff

    @property
    def head_dim(self) -> int:
        return self.d // self.h

    @property
    def out_features(self) -> int:
        return self.n_classes if self.task == "classification" else self.m

    def with_updates(self, **updates) -> "ModelConfig":
        try:
            return ModelConfig.model_validate({**self.model_dump(), **updates})
        except ValidationError as e:
            raise ConfigError(str(e)) from e

    def dense_twin(self) -> "ModelConfig":
        return self.with_updates(dense_mode=True, attention=None, positional=None)

    def sbt_twin(self) -> "ModelConfig":
        return self.with_updates(dense_mode=False, attention=None, positional=None)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def parse_config(data: dict) -> ModelConfig:
    try:
        return ModelConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid model config: {e}") from e


# -----------------------------------------------------------------------------
# module specs and census
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class ModuleSpec:
    name: str
    kind: Literal["linear", "gain", "norm", "positional"]
    shape: tuple
    bias: bool = False
    binarized: bool = False
    scope: Literal["outside", "qkv", "none"] = "none"

    @property
    def weights(self) -> int:
        return int(np.prod(self.shape)) if self.kind != "norm" else 0


def module_specs(config: ModelConfig) -> list[ModuleSpec]:
    dense = config.dense_mode
    d = config.d
    specs = [ModuleSpec("input_proj", "linear", (d, config.m), bias=dense, binarized=not dense, scope="outside")]
    if config.positional == "learnable":
        specs.append(ModuleSpec("positional", "positional", (config.w, d)))

    def norm_spec(name: str) -> Optional[ModuleSpec]:
        if config.norm == "none":
            return None
        if config.norm == "layer" and not dense:
            return ModuleSpec(name, "gain", (d,), binarized=True)
        return ModuleSpec(name, "norm", (d,))

    for i in range(config.n_layers):
        p = f"layers.{i}"
        for proj in ("q", "k", "v"):
            specs.append(ModuleSpec(f"{p}.attn.{proj}", "linear", (d, d), bias=dense, binarized=not dense, scope="qkv"))
        specs.append(ModuleSpec(f"{p}.attn.o", "linear", (d, d), bias=dense, binarized=not dense, scope="outside"))
        if (n1 := norm_spec(f"{p}.norm1")) is not None:
            specs.append(n1)
        ff = config.ff_width
        specs.append(ModuleSpec(f"{p}.ff1", "linear", (ff, d), bias=dense, binarized=not dense, scope="outside"))
        specs.append(ModuleSpec(f"{p}.ff2", "linear", (d, ff), bias=dense, binarized=not dense, scope="outside"))
        if (n2 := norm_spec(f"{p}.norm2")) is not None:
            specs.append(n2)

    if config.task == "classification" and config.head == "feature_mean":
        decoder_shape = (config.n_classes, config.w)
    else:
        decoder_shape = (config.out_features, d)
    specs.append(ModuleSpec("decoder", "linear", decoder_shape, bias=dense, binarized=not dense, scope="outside"))
    return specs


@dataclass(frozen=True)
class CensusRow:
    name: str
    kind: str
    binary: int = 0
    alphas: int = 0
    fp32: int = 0
    positional: int = 0
    kept: int = 0
    dense_extra: int = 0


def census_row(spec: ModuleSpec, prune_rate: float) -> CensusRow:
    """
    Parameter counts of one module.

    ``kept`` and ``dense_extra`` feed the pruning scenarios: surviving
    weights at ``prune_rate`` and the FP32 biases / norm affine the same
    module carries in dense mode.
    """
    match spec.kind:
        case "linear":
            out = spec.shape[0]
            kept = keep_count(spec.weights, prune_rate)
            if spec.binarized:
                return CensusRow(spec.name, "linear", binary=spec.weights, alphas=1, kept=kept, dense_extra=out)
            return CensusRow(spec.name, "linear", fp32=spec.weights + (out if spec.bias else 0),
                             kept=kept, dense_extra=out if spec.bias else 0)
        case "gain":
            return CensusRow(spec.name, "gain", binary=spec.weights, alphas=1, dense_extra=2 * spec.shape[0])
        case "norm":
            return CensusRow(spec.name, "norm", fp32=2 * spec.shape[0], dense_extra=2 * spec.shape[0])
        case "positional":
            return CensusRow(spec.name, "positional", positional=spec.weights)
    raise ConfigError(f"unknown module kind {spec.kind}")


@dataclass
class ParamCensus:
    """Per-module parameter census with the published table's aggregates"""
    name: str
    dense_mode: bool
    rows: list[CensusRow] = field(default_factory=list)

    @property
    def binary_params(self) -> int:
        return sum(r.binary for r in self.rows)

    @property
    def alpha_count(self) -> int:
        return sum(r.alphas for r in self.rows)

    @property
    def fp32_params(self) -> int:
        return sum(r.fp32 for r in self.rows)

    @property
    def positional_params(self) -> int:
        return sum(r.positional for r in self.rows)

    @property
    def table_total(self) -> int:
        """Comparable to the published params column: learnable positional table excluded."""
        return self.binary_params + self.fp32_params

    @property
    def total(self) -> int:
        return self.table_total + self.positional_params

    @property
    def kept_weights(self) -> int:
        return sum(r.kept for r in self.rows)

    @property
    def dense_extras(self) -> int:
        return sum(r.dense_extra for r in self.rows)

    @property
    def binarized_modules(self) -> int:
        return self.alpha_count

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dense_mode": self.dense_mode,
            "binary_params": self.binary_params,
            "alpha_count": self.alpha_count,
            "fp32_params": self.fp32_params,
            "positional_params": self.positional_params,
            "table_total": self.table_total,
            "total": self.total,
            "modules": [r.__dict__ for r in self.rows],
        }


def count_params(model: Union["TransformerModel", ModelConfig]) -> ParamCensus:
    config = model if isinstance(model, ModelConfig) else model.config
    rows = [census_row(spec, config.prune_rate) for spec in module_specs(config)]
    return ParamCensus(config.name, config.dense_mode, rows)


# -----------------------------------------------------------------------------
# trainable modules
# -----------------------------------------------------------------------------

def kaiming_normal(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / shape[-1]), size=shape)


class Linear:
    """Dense FP linear layer with optional bias"""

    def __init__(self, name: str, weight: np.ndarray, bias: Optional[np.ndarray] = None):
        self.name = name
        self.weight = GradSlot(f"{name}.weight", weight)
        self.bias = GradSlot(f"{name}.bias", bias) if bias is not None else None
        self._x: Optional[np.ndarray] = None

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        self._x = x
        y = matmul(x, self.weight.value.T)
        return y + self.bias.value if self.bias is not None else y

    def backward(self, g: np.ndarray) -> np.ndarray:
        out_features, in_features = self.weight.value.shape
        self.weight.grad += g.reshape(-1, out_features).T @ self._x.reshape(-1, in_features)
        if self.bias is not None:
            self.bias.grad += g.reshape(-1, out_features).sum(axis=0)
        return np.matmul(g, self.weight.value)

    def slots(self) -> list[GradSlot]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class Norm:
    """FP32 layer or batch normalization with affine gain and bias"""

    def __init__(self, name: str, kind: Literal["layer", "batch"], d: int, eps: float = 1e-5):
        self.name = name
        self.kind = kind
        self.eps = eps
        self.gain = GradSlot(f"{name}.gain", np.ones(d))
        self.bias = GradSlot(f"{name}.bias", np.zeros(d))
        self.running = RunningStats.zeros(d) if kind == "batch" else None
        self._cache = None

    def forward(self, x: np.ndarray, training: bool = True, valid: Optional[np.ndarray] = None) -> np.ndarray:
        y, self._cache = normalize_forward(
            x, self.kind, self.gain.value, self.bias.value, self.eps, self.running, training, valid
        )
        return y

    def backward(self, g: np.ndarray) -> np.ndarray:
        dx, dgain, dbias = normalize_backward(g, self._cache)
        self.gain.grad += dgain
        self.bias.grad += dbias
        return dx

    def slots(self) -> list[GradSlot]:
        return [self.gain, self.bias]


def positional_encoding(
    w: int, d: int, kind: Literal["sinusoidal", "learnable"] = "sinusoidal",
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Sinusoidal (w, d) table, or a small-uniform initial table for the learnable kind."""
    if kind == "learnable":
        rng = rng or np.random.default_rng(0)
        return rng.uniform(-0.02, 0.02, size=(w, d))
    pos = np.arange(w)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-np.log(10000.0) / d))
    pe = np.zeros((w, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)[:, : d // 2]
    return pe


class PositionalEncoding:
    def __init__(self, name: str, table: np.ndarray, learnable: bool):
        self.name = name
        self.learnable = learnable
        self.table = GradSlot(f"{name}.table", table) if learnable else None
        self._constant = None if learnable else table

    @property
    def values(self) -> np.ndarray:
        return self.table.value if self.learnable else self._constant

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        return x + self.values

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self.learnable:
            self.table.grad += g.sum(axis=0)
        return g

    def slots(self) -> list[GradSlot]:
        return [self.table] if self.learnable else []


class EncoderLayer:
    def __init__(self, attn: MultiHeadAttention, norm1, ff1, ff2, norm2):
        self.attn = attn
        self.norm1 = norm1
        self.ff1 = ff1
        self.ff2 = ff2
        self.norm2 = norm2
        self._pre = None

    def forward(self, x: np.ndarray, key_padding: Optional[np.ndarray] = None, training: bool = True) -> np.ndarray:
        h = x + self.attn.forward(x, key_padding, training)
        if self.norm1 is not None:
            h = self.norm1.forward(h, training, key_padding)
        self._pre = self.ff1.forward(h, training)
        out = h + self.ff2.forward(relu(self._pre), training)
        if self.norm2 is not None:
            out = self.norm2.forward(out, training, key_padding)
        return out

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self.norm2 is not None:
            g = self.norm2.backward(g)
        dh = g + self.ff1.backward(relu_backward(self.ff2.backward(g), self._pre))
        if self.norm1 is not None:
            dh = self.norm1.backward(dh)
        return dh + self.attn.backward(dh)


def average_valid(step_logits: np.ndarray, valid: Optional[np.ndarray]) -> np.ndarray:
    """Mean of per-step logits over valid time steps."""
    if valid is None:
        return step_logits.mean(axis=1)
    counts = valid.sum(axis=1)
    if np.any(counts == 0):
        raise DataError(f"{int(np.sum(counts == 0))} sample(s) consist entirely of padding")
    weights = valid[..., None].astype(step_logits.dtype)
    return (step_logits * weights).sum(axis=1) / counts[:, None].astype(step_logits.dtype)


def make_plans(config: ModelConfig) -> list[AttentionPlan]:
    return [
        AttentionPlan.build(
            config.h, config.d, config.w, config.attention, config.activation_prune_rate,
            seed=(config.seed, i), scale_by_head_dim=config.scale_by_head_dim,
        )
        for i in range(config.n_layers)
    ]


class TransformerModel:
    """Trainable encoder; forward/backward over float64 batches of shape (B, w, m)"""

    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None):
        self.config = config
        rng = rng or np.random.default_rng(config.seed)
        self.plans = make_plans(config)
        self.modules: dict = {}
        for spec in module_specs(config):
            self.modules[spec.name] = self._build(spec, rng)

        if "positional" not in self.modules:
            self.positional = PositionalEncoding("positional", positional_encoding(config.w, config.d), learnable=False)
        else:
            self.positional = self.modules["positional"]

        self.layers: list[EncoderLayer] = []
        for i, plan in enumerate(self.plans):
            p = f"layers.{i}"
            attn = MultiHeadAttention(
                plan, *(self.modules[f"{p}.attn.{proj}"] for proj in ("q", "k", "v", "o"))
            )
            self.layers.append(EncoderLayer(
                attn,
                self.modules.get(f"{p}.norm1"),
                self.modules[f"{p}.ff1"],
                self.modules[f"{p}.ff2"],
                self.modules.get(f"{p}.norm2"),
            ))
        self._valid = None
        self._z = None

    def _build(self, spec: ModuleSpec, rng: np.random.Generator):
        cfg = self.config
        match spec.kind:
            case "linear" if spec.binarized:
                return BipropLinear(init_layer(spec.name, spec.shape, cfg.prune_rate, rng,
                                               differentiate_alpha=cfg.differentiate_alpha))
            case "linear":
                bias = np.zeros(spec.shape[0]) if spec.bias else None
                return Linear(spec.name, kaiming_normal(rng, spec.shape), bias)
            case "gain":
                state = init_layer(spec.name, spec.shape, cfg.prune_rate, rng, kind="layernorm-gain",
                                   differentiate_alpha=cfg.differentiate_alpha)
                return BipropLayerNorm(state, cfg.eps)
            case "norm":
                return Norm(spec.name, cfg.norm, spec.shape[0], cfg.eps)
            case "positional":
                return PositionalEncoding(spec.name, positional_encoding(cfg.w, cfg.d, "learnable", rng), learnable=True)
        raise ConfigError(f"unknown module kind {spec.kind}")

    # -- forward / backward ---------------------------------------------------

    def forward(self, x: np.ndarray, valid: Optional[np.ndarray] = None, training: bool = True) -> np.ndarray:
        cfg = self.config
        if x.ndim != 3 or x.shape[1:] != (cfg.w, cfg.m):
            raise ShapeError("TransformerModel.forward", x.shape, (cfg.w, cfg.m))
        self._valid = valid
        z = self.positional.forward(self.modules["input_proj"].forward(x, training))
        for layer in self.layers:
            z = layer.forward(z, valid, training)
        self._z = z

        decoder = self.modules["decoder"]
        if cfg.task != "classification":
            return decoder.forward(z, training)
        if cfg.head == "feature_mean":
            zt = self._masked(z).transpose(0, 2, 1)
            return decoder.forward(zt, training).mean(axis=1)
        return average_valid(decoder.forward(z, training), valid)

    def _masked(self, z: np.ndarray) -> np.ndarray:
        return z if self._valid is None else z * self._valid[..., None]

    def backward(self, g: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients for the last forward pass; returns dL/dx."""
        cfg = self.config
        decoder = self.modules["decoder"]
        if cfg.task != "classification":
            dz = decoder.backward(g)
        elif cfg.head == "feature_mean":
            g_feat = np.broadcast_to(g[:, None, :] / cfg.d, (g.shape[0], cfg.d, g.shape[1]))
            dz = self._masked(decoder.backward(np.ascontiguousarray(g_feat)).transpose(0, 2, 1))
        else:
            if self._valid is None:
                g_step = np.broadcast_to(g[:, None, :] / cfg.w, (g.shape[0], cfg.w, g.shape[1]))
            else:
                counts = self._valid.sum(axis=1)
                g_step = g[:, None, :] * (self._valid[..., None] / counts[:, None, None])
            dz = decoder.backward(np.ascontiguousarray(g_step))

        for layer in reversed(self.layers):
            dz = layer.backward(dz)
        return self.modules["input_proj"].backward(self.positional.backward(dz))

    # -- parameters -----------------------------------------------------------

    def slots(self) -> list[GradSlot]:
        return [s for mod in self.modules.values() for s in mod.slots()]

    def biprop_states(self) -> dict[str, biprop.BipropLayerState]:
        return {name: mod.state for name, mod in self.modules.items()
                if isinstance(mod, (BipropLinear, BipropLayerNorm))}

    def mask_snapshot(self) -> dict[str, np.ndarray]:
        snapshot = {}
        for name, state in self.biprop_states().items():
            state.refresh()
            snapshot[name] = state.mask.copy()
        return snapshot

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for name, mod in self.modules.items():
            match mod:
                case BipropLinear() | BipropLayerNorm():
                    state[f"{name}.weight"] = mod.state.weight.copy()
                    state[f"{name}.scores"] = mod.state.scores.value.copy()
                case Linear():
                    state[f"{name}.weight"] = mod.weight.value.copy()
                    if mod.bias is not None:
                        state[f"{name}.bias"] = mod.bias.value.copy()
                case Norm():
                    state[f"{name}.gain"] = mod.gain.value.copy()
                    state[f"{name}.bias"] = mod.bias.value.copy()
                    if mod.running is not None:
                        state[f"{name}.running_mean"] = mod.running.mean.copy()
                        state[f"{name}.running_var"] = mod.running.var.copy()
                case PositionalEncoding():
                    state[f"{name}.table"] = mod.table.value.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        def take(key: str, like: np.ndarray) -> np.ndarray:
            if key not in state:
                raise DataError(f"checkpoint is missing {key}")
            value = np.asarray(state[key], dtype=like.dtype)
            if value.shape != like.shape:
                raise ShapeError(f"load_state_dict[{key}]", like.shape, value.shape)
            return value.copy()

        for name, mod in self.modules.items():
            match mod:
                case BipropLinear() | BipropLayerNorm():
                    mod.state.weight = take(f"{name}.weight", mod.state.weight)
                    mod.state.signs = biprop.binary_signs(mod.state.weight)
                    mod.state.scores.value[...] = take(f"{name}.scores", mod.state.scores.value)
                    mod.state.refresh()
                case Linear():
                    mod.weight.value[...] = take(f"{name}.weight", mod.weight.value)
                    if mod.bias is not None:
                        mod.bias.value[...] = take(f"{name}.bias", mod.bias.value)
                case Norm():
                    mod.gain.value[...] = take(f"{name}.gain", mod.gain.value)
                    mod.bias.value[...] = take(f"{name}.bias", mod.bias.value)
                    if mod.running is not None:
                        mod.running.mean = take(f"{name}.running_mean", mod.running.mean)
                        mod.running.var = take(f"{name}.running_var", mod.running.var)
                case PositionalEncoding():
                    mod.table.value[...] = take(f"{name}.table", mod.table.value)


def build_model(config: ModelConfig, rng: Optional[np.random.Generator] = None) -> TransformerModel:
    return TransformerModel(config, rng)


def save_checkpoint(model: TransformerModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, __config__=np.array(model.config.canonical_json()), **model.state_dict())
    return path


def load_checkpoint(path: Union[str, Path]) -> TransformerModel:
    try:
        with np.load(path, allow_pickle=False) as data:
            config = parse_config(json.loads(str(data["__config__"])))
            state = {k: data[k] for k in data.files if k != "__config__"}
    except (OSError, KeyError, ValueError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    model = TransformerModel(config)
    model.load_state_dict(state)
    return model


# -----------------------------------------------------------------------------
# frozen inference
# -----------------------------------------------------------------------------

FrozenKind = Literal["linear", "gain", "dense", "affine", "layernorm", "positional"]


@dataclass(frozen=True)
class FrozenModule:
    """
    One module of a frozen model.

    Binarized kinds (linear, gain) carry EffectiveWeights and no residual.
    Every other kind keeps its parameters as a flat FP32 residual block:
    dense → weight then bias, affine / layernorm → gain then bias,
    positional → the (w, d) table.
    """
    name: str
    kind: FrozenKind
    shape: tuple
    effective: Optional[EffectiveWeights] = None
    residual: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=INFER_DTYPE))

    @property
    def binarized(self) -> bool:
        return self.effective is not None

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def dense_weight(self) -> np.ndarray:
        return self.residual[: self.size].reshape(self.shape)

    def dense_bias(self) -> Optional[np.ndarray]:
        rest = self.residual[self.size:]
        return rest if rest.size else None

    def affine(self) -> tuple[np.ndarray, np.ndarray]:
        d = self.shape[0]
        return self.residual[:d], self.residual[d:]

    @property
    def nonzero(self) -> int:
        if self.binarized:
            return self.effective.nonzero
        return int(np.count_nonzero(self.dense_weight()))


@dataclass(frozen=True)
class FrozenModel:
    """Immutable inference model: config, ordered frozen modules, attention plans"""
    config: ModelConfig
    modules: dict
    plans: tuple

    @classmethod
    def from_modules(cls, config: ModelConfig, modules: dict) -> "FrozenModel":
        return cls(config, dict(modules), tuple(make_plans(config)))


def _residual(*parts: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(p, dtype=INFER_DTYPE).ravel() for p in parts])


def freeze(model: TransformerModel) -> FrozenModel:
    """Snapshot the current masks, signs and α; batch norm folds into a scale/shift."""
    cfg = model.config
    frozen = {}
    for spec in module_specs(cfg):
        mod = model.modules[spec.name]
        match spec.kind:
            case "linear" if spec.binarized:
                frozen[spec.name] = FrozenModule(spec.name, "linear", spec.shape, effective=biprop.freeze(mod.state))
            case "linear":
                parts = [mod.weight.value] + ([mod.bias.value] if mod.bias is not None else [])
                frozen[spec.name] = FrozenModule(spec.name, "dense", spec.shape, residual=_residual(*parts))
            case "gain":
                frozen[spec.name] = FrozenModule(spec.name, "gain", spec.shape, effective=biprop.freeze(mod.state))
            case "norm" if mod.kind == "batch":
                scale = mod.gain.value / np.sqrt(mod.running.var + cfg.eps)
                shift = mod.bias.value - mod.running.mean * scale
                frozen[spec.name] = FrozenModule(spec.name, "affine", spec.shape, residual=_residual(scale, shift))
            case "norm":
                frozen[spec.name] = FrozenModule(spec.name, "layernorm", spec.shape,
                                                 residual=_residual(mod.gain.value, mod.bias.value))
            case "positional":
                frozen[spec.name] = FrozenModule(spec.name, "positional", spec.shape, residual=_residual(mod.table.value))
    return FrozenModel.from_modules(cfg, frozen)


def reference_linear(x: np.ndarray, module: FrozenModule) -> np.ndarray:
    """FP32 reference kernel against the materialized {−α, 0, +α} weights."""
    if module.binarized:
        return np.matmul(x, module.effective.materialize(x.dtype).T)
    y = np.matmul(x, module.dense_weight().T)
    bias = module.dense_bias()
    return y + bias if bias is not None else y


def _frozen_norm(frozen: FrozenModel, name: str, x: np.ndarray) -> np.ndarray:
    module = frozen.modules.get(name)
    if module is None:
        return x
    eps = frozen.config.eps
    d = x.shape[-1]
    match module.kind:
        case "gain":
            xhat = normalize(x, "layer", np.ones(d, dtype=x.dtype), np.zeros(d, dtype=x.dtype), eps)
            return xhat * module.effective.materialize(x.dtype)
        case "layernorm":
            gain, bias = module.affine()
            return normalize(x, "layer", gain, bias, eps)
        case "affine":
            scale, shift = module.affine()
            return x * scale + shift
    raise ConfigError(f"{name}: not a norm module ({module.kind})")


def frozen_forward(
    frozen: FrozenModel,
    x: np.ndarray,
    valid: Optional[np.ndarray] = None,
    linear=None,
    counter=None,
    fast_step_t: bool = False,
) -> np.ndarray:
    """
    FP32 inference through a frozen model.

    ``linear(x, module)`` swaps the linear kernel; ``counter`` receives
    ``linear(name, nonzero, rows)`` and ``matmul(name, a, b)`` calls.
    """
    cfg = frozen.config
    x = np.asarray(x, dtype=INFER_DTYPE)
    if x.ndim != 3 or x.shape[1:] != (cfg.w, cfg.m):
        raise ShapeError("frozen_forward", x.shape, (cfg.w, cfg.m))
    kernel = linear or reference_linear
    pad = None if valid is None else np.asarray(valid, dtype=bool)

    def lin(name: str, t: np.ndarray) -> np.ndarray:
        module = frozen.modules[name]
        if counter is not None:
            counter.linear(name, module.nonzero, int(np.prod(t.shape[:-1])))
        return kernel(t, module)

    z = lin("input_proj", x)
    if "positional" in frozen.modules:
        table = frozen.modules["positional"].residual.reshape(cfg.w, cfg.d)
    else:
        table = positional_encoding(cfg.w, cfg.d).astype(INFER_DTYPE)
    z = z + table

    for i, plan in enumerate(frozen.plans):
        p = f"layers.{i}"
        a = multi_head_attention(
            plan, z,
            *(partial(lin, f"{p}.attn.{proj}") for proj in ("q", "k", "v", "o")),
            key_padding=pad, counter=counter, prefix=f"{p}.attn", fast_step_t=fast_step_t,
        )
        z = _frozen_norm(frozen, f"{p}.norm1", z + a)
        z = _frozen_norm(frozen, f"{p}.norm2", z + lin(f"{p}.ff2", relu(lin(f"{p}.ff1", z))))

    if cfg.task != "classification":
        return lin("decoder", z)
    if cfg.head == "feature_mean":
        zt = (z if pad is None else z * pad[..., None]).transpose(0, 2, 1)
        return lin("decoder", np.ascontiguousarray(zt)).mean(axis=1)
    return average_valid(lin("decoder", z), pad)


# -----------------------------------------------------------------------------
# task entry points
# -----------------------------------------------------------------------------

AnyModel = Union[TransformerModel, FrozenModel]


def predict(model: AnyModel, x: np.ndarray, valid: Optional[np.ndarray] = None) -> np.ndarray:
    """Inference-mode forward for either a trainable or a frozen model."""
    if isinstance(model, FrozenModel):
        return frozen_forward(model, x, valid)
    return model.forward(x, valid, training=False)


def _run(model, x: np.ndarray, valid: Optional[np.ndarray]) -> np.ndarray:
    if isinstance(model, (TransformerModel, FrozenModel)):
        return predict(model, x, valid)
    return model(x, valid)


def forward_classification(model, x: np.ndarray, valid: Optional[np.ndarray] = None) -> np.ndarray:
    """Class logits (B, l); ``model`` may be trainable, frozen or a packed runtime."""
    if model.config.task != "classification":
        raise ConfigError(f"forward_classification on a {model.config.task} model")
    return _run(model, x, valid)


def forward_reconstruction(model, x: np.ndarray, valid: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-step outputs (B, w, m) of an anomaly or forecasting model."""
    if model.config.task == "classification":
        raise ConfigError("forward_reconstruction on a classification model")
    return _run(model, x, valid)
