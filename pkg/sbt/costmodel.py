"""
Non-zero FLOPs and storage accounting.

One multiply-add counts as one FLOP. Two conventions for linear layers:

- ``per_sample``: linears outside the Q/K/V projections are counted once per
  window (out·in·kr), Q/K/V projections are counted per time step
  (3·w·d²·kr). This is the convention of the reference cost table.
- ``per_timestep``: every linear is counted once per row it is applied to.
  This is what a forward pass literally executes and what
  ``instrumented_count`` measures.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
import pandas as pd

from .biprop import keep_count
from .errors import ConfigError
from .model import FrozenModel, ModelConfig, ParamCensus, count_params, frozen_forward, module_specs

logger = logging.getLogger(__name__)

Convention = Literal["per_sample", "per_timestep"]
Scenario = Literal["dense", "sbt", "pruned32", "pruned8"]
SCENARIOS: tuple[Scenario, ...] = ("dense", "sbt", "pruned32", "pruned8")


@dataclass(frozen=True)
class LayerSpec:
    """
    One countable unit.

    linear: dims = (out, in), ``kept`` surviving weights, ``rows`` the number
    of rows it is applied to per sample. attention: dims = (w, d, h) and the
    activation keep rate ``kr_a``.
    """
    name: str
    kind: Literal["linear", "attention", "norm", "encoding"]
    dims: tuple
    kept: int = 0
    rows: int = 1
    scope: Literal["outside", "qkv", "none"] = "outside"
    variant: Optional[str] = None
    kr_a: float = 1.0
    norm_kind: Optional[str] = None

    def __post_init__(self):
        if not 0.0 < self.kr_a <= 1.0:
            raise ConfigError(f"{self.name}: activation keep rate must be in (0, 1], got {self.kr_a}")

    @property
    def kr(self) -> float:
        return self.kept / float(np.prod(self.dims)) if self.kind == "linear" else 1.0


def linear_flops(spec: LayerSpec, convention: Convention = "per_sample") -> int:
    """
    kept(out·in), times the rows under ``per_timestep`` and for Q/K/V projections.

    Under ``per_sample`` the output projection Wo is counted once per window
    (d²·kr, no w factor), like every other linear outside Q/K/V.
    """
    if spec.kind != "linear":
        raise ConfigError(f"{spec.name}: linear_flops on a {spec.kind} spec")
    if convention == "per_timestep" or spec.scope == "qkv":
        return spec.kept * spec.rows
    return spec.kept


def attention_flops(spec: LayerSpec) -> dict[str, float]:
    """QKᵀ and AV multiply-adds for one attention sublayer, all heads. Wo is a separate linear."""
    if spec.kind != "attention":
        raise ConfigError(f"{spec.name}: attention_flops on a {spec.kind} spec")
    w, d, h = spec.dims
    dh = d // h
    match spec.variant:
        case "canonical":
            return {"qk": dh * w * w * h, "av": dh * w * w * h}
        case "step_t":
            return {"qk": (w - 1) * dh * h, "av": 2 * (w - 1) * dh * h}
        case "qkv_random" | "qkv_magnitude":
            return {"qk": dh * (w * spec.kr_a) ** 2 * h, "av": dh * w * w * spec.kr_a * h}
        case "identity":
            return {"qk": 0, "av": w * dh * h}
    raise ConfigError(f"unknown attention variant {spec.variant!r}")


def _scored_entries(spec: LayerSpec) -> int:
    w, _, h = spec.dims
    match spec.variant:
        case "step_t":
            return (w - 1) * h
        case "identity":
            return 0
    return w * w * h


def extra_flops(spec: LayerSpec) -> dict[str, int]:
    """Terms left out of the simplified equation: softmax, Q scaling, norms, positional add."""
    match spec.kind:
        case "attention":
            w, d, _ = spec.dims
            return {"softmax": 2 * _scored_entries(spec), "q_scale": w * d}
        case "norm":
            w, d = spec.dims
            return {"norm": (2 if spec.norm_kind == "batch" else 4) * w * d}
        case "encoding":
            w, d = spec.dims
            return {"positional": w * d}
    return {}


def _kr_a(config: ModelConfig) -> float:
    total = config.w * config.d
    return keep_count(total, config.activation_prune_rate) / total


def layer_specs(config: ModelConfig, pruned: bool = False) -> list[LayerSpec]:
    """
    Countable units in forward order.

    ``pruned`` counts a dense model as if its linears were magnitude pruned
    at the config's prune rate.
    """
    specs = []
    for mod in module_specs(config):
        match mod.kind:
            case "linear":
                total = mod.weights
                kept = keep_count(total, config.prune_rate) if (mod.binarized or pruned) else total
                rows = config.d if mod.name == "decoder" and mod.shape[1] == config.w and config.head == "feature_mean" \
                    else config.w
                specs.append(LayerSpec(mod.name, "linear", mod.shape, kept, rows, mod.scope))
                if mod.name == "input_proj":
                    specs.append(LayerSpec("positional", "encoding", (config.w, config.d)))
                if mod.name.endswith("attn.v"):
                    prefix = mod.name.rsplit(".", 1)[0]
                    kr_a = _kr_a(config) if config.attention in ("qkv_random", "qkv_magnitude") else 1.0
                    specs.append(LayerSpec(prefix, "attention", (config.w, config.d, config.h),
                                           variant=config.attention, kr_a=kr_a))
            case "norm" | "gain":
                kind = "batch" if config.norm == "batch" else "layer"
                specs.append(LayerSpec(mod.name, "norm", (config.w, config.d), norm_kind=kind))
    return specs


@dataclass
class CostReport:
    """FLOPs itemized per unit, the simplified subtotal, extras and storage."""
    name: str
    dense_mode: bool
    convention: Convention
    flops: dict[str, float] = field(default_factory=dict)
    extras: dict[str, float] = field(default_factory=dict)
    params: int = 0
    bits: int = 0

    @property
    def simplified(self) -> float:
        return float(sum(self.flops.values()))

    @property
    def extras_total(self) -> float:
        return float(sum(self.extras.values()))

    @property
    def total(self) -> float:
        return self.simplified + self.extras_total

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dense_mode": self.dense_mode,
            "convention": self.convention,
            "params": self.params,
            "bits": self.bits,
            "flops": self.flops,
            "extras": self.extras,
            "simplified": self.simplified,
            "extras_total": self.extras_total,
            "total": self.total,
        }


def model_flops(config: ModelConfig, convention: Convention = "per_sample", pruned: bool = False) -> CostReport:
    """
    Closed-form non-zero FLOPs of one window: input projection, N encoder
    layers (Q/K/V, QKᵀ, AV, output projection, feed-forward) and decoder,
    with the non-matmul terms itemized separately.
    """
    if convention not in ("per_sample", "per_timestep"):
        raise ConfigError(f"unknown FLOP convention {convention!r}")
    flops: dict[str, float] = {}
    extras: dict[str, float] = {}
    for spec in layer_specs(config, pruned):
        match spec.kind:
            case "linear":
                flops[spec.name] = linear_flops(spec, convention)
            case "attention":
                for part, count in attention_flops(spec).items():
                    flops[f"{spec.name}.{part}"] = count
        for part, count in extra_flops(spec).items():
            extras[f"{spec.name}.{part}"] = count
    census = count_params(config)
    scenario = "dense" if config.dense_mode else "sbt"
    return CostReport(config.name, config.dense_mode, convention, flops, extras,
                      census.table_total, bit_size(census, scenario))


def bit_size(census: ParamCensus, scenario: Scenario) -> int:
    """
    Storage in bits.

    dense: 32 per parameter; sbt: one bit per binary weight plus 32 per α
    and per FP32 residual; pruned32 / pruned8: surviving weights at 32 or 8
    bits, biases and norm affine kept at 32 bits, no index overhead.
    """
    match scenario:
        case "dense":
            return 32 * census.table_total
        case "sbt":
            return census.binary_params + 32 * (census.alpha_count + census.fp32_params)
        case "pruned32":
            return 32 * (census.kept_weights + census.dense_extras)
        case "pruned8":
            return 8 * census.kept_weights + 32 * census.dense_extras
    raise ConfigError(f"unknown storage scenario {scenario!r}")


# -----------------------------------------------------------------------------
# instrumented oracle
# -----------------------------------------------------------------------------

class FlopCounter:
    """Counts multiply-adds whose operands are both nonzero, bucketed by module."""

    def __init__(self):
        self.counts: dict[str, int] = {}

    def _add(self, name: str, n: int) -> None:
        self.counts[name] = self.counts.get(name, 0) + int(n)

    def linear(self, name: str, nonzero: int, rows: int) -> None:
        self._add(name, nonzero * rows)

    def matmul(self, name: str, a: np.ndarray, b: np.ndarray) -> None:
        # pairs (a[..., i, k], b[..., k, j]) with both entries nonzero
        left = (a != 0).sum(axis=-2)
        right = (b != 0).sum(axis=-1)
        self._add(name, (left * right).sum())

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def instrumented_count(frozen: FrozenModel, x: np.ndarray, valid: Optional[np.ndarray] = None) -> FlopCounter:
    """Run one forward pass and literally count the nonzero multiply-adds."""
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    counter = FlopCounter()
    frozen_forward(frozen, x, valid, counter=counter, fast_step_t=True)
    return counter


# -----------------------------------------------------------------------------
# scenario comparison and tables
# -----------------------------------------------------------------------------

@dataclass
class ScenarioComparison:
    name: str
    m: int
    w: int
    d: int
    params: dict[str, int]
    bits: dict[str, int]
    flops: dict[str, float]

    def savings(self, scenario: Scenario, what: Literal["bits", "flops"] = "bits") -> float:
        table = getattr(self, what)
        return table["dense"] / table[scenario]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "m": self.m,
            "w": self.w,
            "d": self.d,
            "params": self.params,
            "bits": self.bits,
            "flops": self.flops,
            "bit_savings": {s: self.savings(s, "bits") for s in SCENARIOS},
            "flop_savings": {s: self.savings(s, "flops") for s in SCENARIOS},
        }


def compare_scenarios(
    config: ModelConfig,
    scenarios: tuple[Scenario, ...] = SCENARIOS,
    convention: Convention = "per_sample",
) -> ScenarioComparison:
    """Dense baseline, SBT and the two pruned baselines of one preset."""
    dense, sbt = config.dense_twin(), config.sbt_twin()
    dense_census, sbt_census = count_params(dense), count_params(sbt)
    census = {"dense": dense_census, "sbt": sbt_census, "pruned32": dense_census, "pruned8": dense_census}
    dense_flops = model_flops(dense, convention).total
    pruned_flops = model_flops(dense, convention, pruned=True).total
    flops = {"dense": dense_flops, "sbt": model_flops(sbt, convention).total, "pruned32": pruned_flops, "pruned8": pruned_flops}
    wanted = ("dense", *[s for s in scenarios if s != "dense"])
    return ScenarioComparison(
        config.name, config.m, config.w, config.d,
        params={s: census[s].kept_weights + census[s].dense_extras if s.startswith("pruned") else census[s].table_total
                for s in wanted},
        bits={s: bit_size(census[s], s) for s in wanted},
        flops={s: flops[s] for s in wanted},
    )


def _ratio(value: float) -> str:
    return f"~×{value:.1f}"


def render_table(comparisons: list[ScenarioComparison], scenarios: tuple[Scenario, ...] = ("dense", "sbt")) -> pd.DataFrame:
    """Dataset, model, m, w, d, params, size (bits), FLOPs and ~savings against the dense row."""
    rows = []
    for comp in comparisons:
        for s in scenarios:
            if s not in comp.bits:
                continue
            rows.append({
                "dataset": comp.name,
                "model": s,
                "m": comp.m,
                "w": comp.w,
                "d": comp.d,
                "params": comp.params[s],
                "bits": comp.bits[s],
                "flops": comp.flops[s],
                "bit_savings": "" if s == "dense" else _ratio(comp.savings(s, "bits")),
                "flop_savings": "" if s == "dense" else _ratio(comp.savings(s, "flops")),
            })
    return pd.DataFrame(rows)


def preset_table(configs: list[ModelConfig], convention: Convention = "per_sample") -> pd.DataFrame:
    """Dense vs SBT rows for every preset."""
    return render_table([compare_scenarios(c, convention=convention) for c in configs])
