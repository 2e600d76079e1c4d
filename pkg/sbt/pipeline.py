"""
Task pipelines: data loading, normalization, windowing, training and evaluation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Literal, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from tqdm import tqdm

from . import synthetic
from .errors import ConfigError, DataError, DivergenceError
from .biprop import mask_churn
from .model import (
    AnyModel,
    ModelConfig,
    Task,
    TransformerModel,
    build_model,
    count_params,
    forward_classification,
    forward_reconstruction,
)
from .numerics import Adam, cross_entropy
from .threshold import DetectSettings, ScoreSeries, detect

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8
WINDOW_CONVENTION = (50, 200)


# -----------------------------------------------------------------------------
# manifest
# -----------------------------------------------------------------------------

class SyntheticSource(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["sinusoid", "ar1", "anomaly_stream"]
    m: int = Field(4, gt=0)
    n_samples: int = Field(256, gt=4)
    length: int = Field(3000, gt=10)
    phi: float = Field(0.8, gt=-1.0, lt=1.0)
    magnitude: float = 3.0
    n_segments: int = Field(8, ge=1)
    phase_spread: float = Field(2 * np.pi, gt=0.0)
    seed: int = 0


class DatasetManifest(BaseModel):
    """Where a task's tables live and how to cut them into windows"""
    model_config = ConfigDict(extra="forbid")

    task: Task
    w: int = Field(gt=1)
    stride: int = Field(1, ge=1)
    train: Optional[str] = None
    val: Optional[str] = None
    test: Optional[str] = None
    features: Optional[list[str]] = None
    label: Optional[str] = None
    series_id: Optional[str] = None
    mask_target: Optional[bool] = None
    synthetic: Optional[SyntheticSource] = None
    base_dir: Optional[str] = Field(None, exclude=True)

    @model_validator(mode="after")
    def _check_sources(self):
        if self.synthetic is None and (self.train is None or self.test is None):
            raise ValueError("manifest needs train and test tables or a synthetic source")
        if self.synthetic is None and self.task == "classification" and (self.label is None or self.series_id is None):
            raise ValueError("classification tables need label and series_id columns")
        if self.synthetic is None and self.task == "anomaly" and self.label is None:
            raise ValueError("anomaly test table needs a label column")
        if self.mask_target is None:
            self.mask_target = self.task != "classification"
        if self.task != "classification" and self.w not in WINDOW_CONVENTION:
            logger.warning("window length %d differs from the usual %s for %s", self.w, WINDOW_CONVENTION, self.task)
        return self

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DatasetManifest":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigError(f"manifest not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"manifest {path} is not valid JSON: {e}") from e
        try:
            manifest = cls.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f"invalid manifest {path}: {e}") from e
        manifest.base_dir = str(path.parent)
        return manifest

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() or self.base_dir is None else Path(self.base_dir) / p


# -----------------------------------------------------------------------------
# normalization
# -----------------------------------------------------------------------------

@dataclass
class NormStats:
    """Per-feature mean and standard deviation of the training split"""
    mean: np.ndarray
    std: np.ndarray

    def apply(self, table: np.ndarray) -> np.ndarray:
        return (np.asarray(table, dtype=np.float64) - self.mean) / self.std

    def invert(self, table: np.ndarray) -> np.ndarray:
        return np.asarray(table, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "NormStats":
        return cls(np.asarray(data["mean"], dtype=np.float64), np.asarray(data["std"], dtype=np.float64))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "NormStats":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_normalizer(table: np.ndarray) -> NormStats:
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2 or table.shape[0] < 2:
        raise DataError(f"normalizer needs at least 2 rows per feature, got shape {table.shape}")
    mean = table.mean(axis=0)
    std = table.std(axis=0)
    if np.any(flat := std < STD_FLOOR):
        logger.warning("%d constant feature(s) in the training split; std floored at %g", int(flat.sum()), STD_FLOOR)
        std = np.maximum(std, STD_FLOOR)
    return NormStats(mean, std)


# -----------------------------------------------------------------------------
# windows
# -----------------------------------------------------------------------------

@dataclass
class WindowBatch:
    """
    Windows X (B, w, m) with their task labels.

    y: class ids (classification) or the x_t target (anomaly / forecasting);
    valid: (B, w) padding mask; flags: anomaly flag at the window end;
    index: time index of the window end.
    """
    x: np.ndarray
    y: Optional[np.ndarray] = None
    valid: Optional[np.ndarray] = None
    flags: Optional[np.ndarray] = None
    index: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, idx: np.ndarray) -> "WindowBatch":
        pick = lambda a: None if a is None else a[idx]
        return WindowBatch(self.x[idx], pick(self.y), pick(self.valid), pick(self.flags), pick(self.index))

    def batches(self, size: int, rng: Optional[np.random.Generator] = None) -> Iterator["WindowBatch"]:
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), size):
            yield self.take(order[start:start + size])


def make_windows(
    series: np.ndarray,
    w: int,
    stride: int = 1,
    labels: Optional[np.ndarray] = None,
    benign_filter: bool = False,
) -> WindowBatch:
    """
    Sliding windows [t−w+1 … t]. With ``benign_filter`` a window is dropped
    when any step before t carries an anomaly label.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim == 1:
        series = series[:, None]
    if series.shape[0] < w:
        raise DataError(f"series of length {series.shape[0]} is shorter than the window {w}")
    view = np.lib.stride_tricks.sliding_window_view(series, w, axis=0)[::stride]
    x = np.ascontiguousarray(view.transpose(0, 2, 1))
    ends = np.arange(w - 1, series.shape[0], stride)

    flags = None
    if labels is not None:
        labels = np.asarray(labels, dtype=bool)
        flags = labels[ends]
        if benign_filter:
            past = np.lib.stride_tricks.sliding_window_view(labels, w)[::stride][:, :-1]
            keep = ~past.any(axis=1)
            x, ends, flags = x[keep], ends[keep], flags[keep]
    return WindowBatch(x=x, flags=flags, index=ends)


def forecast_mask_input(window: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero the last time step; return (masked window, original x_t)."""
    masked = np.array(window, dtype=np.float64, copy=True)
    target = masked[..., -1, :].copy()
    masked[..., -1, :] = 0.0
    return masked, target


def _masked_batch(batch: WindowBatch) -> WindowBatch:
    x, target = forecast_mask_input(batch.x)
    return WindowBatch(x, target, batch.valid, batch.flags, batch.index)


def _target(batch: WindowBatch) -> np.ndarray:
    return batch.y if batch.y is not None else batch.x[:, -1, :]


def step_loss(task: Task, output: np.ndarray, batch: WindowBatch) -> tuple[float, np.ndarray]:
    """
    Training loss and its gradient wrt the model output.

    classification: mean cross-entropy; anomaly / forecasting: MSE on x_t only.
    """
    if task == "classification":
        return cross_entropy(output, batch.y)
    target = _target(batch)
    diff = output[:, -1, :] - target
    loss = float(np.mean(diff ** 2))
    grad = np.zeros_like(output)
    grad[:, -1, :] = 2.0 * diff / diff.size
    return loss, grad


# -----------------------------------------------------------------------------
# task data
# -----------------------------------------------------------------------------

@dataclass
class TaskData:
    task: Task
    train: WindowBatch
    val: WindowBatch
    test: WindowBatch
    stats: NormStats
    feature_names: list[str]
    class_names: list = field(default_factory=list)

    @property
    def m(self) -> int:
        return self.train.x.shape[-1]

    @property
    def n_classes(self) -> Optional[int]:
        return len(self.class_names) or None


def _read_table(manifest: DatasetManifest, rel: str) -> pd.DataFrame:
    """CSV 테이블 읽기"""
    path = manifest.resolve(rel)
    try:
        return pd.read_csv(path)
    except FileNotFoundError as e:
        raise DataError(f"table not found: {path}") from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataError(f"cannot parse {path}: {e}") from e


def _feature_columns(manifest: DatasetManifest, df: pd.DataFrame) -> list[str]:
    if manifest.features:
        missing = [c for c in manifest.features if c not in df.columns]
        if missing:
            raise DataError(f"feature columns missing from table: {', '.join(missing)}")
        return list(manifest.features)
    skip = {manifest.label, manifest.series_id}
    return [c for c in df.columns if c not in skip]


def _numeric(df: pd.DataFrame, columns: list[str]) -> np.ndarray:
    values = df[columns].apply(pd.to_numeric, errors="coerce")
    if values.isna().any().any():
        bad = values.columns[values.isna().any()].tolist()
        raise DataError(f"non-numeric or missing values in column(s): {', '.join(bad)}")
    return values.to_numpy(dtype=np.float64)


def _tail_split(table: np.ndarray, fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    cut = int(round(table.shape[0] * (1.0 - fraction)))
    return table[:cut], table[cut:]


def _padded_samples(df: pd.DataFrame, manifest: DatasetManifest, features: list[str]):
    """series_id 별로 묶고 window 길이까지 zero padding"""
    xs, valids, labels = [], [], []
    for _, group in df.groupby(manifest.series_id, sort=False):
        values = _numeric(group, features)
        if values.shape[0] > manifest.w:
            raise DataError(f"series {group[manifest.series_id].iloc[0]!r} has {values.shape[0]} steps, window is {manifest.w}")
        x = np.zeros((manifest.w, len(features)))
        x[: values.shape[0]] = values
        valid = np.zeros(manifest.w, dtype=bool)
        valid[: values.shape[0]] = True
        xs.append(x)
        valids.append(valid)
        labels.append(group[manifest.label].iloc[0])
    return np.stack(xs), np.stack(valids), labels


def _normalize_padded(stats: NormStats, x: np.ndarray, valid: np.ndarray) -> np.ndarray:
    return np.where(valid[..., None], stats.apply(x), 0.0)


def _stratified_split(labels: np.ndarray, fraction: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Seeded per-class hold-out; both index arrays keep the original sample order."""
    rng = np.random.default_rng(seed)
    held = []
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        held.extend(members[: int(round(members.size * fraction))].tolist())
    held = np.sort(np.asarray(held, dtype=np.int64))
    return np.setdiff1d(np.arange(labels.size), held), held


def _classification_data(manifest: DatasetManifest, stats: Optional[NormStats]) -> TaskData:
    train_df = _read_table(manifest, manifest.train)
    test_df = _read_table(manifest, manifest.test)
    features = _feature_columns(manifest, train_df)
    x_tr, v_tr, l_tr = _padded_samples(train_df, manifest, features)
    x_te, v_te, l_te = _padded_samples(test_df, manifest, features)
    classes = sorted(set(l_tr))
    lookup = {c: i for i, c in enumerate(classes)}
    if unknown := set(l_te) - set(classes):
        raise DataError(f"test labels absent from training: {sorted(unknown)}")
    y_tr = np.array([lookup[c] for c in l_tr])
    y_te = np.array([lookup[c] for c in l_te])

    stats = stats or fit_normalizer(x_tr[v_tr])
    x_tr, x_te = _normalize_padded(stats, x_tr, v_tr), _normalize_padded(stats, x_te, v_te)
    train = WindowBatch(x_tr, y_tr, v_tr)
    if manifest.val:
        val_df = _read_table(manifest, manifest.val)
        x_va, v_va, l_va = _padded_samples(val_df, manifest, features)
        val = WindowBatch(_normalize_padded(stats, x_va, v_va), np.array([lookup[c] for c in l_va]), v_va)
    else:
        keep, held = _stratified_split(y_tr)
        train, val = train.take(keep), train.take(held)
    return TaskData("classification", train, val, WindowBatch(x_te, y_te, v_te), stats, features, classes)


def _series_data(
    manifest: DatasetManifest,
    train_table: np.ndarray,
    val_table: Optional[np.ndarray],
    test_table: np.ndarray,
    test_labels: Optional[np.ndarray],
    features: list[str],
    stats: Optional[NormStats],
    benign_filter: bool,
) -> TaskData:
    if val_table is None:
        train_table, val_table = _tail_split(train_table)
    stats = stats or fit_normalizer(train_table)
    w, stride = manifest.w, manifest.stride
    train = make_windows(stats.apply(train_table), w, stride)
    val = make_windows(stats.apply(val_table), w, stride)
    test = make_windows(stats.apply(test_table), w, stride, test_labels, benign_filter)
    if manifest.mask_target:
        train, val, test = _masked_batch(train), _masked_batch(val), _masked_batch(test)
    return TaskData(manifest.task, train, val, test, stats, features)


def _synthetic_data(manifest: DatasetManifest, stats: Optional[NormStats], benign_filter: bool) -> TaskData:
    src = manifest.synthetic
    features = [f"x{i}" for i in range(src.m)]
    match src.kind:
        case "sinusoid":
            x, y = synthetic.sinusoid_classification(
                src.n_samples, src.m, manifest.w, src.seed, phase_spread=src.phase_spread
            )
            n_tr, n_va = int(0.6 * len(y)), int(0.2 * len(y))
            stats = stats or fit_normalizer(x[:n_tr].reshape(-1, src.m))
            x = stats.apply(x)
            split = lambda a, b: WindowBatch(x[a:b], y[a:b])
            return TaskData("classification", split(0, n_tr), split(n_tr, n_tr + n_va),
                            split(n_tr + n_va, len(y)), stats, features, [0, 1])
        case "ar1":
            series = synthetic.ar1_series(src.length, src.m, src.phi, seed=src.seed)
            n = series.shape[0]
            a, b = int(0.6 * n), int(0.8 * n)
            return _series_data(manifest, series[:a], series[a:b], series[b:], None, features, stats, False)
        case "anomaly_stream":
            series, labels = synthetic.anomaly_stream(src.length, src.m, src.n_segments, src.magnitude, src.seed)
            half = series.shape[0] // 2
            return _series_data(manifest, series[:half], None, series[half:], labels[half:], features, stats, benign_filter)
    raise ConfigError(f"unknown synthetic source {src.kind}")


def load_task_data(
    manifest: DatasetManifest, stats: Optional[NormStats] = None, benign_filter: bool = False
) -> TaskData:
    """
    Read, normalize and window the train / val / test splits of a manifest.

    Without an explicit validation table, series tasks hold out the last 20%
    of the training split in time order; classification holds out a seeded
    20% of each class.
    """
    if manifest.synthetic is not None:
        return _synthetic_data(manifest, stats, benign_filter)
    if manifest.task == "classification":
        return _classification_data(manifest, stats)

    train_df = _read_table(manifest, manifest.train)
    test_df = _read_table(manifest, manifest.test)
    features = _feature_columns(manifest, train_df)
    train_table = _numeric(train_df, features)
    val_table = _numeric(_read_table(manifest, manifest.val), features) if manifest.val else None
    test_table = _numeric(test_df, features)
    labels = None
    if manifest.task == "anomaly":
        if manifest.label not in test_df.columns:
            raise DataError(f"label column {manifest.label!r} missing from the test table")
        labels = test_df[manifest.label].to_numpy() != 0
    return _series_data(manifest, train_table, val_table, test_table, labels, features, stats, benign_filter)


# -----------------------------------------------------------------------------
# training
# -----------------------------------------------------------------------------

class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(1e-3, gt=0.0)
    epochs: int = Field(50, ge=0)
    dense_epochs: Optional[int] = Field(None, ge=0)
    batch_size: int = Field(64, gt=0)
    seed: int = 0
    scheduler: bool = False
    scheduler_gamma: float = Field(0.75, gt=0.0, le=1.0)
    patience: int = Field(1, ge=1)
    replicates: int = Field(3, ge=1)
    progress: bool = True

    def for_mode(self, dense: bool) -> "TrainConfig":
        if dense and self.dense_epochs is not None:
            return self.model_copy(update={"epochs": self.dense_epochs})
        return self


@dataclass
class TrainResult:
    model: TransformerModel
    log: list[dict]
    best_epoch: Optional[int] = None
    best_val_loss: float = float("inf")


def predict_batches(model: AnyModel, batch: WindowBatch, size: int = 256) -> np.ndarray:
    """Inference in chunks through the task entry point; ``model`` may also be a PackedRuntime."""
    entry = forward_classification if model.config.task == "classification" else forward_reconstruction
    outs = [entry(model, part.x, part.valid) for part in batch.batches(size)]
    return np.concatenate(outs, axis=0)


def _loss_on(model: AnyModel, batch: WindowBatch, task: Task) -> float:
    if len(batch) == 0:
        return float("nan")
    return step_loss(task, predict_batches(model, batch), batch)[0]


def _accuracy(model: AnyModel, batch: WindowBatch) -> float:
    return float(np.mean(predict_batches(model, batch).argmax(axis=1) == batch.y))


def _flat(masks: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([m.ravel() for m in masks.values()])


def train(
    model: TransformerModel,
    data: Union[TaskData, DatasetManifest],
    cfg: TrainConfig,
    log_path: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """
    Adam over all trainable slots, one JSON record per epoch, best-validation
    weights restored at the end. Fixed seeds give byte-identical logs.
    """
    if isinstance(data, DatasetManifest):
        data = load_task_data(data)
    task = model.config.task
    if data.task != task:
        raise ConfigError(f"{task} model cannot train on {data.task} data")

    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.slots(), lr=cfg.lr)
    log: list[dict] = []
    best_state, best_val, best_epoch = None, float("inf"), None
    since_improved = 0
    sink = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        sink = open(log_path, "w", encoding="utf-8")

    try:
        for epoch in tqdm(range(cfg.epochs), desc=model.config.name, disable=not cfg.progress, leave=False):
            before = model.mask_snapshot()
            losses = []
            for b, part in enumerate(data.train.batches(cfg.batch_size, rng)):
                out = model.forward(part.x, part.valid, training=True)
                loss, grad = step_loss(task, out, part)
                if not np.isfinite(loss):
                    alphas = {k: s.alpha for k, s in model.biprop_states().items()}
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch} batch {b} (lr={opt.lr:g}, "
                        f"min alpha={min(alphas.values(), default=float('nan')):.3g})"
                    )
                model.backward(grad)
                opt.step()
                losses.append(loss)

            after = model.mask_snapshot()
            val_loss = _loss_on(model, data.val, task)
            record = {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)) if losses else float("nan"),
                "val_loss": val_loss,
                "lr": opt.lr,
                "mask_churn": mask_churn(_flat(before), _flat(after)) if before else 0.0,
                "alpha": {k: s.alpha for k, s in model.biprop_states().items()},
            }
            if task == "classification":
                record["train_acc"] = _accuracy(model, data.train)
                record["val_acc"] = _accuracy(model, data.val) if len(data.val) else float("nan")
            log.append(record)
            if sink is not None:
                sink.write(json.dumps(record, sort_keys=True) + "\n")

            if val_loss < best_val:
                best_val, best_epoch, since_improved = val_loss, epoch, 0
                best_state = model.state_dict()
            else:
                since_improved += 1
                if cfg.scheduler and since_improved >= cfg.patience:
                    opt.lr *= cfg.scheduler_gamma
                    since_improved = 0
                    logger.debug("validation loss flat; lr -> %g", opt.lr)
    finally:
        if sink is not None:
            sink.close()

    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(model, log, best_epoch, best_val)


# -----------------------------------------------------------------------------
# evaluation
# -----------------------------------------------------------------------------

@dataclass
class ClassificationReport:
    accuracy: float
    n: int
    per_class: dict

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "n": self.n, "per_class": self.per_class}


def evaluate_classification(model: AnyModel, split: WindowBatch) -> ClassificationReport:
    pred = predict_batches(model, split).argmax(axis=1)
    per_class = {}
    for c in np.unique(split.y):
        sel = split.y == c
        per_class[int(c)] = {"correct": int(np.sum(pred[sel] == c)), "total": int(sel.sum())}
    return ClassificationReport(float(np.mean(pred == split.y)), len(split), per_class)


def evaluate_forecast(model: AnyModel, split: WindowBatch) -> dict:
    """MSE and MAE on x_t in normalized units."""
    diff = predict_batches(model, split)[:, -1, :] - _target(split)
    return {"mse": float(np.mean(diff ** 2)), "mae": float(np.mean(np.abs(diff))), "n": len(split)}


def reconstruction_scores(model: AnyModel, split: WindowBatch) -> np.ndarray:
    """Per-window x_t reconstruction MSE."""
    diff = predict_batches(model, split)[:, -1, :] - _target(split)
    return np.mean(diff ** 2, axis=1)


def forecast_predictions(
    model: AnyModel, split: WindowBatch, stats: NormStats, feature_names: list[str]
) -> pd.DataFrame:
    """Predicted vs actual x_t per feature, back in original units."""
    pred = stats.invert(predict_batches(model, split)[:, -1, :])
    true = stats.invert(_target(split))
    frame = {"t": split.index if split.index is not None else np.arange(len(split))}
    for j, name in enumerate(feature_names):
        frame[f"{name}_pred"] = pred[:, j]
        frame[f"{name}_true"] = true[:, j]
    return pd.DataFrame(frame)


def evaluate_task(model: AnyModel, data: TaskData, settings: Optional[DetectSettings] = None) -> dict:
    """
    Headline test metrics of a trained model for its task.

    Anomaly models are scored with the dataset's detection protocol: the
    manual threshold at r gives f1 / precision / recall, POT at q gives pot_f1.
    """
    match data.task:
        case "classification":
            return {"accuracy": evaluate_classification(model, data.test).accuracy}
        case "forecasting":
            return evaluate_forecast(model, data.test)
        case "anomaly":
            settings = settings or DetectSettings()
            calibration = reconstruction_scores(model, data.val)
            test = ScoreSeries(reconstruction_scores(model, data.test), data.test.index, data.test.flags)
            manual = detect(calibration, test, "manual", r=settings.r)
            pot = detect(calibration, test, "pot", q=settings.q)
            return {
                "f1": manual.adjusted.f1,
                "precision": manual.adjusted.precision,
                "recall": manual.adjusted.recall,
                "pot_f1": pot.adjusted.f1,
            }
    raise ConfigError(f"unknown task {data.task}")


PRIMARY_METRIC = {"classification": ("accuracy", True), "forecasting": ("mse", False), "anomaly": ("f1", True)}


@dataclass
class ReplicateReport:
    seeds: list[int]
    metrics: list[dict]
    results: list[TrainResult] = field(repr=False, default_factory=list)

    def _over_seeds(self, reduce) -> dict:
        keys = self.metrics[0].keys() if self.metrics else []
        return {k: float(reduce([m[k] for m in self.metrics])) for k in keys}

    @property
    def mean(self) -> dict:
        return self._over_seeds(np.mean)

    @property
    def std(self) -> dict:
        return self._over_seeds(np.std)

    def to_dict(self) -> dict:
        return {"seeds": self.seeds, "metrics": self.metrics, "mean": self.mean, "std": self.std}


def run_replicates(
    config: ModelConfig,
    data: TaskData,
    cfg: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
    factory: Callable[[ModelConfig], TransformerModel] = build_model,
    settings: Optional[DetectSettings] = None,
) -> ReplicateReport:
    """Train seeds cfg.seed, cfg.seed+1, … and average the test metrics."""
    seeds = [cfg.seed + i for i in range(cfg.replicates)]
    metrics, results = [], []
    for seed in seeds:
        # seed마다 새 모델, 같은 데이터
        model = factory(config.with_updates(seed=seed))
        log_path = Path(out_dir) / f"train_log_seed{seed}.jsonl" if out_dir is not None else None
        result = train(model, data, cfg.model_copy(update={"seed": seed}), log_path)
        metrics.append(evaluate_task(result.model, data, settings))
        results.append(result)
        logger.info("seed %d: %s", seed, metrics[-1])
    return ReplicateReport(seeds, metrics, results)


def sweep_model_size(
    config: ModelConfig,
    data: TaskData,
    widths: list[int],
    cfg: TrainConfig,
    settings: Optional[DetectSettings] = None,
) -> pd.DataFrame:
    """One trained replicate per model width d, with its size and FLOPs."""
    from .costmodel import bit_size, model_flops

    if len(widths) < 2:
        raise ConfigError("a size sweep needs at least two widths")
    metric_name, _ = PRIMARY_METRIC[config.task]
    rows = []
    # width마다 처음부터 학습 (replicate 1개)
    for d in sorted(widths):
        cfg_d = config.with_updates(d=d)
        result = train(build_model(cfg_d), data, cfg.model_copy(update={"replicates": 1}))
        census = count_params(cfg_d)
        rows.append({
            "d": d,
            "metric": evaluate_task(result.model, data, settings)[metric_name],
            "params": census.table_total,
            "bits": bit_size(census, "dense" if cfg_d.dense_mode else "sbt"),
            "flops": model_flops(cfg_d).total,
        })
    return pd.DataFrame(rows, columns=["d", "metric", "params", "bits", "flops"])


def find_plateau(table: pd.DataFrame, tolerance: float = 0.01, higher_is_better: bool = True) -> int:
    """Smallest d beyond which no larger width improves the metric by more than ``tolerance``."""
    table = table.sort_values("d").reset_index(drop=True)
    metric = table["metric"].to_numpy(dtype=np.float64)
    sign = 1.0 if higher_is_better else -1.0
    for i in range(len(table)):
        later = metric[i + 1:]
        if later.size == 0 or np.max(sign * (later - metric[i])) <= tolerance:
            return int(table.loc[i, "d"])
    return int(table["d"].iloc[-1])
