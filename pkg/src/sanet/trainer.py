"""Mini-batch SGD training with validation-based model selection and evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .baselines import predict_historical_average, predict_moving_average, predict_seasonal_ar
from .cells import Model, ModelConfig, build_model
from .checkpoint import Checkpoint
from .data import (
    DEFAULT_SPLIT,
    Dataset,
    NormalizationStats,
    Windows,
    build_calendar,
    fit_normalization,
    make_windows,
    split,
)
from .metrics import GroupMask, MetricsReport, average_reports, build_group_mask, mae, mpe_gap, point_metrics
from .objective import LossConfig, accuracy_loss, normalize_attribute, total_loss
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

DEFAULT_GROUPS = {"pct_black": 0.5, "pct_low_income": 0.25}


class NumericError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    step_size: float = 0.001
    max_epochs: int = 300
    look_back: int = 6
    layers: int = 1
    layer_sweep: tuple[int, ...] = ()
    runs: int = 1
    seed: int = 0
    gamma: float = 0.0
    lam: float = 10.0
    attribute: str = "pct_black"
    threshold: float = 0.5
    channels: int = 64
    kernel_size: int = 3
    temporal_hidden: int = 32
    clip_norm: float | None = None
    split: tuple[float, float, float] = DEFAULT_SPLIT

    def __post_init__(self):
        if min(self.batch_size, self.max_epochs, self.look_back, self.runs, self.channels) < 1:
            raise ValueError("batch size, epochs, look-back, runs and channels must be positive")
        if self.step_size <= 0:
            raise ValueError("step size must be positive")
        if self.gamma < 0 or self.lam < 0:
            raise ValueError("gamma and lambda must be non-negative")
        if any(layer not in (1, 2, 3) for layer in (self.layers, *self.layer_sweep)):
            raise ValueError("layer counts must be 1, 2 or 3")

    @property
    def loss(self) -> LossConfig:
        return LossConfig(lam=self.lam, gamma=self.gamma)

    def model_config(self, kind: str, grid: tuple[int, int], layers: int | None = None) -> ModelConfig:
        return ModelConfig(kind=kind, grid=grid, channels=self.channels, layers=layers or self.layers,
                           kernel_size=self.kernel_size, temporal_hidden=self.temporal_hidden,
                           look_back=self.look_back)

    def snapshot(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            out[k] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
        return out


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_mae: float
    val_mpe_gap: float
    val_accuracy_loss: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[EpochLog]
    sweep: dict[int, float] = field(default_factory=dict)

    @property
    def best_val_loss(self) -> float:
        return self.checkpoint.best_val_loss


LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "val_mae", "val_mpe_gap", "val_accuracy_loss")


def write_log(path, rows: Sequence[EpochLog]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in LOG_COLUMNS[1:]])


def read_log(path) -> list[EpochLog]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [EpochLog(int(r["epoch"]), *(float(r[c]) for c in LOG_COLUMNS[1:])) for r in reader]


# optimisation --------------------------------------------------------------

def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], step_size: float) -> dict[str, Tensor]:
    """Plain SGD: ``theta - step_size * g`` for every parameter that has a gradient."""
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter block {name}")
        out[name] = Tensor(p.data - step_size * g, requires_grad=p.requires_grad, name=name)
    return out


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm <= max_norm or norm == 0:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


# data preparation ----------------------------------------------------------

@dataclass
class Prepared:
    stats: NormalizationStats
    features: np.ndarray
    z_tilde: np.ndarray
    mask: GroupMask | None
    train: Windows
    val: Windows
    test: Windows


def prepare(dataset: Dataset, config: TrainConfig) -> Prepared:
    train_ds, val_ds, test_ds = split(dataset, config.split)
    stats = fit_normalization(train_ds.demand)
    if config.attribute not in dataset.sociodemo.names:
        raise ValueError(f"sensitive attribute {config.attribute!r} not among {dataset.sociodemo.names}")
    z = dataset.sociodemo[config.attribute]
    try:
        mask = build_group_mask(z, config.threshold, config.attribute)
    except ValueError:
        mask = None
    try:
        z_tilde = normalize_attribute(z).z_tilde
    except ValueError:
        # the fairness term needs a varying attribute; without it only gamma = 0 is meaningful
        if config.gamma > 0:
            raise
        z_tilde = np.zeros(np.shape(z))
    return Prepared(
        stats=stats,
        features=dataset.sociodemo.standardized().values,
        z_tilde=z_tilde,
        mask=mask,
        train=make_windows(train_ds, config.look_back, stats),
        val=make_windows(val_ds, config.look_back, stats),
        test=make_windows(test_ds, config.look_back, stats),
    )


def _batches(n: int, size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, size):
        yield idx[start:start + size]


def predict_raw(model: Model, windows: Windows, stats: NormalizationStats, batch_size: int = 64) -> np.ndarray:
    """Denormalised, unclamped predictions for every window, shape (S, M, N)."""
    out = []
    for idx in _batches(len(windows), batch_size):
        y = model.forward(windows.demand[idx], windows.calendar[idx], windows.precip[idx])
        out.append(stats.denormalize(y.data))
    return np.concatenate(out)


def _validate(model: Model, windows: Windows, prep: Prepared, config: TrainConfig, batch_size: int):
    losses, acc_losses, preds = [], [], []
    for idx in _batches(len(windows), batch_size):
        y = model.forward(windows.demand[idx], windows.calendar[idx], windows.precip[idx])
        yhat = Tensor(prep.stats.denormalize(y.data))
        target = windows.target[idx]
        losses.append(total_loss(target, yhat, prep.z_tilde, config.loss).item())
        acc_losses.append(accuracy_loss(target, yhat, config.loss).item())
        preds.append(np.maximum(yhat.data, 0.0))
    pred = np.concatenate(preds)
    try:
        gap = mpe_gap(windows.target, pred, prep.mask) if prep.mask is not None else math.nan
    except ValueError:
        gap = math.nan
    return float(np.mean(losses)), float(np.mean(acc_losses)), mae(windows.target, pred), gap


def _fit(kind: str, prep: Prepared, config: TrainConfig, layers: int, seed: int,
         feature_weights: np.ndarray | None = None) -> TrainResult:
    grid = prep.train.target.shape[1:]
    model = build_model(kind, config.model_config(kind, grid, layers), prep.features, seed=seed,
                        feature_weights=feature_weights)
    rng = np.random.default_rng([seed, 1])
    stats = prep.stats
    best: tuple[float, int, dict[str, Tensor]] | None = None
    history: list[EpochLog] = []
    n = len(prep.train)
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        batch_losses = []
        for idx in _batches(n, config.batch_size, order):
            trainable = model.trainable()
            try:
                y = model.forward(prep.train.demand[idx], prep.train.calendar[idx], prep.train.precip[idx])
                yhat = y * stats.std + stats.mean
                loss = total_loss(prep.train.target[idx], yhat, prep.z_tilde, config.loss)
            except NonFiniteError as exc:
                raise NumericError(f"non-finite value during forward pass at epoch {epoch}: {exc}") from exc
            T.backward(loss)
            grads = {k: p.grad for k, p in trainable.items()}
            if config.clip_norm:
                grads = clip_gradients(grads, config.clip_norm)
            updated = sgd_step(trainable, grads, config.step_size)
            model = model.with_params({**model.params, **updated})
            batch_losses.append(loss.item())
        try:
            val_loss, val_acc, val_mae, val_gap = _validate(model, prep.val, prep, config, config.batch_size)
        except NonFiniteError as exc:
            raise NumericError(f"non-finite value during validation at epoch {epoch}: {exc}") from exc
        row = EpochLog(epoch, float(np.mean(batch_losses)), val_loss, val_mae, val_gap, val_acc)
        history.append(row)
        log.info("%s L=%d epoch %d train %.4f val %.4f mae %.4f gap %.4f", kind, layers, epoch,
                 row.train_loss, val_loss, val_mae, val_gap)
        if best is None or val_loss < best[0]:
            best = (val_loss, epoch, dict(model.params))
    best_loss, best_epoch, best_params = best
    chosen = model.with_params(best_params)
    ckpt = Checkpoint.from_model(chosen, stats, best_loss, best_epoch, extra=config.snapshot())
    return TrainResult(ckpt, history)


def train(kind: str, dataset: Dataset, config: TrainConfig, run: int = 0,
          feature_weights: np.ndarray | None = None) -> TrainResult:
    """Train one run; with a layer sweep, keep the layer count with the lowest validation loss."""
    prep = prepare(dataset, config)
    seed = config.seed + run
    sweep = config.layer_sweep or (config.layers,)
    results = {}
    for layers in sweep:
        results[layers] = _fit(kind, prep, config, layers, seed, feature_weights)
    winner = min(sweep, key=lambda k: results[k].best_val_loss)
    out = results[winner]
    out.sweep = {k: r.best_val_loss for k, r in results.items()}
    return out


def train_runs(kind: str, dataset: Dataset, config: TrainConfig) -> list[TrainResult]:
    return [train(kind, dataset, config, run=r) for r in range(config.runs)]


# evaluation ----------------------------------------------------------------

def group_masks(dataset: Dataset, groups: Mapping[str, float]) -> list[GroupMask]:
    masks = []
    for name, threshold in groups.items():
        if name in dataset.sociodemo.names:
            masks.append(build_group_mask(dataset.sociodemo[name], threshold, name))
    return masks


def default_groups(config: TrainConfig) -> dict[str, float]:
    groups = dict(DEFAULT_GROUPS)
    groups[config.attribute] = config.threshold
    return groups


def evaluate(checkpoint: Checkpoint, dataset: Dataset, part: str = "test",
             groups: Mapping[str, float] | None = None, fractions: Sequence[float] | None = None,
             meta: Mapping[str, str] | None = None) -> MetricsReport:
    """Metrics for one split: forward, denormalise, clamp negatives, score."""
    if checkpoint.stats is None or checkpoint.stats.std <= 0:
        raise ValueError("checkpoint lacks normalisation statistics")
    cfg = checkpoint.model_config
    if fractions is None:
        text = checkpoint.extra.get("split")
        fractions = tuple(float(x) for x in text.split(",")) if text else DEFAULT_SPLIT
    parts = dict(zip(("train", "val", "test"), split(dataset, fractions)))
    if part not in parts:
        raise ValueError(f"unknown split {part!r}")
    windows = make_windows(parts[part], cfg.look_back, checkpoint.stats)
    model = checkpoint.model(dataset.sociodemo.standardized().values)
    pred = np.maximum(predict_raw(model, windows, checkpoint.stats), 0.0)
    if groups is None:
        groups = dict(DEFAULT_GROUPS)
        attr = checkpoint.extra.get("attribute")
        if attr:
            groups[attr] = float(checkpoint.extra.get("threshold", 0.5))
    info = {"model": cfg.kind, "layers": str(cfg.layers), "split": part,
            "gamma": checkpoint.extra.get("gamma", ""), "attribute": checkpoint.extra.get("attribute", "")}
    info.update(meta or {})
    return point_metrics(windows.target, pred, group_masks(dataset, groups), windows.timestamps, meta=info)


def evaluate_runs(checkpoints: Sequence[Checkpoint], dataset: Dataset, part: str = "test") -> MetricsReport:
    return average_reports(evaluate(c, dataset, part) for c in checkpoints)


def predict_next(checkpoint: Checkpoint, dataset: Dataset,
                 service_hours: Sequence[int] = tuple(range(6, 22))) -> tuple[datetime, np.ndarray]:
    """Next service hour after the end of the series, from its last ``d`` observations."""
    cfg = checkpoint.model_config
    d = cfg.look_back
    ts = dataset.demand.timestamps
    if len(ts) < d:
        raise ValueError(f"series has {len(ts)} hours, need at least {d}")
    target = ts[-1] + timedelta(hours=1)
    while target.hour not in service_hours:
        target += timedelta(hours=1)
    stamps = list(ts[-d:]) + [target]
    cal = build_calendar(stamps, dataset.holidays).vectors()
    demand = checkpoint.stats.zscore(dataset.demand.grids[-d:])
    model = checkpoint.model(dataset.sociodemo.standardized().values)
    y = model.forward(demand[None], cal[None], dataset.precip[-d:][None])
    return target, np.maximum(checkpoint.stats.denormalize(y.data[0]), 0.0)


# classical baselines -------------------------------------------------------

BASELINES = ("HA", "MA", "ARIMA")


def baseline_forecast(name: str, dataset: Dataset, fractions: Sequence[float] = DEFAULT_SPLIT,
                      look_back: int = 6, part: str = "test", ma_mode: str = "daily") -> tuple[Windows, np.ndarray]:
    """Baseline predictions for the same target hours the networks are scored on."""
    parts = dict(zip(("train", "val", "test"), split(dataset, fractions)))
    if part not in parts:
        raise ValueError(f"unknown split {part!r}")
    train_series = parts["train"].demand
    windows = make_windows(parts[part], look_back, fit_normalization(train_series))
    targets = list(windows.timestamps)
    if name == "HA":
        pred = predict_historical_average(train_series, targets)
    elif name == "MA":
        pred = predict_moving_average(dataset.demand, targets, ma_mode)
    elif name == "ARIMA":
        pred = predict_seasonal_ar(train_series, dataset.demand, targets)
    else:
        raise ValueError(f"unknown baseline {name!r}; choose from {', '.join(BASELINES)}")
    return windows, pred


def evaluate_baseline(name: str, dataset: Dataset, fractions: Sequence[float] = DEFAULT_SPLIT,
                      look_back: int = 6, part: str = "test", ma_mode: str = "daily",
                      groups: Mapping[str, float] | None = None) -> MetricsReport:
    windows, pred = baseline_forecast(name, dataset, fractions, look_back, part, ma_mode)
    info = {"model": name, "split": part, "gamma": "", "attribute": ""}
    return point_metrics(windows.target, pred, group_masks(dataset, groups or DEFAULT_GROUPS),
                         windows.timestamps, meta=info)
