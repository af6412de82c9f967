"""Training loop, augmentation and evaluation metrics."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import PointDataset
from .geometry import PointCloud
from .layers import BatchNorm
from .model import DTNet
from .optim import AdamState, adam_step, lr_at_epoch

logger = logging.getLogger(__name__)

LOG_SCHEMA = 1

__all__ = [
    "TrainConfig",
    "Metrics",
    "TrainResult",
    "TrainingError",
    "augment",
    "predict",
    "compute_metrics",
    "evaluate",
    "train",
    "train_step",
    "recalibrate_batchnorm",
    "LOG_SCHEMA",
]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    lr_decay: float = 0.7
    lr_step: int = 20
    batch_size: int = 16
    epochs: int = 150
    dropout_max_ratio: float = 0.875
    scale_range: tuple[float, float] = (0.8, 1.25)
    shift_range: tuple[float, float] = (-0.1, 0.1)
    seed: int = 0
    # re-estimate batchnorm statistics on the clean training set after each epoch
    bn_recalibrate: bool = True

    def __post_init__(self):
        self.scale_range = tuple(float(x) for x in self.scale_range)
        self.shift_range = tuple(float(x) for x in self.shift_range)
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"scale_range must lie in (0, inf), got {self.scale_range}")
        if self.shift_range[0] != -self.shift_range[1] or self.shift_range[1] < 0:
            raise ValueError(f"shift_range must be symmetric, got {self.shift_range}")
        if not 0 <= self.dropout_max_ratio < 1:
            raise ValueError("dropout_max_ratio must be in [0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batchnorm needs two rows)")
        if self.lr_step < 1 or self.epochs < 0 or self.lr < 0:
            raise ValueError("lr_step >= 1, epochs >= 0 and lr >= 0 are required")

    @classmethod
    def for_segmentation(cls, **overrides) -> TrainConfig:
        kw = dict(lr=0.0005, lr_decay=0.5, lr_step=20, epochs=80)
        kw.update(overrides)
        return cls(**kw)


@dataclass
class Metrics:
    overall_accuracy: float
    class_average_accuracy: float
    per_category_iou: dict[str, float] | None = None
    mean_iou: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def augment(cloud: PointCloud, config: TrainConfig, rng: np.random.Generator) -> PointCloud:
    """Point dropout, global scaling and per-axis shift.

    Dropped points are overwritten with the first point (and its label), so
    the point count never changes. Random draws happen in a fixed order
    regardless of the ranges, which keeps runs reproducible.
    """
    coords = cloud.coords.copy()
    labels = None if cloud.labels is None else cloud.labels.copy()
    n = len(coords)
    ratio = rng.uniform(0.0, config.dropout_max_ratio)
    drop = rng.permutation(n)[: int(math.floor(ratio * n))]
    if len(drop):
        coords[drop] = coords[0]
        if labels is not None:
            labels[drop] = labels[0]
    s = rng.uniform(*config.scale_range)
    shift = rng.uniform(config.shift_range[0], config.shift_range[1], 3)
    return PointCloud(coords * s + shift, cloud.features, labels)


def _batches(n: int, batch_size: int, order: np.ndarray) -> list[np.ndarray]:
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # a lone trailing instance cannot feed train-mode batchnorm
    if len(out) > 1 and len(out[-1]) == 1:
        last = out.pop()
        out[-1] = np.concatenate([out[-1], last])
    return out


def predict(model: DTNet, coords: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Arg-max labels in eval mode: ``[I]`` or ``[I, N]``."""
    was_training = model.training
    model.eval()
    preds = []
    try:
        with T.no_grad():
            for i in range(0, len(coords), batch_size):
                preds.append(model(coords[i : i + batch_size]).data.argmax(axis=-1))
    finally:
        model.train(was_training)
    return np.concatenate(preds)


def compute_metrics(pred, labels, task: str, n_classes: int, categories=None, instance_category=None) -> Metrics:
    """Accuracy and, for segmentation, per-instance part IoU.

    Class-average accuracy is the mean recall over classes that occur in
    ``labels``. For IoU a part missing from both prediction and ground truth
    of an instance counts as 1.
    """
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot evaluate an empty dataset")
    oa = float((pred == labels).mean())
    recalls = [float((pred[labels == c] == c).mean()) for c in range(n_classes) if np.any(labels == c)]
    caa = float(np.mean(recalls))
    if task == "classification":
        return Metrics(oa, caa)
    categories = categories or {"object": list(range(n_classes))}
    names = list(categories)
    if instance_category is None:
        instance_category = np.zeros(len(labels), dtype=np.int64)
    per_instance = []
    by_cat: dict[str, list[float]] = {name: [] for name in names}
    for p, g, c in zip(pred, labels, instance_category):
        name = names[c]
        ious = []
        for part in categories[name]:
            inter = np.sum((p == part) & (g == part))
            union = np.sum((p == part) | (g == part))
            ious.append(1.0 if union == 0 else inter / union)
        score = float(np.mean(ious))
        per_instance.append(score)
        by_cat[name].append(score)
    per_cat = {k: float(np.mean(v)) for k, v in by_cat.items() if v}
    return Metrics(oa, caa, per_cat, float(np.mean(per_instance)))


def evaluate(model: DTNet, dataset: PointDataset, task: str | None = None, batch_size: int = 16) -> Metrics:
    task = task or dataset.task
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    pred = predict(model, dataset.coords, batch_size)
    return compute_metrics(pred, dataset.labels, task, dataset.n_classes, dataset.categories, dataset.instance_category)


def train_step(model: DTNet, coords, labels, state: AdamState, lr: float, config: TrainConfig, rng=None):
    """Forward, backward and one Adam update on a single batch; returns (loss, logits)."""
    model.train()
    logits = model(coords, rng)
    loss = T.cross_entropy(logits, labels)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at optimizer step {state.step + 1}")
    model.zero_grad()
    T.backward(loss)
    adam_step(model.named_parameters(), state, lr, config.weight_decay, config.beta1, config.beta2, config.eps)
    return value, logits.data


def recalibrate_batchnorm(model: DTNet, coords: np.ndarray, batch_size: int = 16) -> None:
    """Replace every running mean/variance with its average over ``coords``.

    Momentum averages trail the weights by many steps while they are still
    moving fast, which can leave eval-mode outputs far from train-mode ones.
    Here the weights are frozen and each batch gets equal weight. Head
    dropout is off for the pass because eval never applies it.
    """
    bns = [m for m in model.modules() if isinstance(m, BatchNorm)]
    if not bns:
        return
    saved = [(b.momentum, b.running_mean.copy(), b.running_var.copy()) for b in bns]
    dropout, model.head.dropout = model.head.dropout, 0.0
    was_training = model.training
    model.train()
    try:
        with T.no_grad():
            for k, idx in enumerate(_batches(len(coords), batch_size, np.arange(len(coords)))):
                for b in bns:
                    b.momentum = 1.0 / (k + 1)
                model(coords[idx])
    except Exception:
        for b, (_, mean, var) in zip(bns, saved):
            b.running_mean[:], b.running_var[:] = mean, var
        raise
    finally:
        for b, (momentum, _, _) in zip(bns, saved):
            b.momentum = momentum
        model.head.dropout = dropout
        model.train(was_training)


@dataclass
class TrainResult:
    history: list[dict]
    state: AdamState
    epoch: int  # number of completed epochs
    stopped_early: bool = False
    extra: dict = field(default_factory=dict)


def _headline(metrics: Metrics, task: str) -> dict:
    if task == "classification":
        return {"oa": metrics.overall_accuracy, "class_acc": metrics.class_average_accuracy}
    return {"oa": metrics.overall_accuracy, "miou": metrics.mean_iou}


def train(
    model: DTNet,
    dataset: PointDataset,
    config: TrainConfig,
    *,
    state: AdamState | None = None,
    start_epoch: int = 0,
    log_path=None,
    eval_train: bool = False,
    eval_data: PointDataset | None = None,
    on_epoch_end: Callable[[dict], bool] | None = None,
) -> TrainResult:
    """Run epochs ``start_epoch .. config.epochs - 1``.

    Every epoch draws its randomness from ``default_rng([seed, epoch])``, so a
    run resumed from a checkpoint at epoch ``e`` continues exactly like an
    uninterrupted one. One JSON record per epoch is appended to ``log_path``.
    ``on_epoch_end`` may return True to stop early.
    """
    state = state if state is not None else AdamState()
    history: list[dict] = []
    n = len(dataset)
    if n < 2:
        raise TrainingError("need at least two training instances")
    log = open(log_path, "a", encoding="utf-8") if log_path else None
    epoch = start_epoch
    stopped = False
    try:
        for epoch in range(start_epoch, config.epochs):
            lr = lr_at_epoch(epoch, config)
            rng = np.random.default_rng([config.seed, epoch])
            order = rng.permutation(n)
            total_loss, correct, seen = 0.0, 0, 0
            for idx in _batches(n, config.batch_size, order):
                clouds = [
                    augment(
                        PointCloud(dataset.coords[i], labels=dataset.labels[i] if dataset.task != "classification" else None),
                        config,
                        rng,
                    )
                    for i in idx
                ]
                coords = np.stack([c.coords for c in clouds])
                labels = dataset.labels[idx] if dataset.task == "classification" else np.stack([c.labels for c in clouds])
                loss, logits = train_step(model, coords, labels, state, lr, config, rng)
                total_loss += loss * len(idx)
                correct += int((logits.argmax(-1) == labels).sum())
                seen += labels.size
            if config.bn_recalibrate:
                recalibrate_batchnorm(model, dataset.coords, config.batch_size)
            record = {
                "schema": LOG_SCHEMA,
                "epoch": epoch,
                "lr": lr,
                "loss": total_loss / n,
                "train_running_acc": correct / seen,
            }
            if eval_train:
                record.update({f"train_{k}": v for k, v in _headline(evaluate(model, dataset), dataset.task).items()})
            if eval_data is not None:
                record.update({f"test_{k}": v for k, v in _headline(evaluate(model, eval_data), eval_data.task).items()})
            history.append(record)
            logger.info("epoch %d %s", epoch, record)
            if log is not None:
                log.write(json.dumps(record, sort_keys=True) + "\n")
                log.flush()
            if on_epoch_end is not None and on_epoch_end(record):
                stopped = True
                break
    finally:
        if log is not None:
            log.close()
    done = (epoch + 1) if history else start_epoch
    return TrainResult(history, state, done, stopped)
