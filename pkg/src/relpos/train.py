"""AdamW training with cosine learning-rate decay and top-1 evaluation.

A run is fully determined by (model config, train config, dataset): one
seed drives parameter init and epoch shuffling, batches are visited in
shuffle order, and gradients are reduced in a fixed order, so repeated
runs are bit-identical.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tensor, backward
from .data import Dataset
from .errors import EmptyDatasetError, LabelOutOfRangeError
from .model import ModelConfig, ModelParams, forward, init_params, loss, named_parameters


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 128
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_epochs: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")


@dataclass
class MetricsRow:
    epoch: int
    lr: float
    train_loss: float
    train_top1: float
    eval_top1: float
    wall_seconds: float


@dataclass
class TrainResult:
    metrics: list[MetricsRow]
    params: ModelParams


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0) -> float:
    """Linear warmup to base_lr, then half-cosine decay to 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    progress = (step - warmup_steps) / span if span > 0 else 1.0
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamWState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: list[Tensor]):
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]
        self.t = 0


def adamw_step(
    params: list[Tensor],
    grads: list[np.ndarray],
    state: AdamWState,
    lr: float,
    cfg: TrainConfig,
) -> None:
    """One decoupled-weight-decay Adam update, in place."""
    state.t += 1
    correct1 = 1.0 - cfg.beta1**state.t
    correct2 = 1.0 - cfg.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if cfg.weight_decay:
            p.data -= lr * cfg.weight_decay * p.data
        m[:] = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v[:] = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        p.data -= lr * (m / correct1) / (np.sqrt(v / correct2) + cfg.eps)


def top1_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax matches the label; ties go to the lowest class."""
    predicted = np.argmax(np.asarray(logits), axis=-1)
    return float((predicted == np.asarray(labels)).mean())


def evaluate_top1(
    params: ModelParams, cfg: ModelConfig, dataset: Dataset, batch_size: int = 256
) -> float:
    """Top-1 accuracy of the current parameters over a dataset."""
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    hits = 0
    for lo in range(0, len(dataset), batch_size):
        sel = slice(lo, lo + batch_size)
        logits = forward(params, cfg, dataset.images[sel]).data
        hits += int((np.argmax(logits, axis=-1) == dataset.labels[sel]).sum())
    return hits / len(dataset)


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_set: Dataset,
    eval_set: Dataset | None = None,
) -> TrainResult:
    """Run the full schedule; returns per-epoch metrics and the final parameters.

    eval_top1 is measured on ``eval_set`` when given, else on the training
    set. The recorded lr is the one used by the epoch's last step;
    wall_seconds is real elapsed time and is the only nondeterministic
    field.
    """
    count = len(train_set)
    if count == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    if train_set.labels.min() < 0 or train_set.labels.max() >= model_cfg.classes:
        raise LabelOutOfRangeError(
            f"dataset labels must lie in [0, {model_cfg.classes})"
        )

    params = init_params(model_cfg, train_cfg.seed)
    tensors = [t for _, t in named_parameters(params)]
    state = AdamWState(tensors)
    rng = np.random.default_rng(train_cfg.seed)

    steps_per_epoch = math.ceil(count / train_cfg.batch_size)
    total_steps = train_cfg.epochs * steps_per_epoch
    warmup_steps = train_cfg.warmup_epochs * steps_per_epoch

    rows: list[MetricsRow] = []
    step = 0
    for epoch in range(train_cfg.epochs):
        started = time.perf_counter()
        order = rng.permutation(count)
        loss_sum = 0.0
        hits = 0
        lr = train_cfg.base_lr
        for lo in range(0, count, train_cfg.batch_size):
            batch = order[lo : lo + train_cfg.batch_size]
            lr = cosine_lr(step, total_steps, train_cfg.base_lr, warmup_steps)
            logits = forward(params, model_cfg, train_set.images[batch])
            batch_loss = loss(logits, train_set.labels[batch])
            for t in tensors:
                t.zero_grad()
            backward(batch_loss)
            adamw_step(tensors, [t.grad for t in tensors], state, lr, train_cfg)
            loss_sum += float(batch_loss.data) * batch.size
            hits += int((np.argmax(logits.data, axis=-1) == train_set.labels[batch]).sum())
            step += 1
        rows.append(
            MetricsRow(
                epoch=epoch,
                lr=lr,
                train_loss=loss_sum / count,
                train_top1=hits / count,
                eval_top1=evaluate_top1(params, model_cfg, eval_set or train_set),
                wall_seconds=time.perf_counter() - started,
            )
        )
    return TrainResult(metrics=rows, params=params)


def write_metrics_csv(rows: list[MetricsRow], path, wall_clock: bool = False) -> None:
    """Stream metric rows to CSV.

    The wall_seconds column is written as 0.000 unless ``wall_clock`` is
    set, so that a run's CSV is byte-reproducible by default.
    """
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("epoch,lr,train_loss,train_top1,eval_top1,wall_seconds\n")
        for r in rows:
            wall = r.wall_seconds if wall_clock else 0.0
            fh.write(
                f"{r.epoch},{r.lr:.17g},{r.train_loss:.17g},"
                f"{r.train_top1:.17g},{r.eval_top1:.17g},{wall:.3f}\n"
            )


@dataclass
class SeedSummary:
    mean: float
    std: float
    per_seed: list[float]


def average_over_seeds(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset_factory,
    seeds: list[int],
) -> SeedSummary:
    """Repeat a run across seeds and summarize the final eval accuracy.

    ``dataset_factory(seed)`` must return (train_set, eval_set); the same
    seed also drives init and shuffling, so each repetition is an
    independent end-to-end experiment.
    """
    finals: list[float] = []
    for seed in seeds:
        train_set, eval_set = dataset_factory(seed)
        result = train(model_cfg, replace(train_cfg, seed=seed), train_set, eval_set)
        finals.append(result.metrics[-1].eval_top1)
    values = np.asarray(finals)
    return SeedSummary(mean=float(values.mean()), std=float(values.std()), per_seed=finals)
