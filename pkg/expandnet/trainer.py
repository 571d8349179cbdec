from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, augment, iterate_batches
from .exceptions import DataFormatError, NumericError
from .layers import ParamStore, backward, build_store, count_params, cross_entropy, forward, he_init
from .metrics import InitSnapshot, snapshot_refresh
from .optim import Velocity, init_velocity, schedule_lr, sgd_step
from .schemas import ArchSpec, EpochSummary, TrainConfig
from .tensor import resolve_dtype

logger = logging.getLogger(__name__)


@dataclass
class FitResult:
    store: ParamStore
    snapshot: InitSnapshot
    history: list[EpochSummary] = field(default_factory=list)
    steps: int = 0


def train_step(
    arch: ArchSpec,
    store: ParamStore,
    velocity: Velocity,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    epoch: int,
) -> tuple[float, int]:
    """One SGD step; returns the batch loss and the number of correct predictions"""
    logits, cache = forward(arch, store, x, mode="train")
    loss, grad = cross_entropy(logits, y)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss} at epoch {epoch} (lr {schedule_lr(cfg, epoch)})")
    grads = backward(cache, store, grad)
    sgd_step(store, grads, velocity, cfg, epoch)
    return loss, int((logits.argmax(axis=1) == y).sum())


def train_epoch(
    arch: ArchSpec,
    store: ParamStore,
    velocity: Velocity,
    dataset: Dataset,
    cfg: TrainConfig,
    epoch: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Shuffled pass over ``dataset``; returns (mean loss, accuracy)"""
    total_loss, correct = 0.0, 0
    for x, y in iterate_batches(dataset, cfg.batch_size, rng):
        if cfg.flips or cfg.max_translate:
            x = augment(x, cfg.flips, cfg.max_translate, rng)
        loss, hits = train_step(arch, store, velocity, x, y, cfg, epoch)
        logger.debug("epoch %d batch loss %.6f", epoch, loss)
        total_loss += loss * len(y)
        correct += hits
    return total_loss / len(dataset), correct / len(dataset)


def evaluate(arch: ArchSpec, store: ParamStore, dataset: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Eval-mode (loss, accuracy) over the whole dataset"""
    if len(dataset) == 0:
        raise DataFormatError(f"cannot evaluate on an empty {dataset.split} split")
    total_loss, correct = 0.0, 0
    for x, y in iterate_batches(dataset, batch_size):
        logits, _ = forward(arch, store, x, mode="eval")
        loss, _ = cross_entropy(logits, y)
        total_loss += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    return total_loss / len(dataset), correct / len(dataset)


def summarize(
    phase: str,
    epoch: int,
    step: int,
    arch: ArchSpec,
    cfg: TrainConfig,
    train_loss: float,
    train_accuracy: float,
    eval_result: tuple[float, float] | None = None,
) -> EpochSummary:
    test_loss, test_accuracy = eval_result if eval_result is not None else (None, None)
    return EpochSummary(
        phase=phase,
        epoch=epoch,
        step=step,
        lr=schedule_lr(cfg, max(epoch - 1, 0)),
        widths=arch.widths(),
        params=count_params(arch),
        train_loss=train_loss,
        train_accuracy=train_accuracy,
        test_loss=test_loss,
        test_accuracy=test_accuracy,
    )


def fit(
    arch: ArchSpec,
    cfg: TrainConfig,
    train_set: Dataset,
    rng: np.random.Generator,
    eval_set: Dataset | None = None,
    phase: str = "train",
) -> FitResult:
    """Train from a fresh He init; history opens with an epoch-0 entry at initialization"""
    store = he_init(build_store(arch, resolve_dtype(cfg.dtype)), rng)
    snapshot = snapshot_refresh(store)
    velocity = init_velocity(store)

    init_loss, init_acc = evaluate(arch, store, train_set)
    eval_result = evaluate(arch, store, eval_set) if eval_set is not None else None
    result = FitResult(store=store, snapshot=snapshot)
    result.history.append(summarize(phase, 0, 0, arch, cfg, init_loss, init_acc, eval_result))

    steps_per_epoch = -(-len(train_set) // cfg.batch_size)
    for epoch in range(cfg.epochs):
        loss, acc = train_epoch(arch, store, velocity, train_set, cfg, epoch, rng)
        result.steps += steps_per_epoch
        eval_result = evaluate(arch, store, eval_set) if eval_set is not None else None
        summary = summarize(phase, epoch + 1, result.steps, arch, cfg, loss, acc, eval_result)
        result.history.append(summary)
        logger.info(
            "[%s] epoch %d/%d loss %.4f acc %.4f%s",
            phase, epoch + 1, cfg.epochs, loss, acc,
            "" if eval_result is None else f" test acc {eval_result[1]:.4f}",
        )
    return result
