from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable

import numpy as np

from .exceptions import DataFormatError, MetricUnavailableError, ShapeError
from .layers import ParamStore, forward, param_key
from .schemas import ArchSpec, ImportanceReport
from .tensor import Tensor

if TYPE_CHECKING:
    from .data import Dataset

logger = logging.getLogger(__name__)

# Relative size below which a mean-centered slice counts as constant.
DEGENERATE_TOL = 1e-10


@dataclass
class InitSnapshot:
    weights: dict[str, Tensor]

    def weight(self, index: int) -> Tensor:
        key = param_key(index, "weight")
        if key not in self.weights:
            raise MetricUnavailableError(f"init snapshot holds no weights for layer {index}")
        return self.weights[key]


@dataclass
class ImportanceVector:
    layer: int
    metric: str
    scores: np.ndarray
    degenerate: np.ndarray = field(default=None)
    step: int = 0

    def __post_init__(self):
        if self.degenerate is None:
            self.degenerate = np.zeros(self.scores.shape, dtype=bool)

    def to_report(self) -> ImportanceReport:
        return ImportanceReport(layer=self.layer, metric=self.metric, scores=self.scores.tolist(), step=self.step)


def snapshot_refresh(store: ParamStore) -> InitSnapshot:
    return InitSnapshot(weights={k: v.copy() for k, v in store.params.items() if k.endswith(".weight")})


def _rows(w: Tensor) -> Tensor:
    return w.reshape(w.shape[0], -1)


def _centered(w: Tensor):
    rows = _rows(w)
    centered = rows - rows.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1)
    flat = (rows.shape[1] < 2) | (norms <= DEGENERATE_TOL * np.maximum(np.linalg.norm(rows, axis=1), 1e-300))
    return centered, norms, flat


def degenerate_mask(w_t0: Tensor, w_t: Tensor) -> np.ndarray:
    """Features whose slice is constant at t0 or t"""
    return _centered(w_t0)[2] | _centered(w_t)[2]


def self_resemblance(w_t0: Tensor, w_t: Tensor) -> np.ndarray:
    """1 - Pearson correlation per output feature, 0 for unchanged or constant slices"""
    if w_t0.shape != w_t.shape:
        raise ShapeError(f"self_resemblance needs equal shapes, got {list(w_t0.shape)} and {list(w_t.shape)}")
    a, norm_a, flat_a = _centered(w_t0)
    b, norm_b, flat_b = _centered(w_t)
    unchanged = flat_a | flat_b | np.all(_rows(w_t0) == _rows(w_t), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = (a * b).sum(axis=1) / (norm_a * norm_b)
    return np.where(unchanged, 0.0, np.clip(1.0 - corr, 0.0, 2.0))


def l1_importance(w_t: Tensor) -> np.ndarray:
    return np.abs(_rows(w_t)).sum(axis=1)


def activation_index(arch: ArchSpec, index: int) -> int:
    """Layer whose output holds the post-activation values of ``index``"""
    for j in range(index + 1, len(arch.layers)):
        kind = arch.layers[j].kind
        if arch.layers[j].learnable or kind in ("maxpool", "flatten"):
            break
        if kind == "relu":
            return j
    return index


def mean_activation_importance(
    arch: ArchSpec, store: ParamStore, dataset: Dataset, layers: Iterable[int] | None = None, batch_size: int = 256
) -> dict[int, np.ndarray]:
    """Per-feature mean post-activation over one eval-mode pass"""
    if len(dataset) == 0:
        raise DataFormatError("mean activation importance needs a non-empty dataset")
    layers = list(arch.expandable_indices if layers is None else layers)
    sources = {index: activation_index(arch, index) for index in layers}
    sums: dict[int, np.ndarray] = {}
    count = 0
    for start in range(0, len(dataset), batch_size):
        batch = dataset.images[start:start + batch_size]
        _, cache = forward(arch, store, batch, mode="eval")
        for index, source in sources.items():
            act = cache.outputs[source]
            axes = (0, 2, 3) if act.ndim == 4 else (0,)
            positions = act.size // (act.shape[0] * act.shape[1])
            total = act.sum(axis=axes) / positions
            sums[index] = total if index not in sums else sums[index] + total
        count += batch.shape[0]
    return {index: total / count for index, total in sums.items()}


def layer_importance(
    arch: ArchSpec,
    store: ParamStore,
    metric: str,
    snapshot: InitSnapshot | None = None,
    dataset: Dataset | None = None,
    layers: Iterable[int] | None = None,
    step: int = 0,
) -> dict[int, ImportanceVector]:
    layers = list(arch.expandable_indices if layers is None else layers)
    if metric == "self_resemblance":
        if snapshot is None:
            raise MetricUnavailableError("self_resemblance needs an init snapshot")
        vectors = {}
        for index in layers:
            w_t0, w_t = snapshot.weight(index), store.params[param_key(index, "weight")]
            degenerate = degenerate_mask(w_t0, w_t)
            if degenerate.any():
                logger.warning("layer %d: %d degenerate feature slices", index, int(degenerate.sum()))
            vectors[index] = ImportanceVector(index, metric, self_resemblance(w_t0, w_t), degenerate, step)
        return vectors
    if metric == "l1_norm":
        return {
            index: ImportanceVector(index, metric, l1_importance(store.params[param_key(index, "weight")]), step=step)
            for index in layers
        }
    if metric == "mean_activation":
        if dataset is None:
            raise MetricUnavailableError("mean_activation needs a dataset")
        means = mean_activation_importance(arch, store, dataset, layers)
        return {index: ImportanceVector(index, metric, means[index], step=step) for index in layers}
    raise MetricUnavailableError(f"unknown importance metric {metric!r}")
