from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import Dataset, iterate_batches
from .exceptions import PruneError
from .layers import ParamStore, forward, input_shapes, param_key, param_shapes, rebuild, with_widths
from .metrics import InitSnapshot, layer_importance
from .schemas import ArchSpec, PruneConfig, PruneCurve, PrunePoint
from .trainer import evaluate

logger = logging.getLogger(__name__)

BN_KEYS = ("scale", "shift")
BN_BUFFERS = ("running_mean", "running_var")


@dataclass(frozen=True)
class RankedFeature:
    layer: int
    feature: int
    score: float


def rank_features(
    arch: ArchSpec,
    store: ParamStore,
    metric: str,
    snapshot: InitSnapshot | None = None,
    dataset: Dataset | None = None,
    layers: list[int] | None = None,
) -> list[RankedFeature]:
    """All features of the prunable layers in one list, ascending by score then (layer, feature)"""
    vectors = layer_importance(arch, store, metric, snapshot, dataset, layers)
    ranked = [
        RankedFeature(index, feature, float(score))
        for index, vector in vectors.items()
        for feature, score in enumerate(vector.scores)
    ]
    return sorted(ranked, key=lambda r: (r.score, r.layer, r.feature))


def is_prunable(arch: ArchSpec, index: int) -> bool:
    layer = arch.layers[index]
    return index in arch.expandable_indices and layer.couple_group is None and layer.width >= 2


def _slice_plan(arch: ArchSpec, index: int, feature: int) -> dict[str, tuple[int, np.ndarray]]:
    """Map each affected tensor key to (axis, indices to delete)"""
    layer = arch.layers[index]
    if index not in arch.expandable_indices:
        raise PruneError(f"layer {index} ({arch.layer_label(index)}) cannot be pruned")
    if layer.couple_group is not None:
        raise PruneError(f"layer {arch.layer_label(index)} is coupled in group {layer.couple_group!r}")
    if layer.width < 2:
        raise PruneError(f"layer {arch.layer_label(index)} has width 1; pruning would disconnect the network")
    if not 0 <= feature < layer.width:
        raise PruneError(f"feature {feature} out of range for width {layer.width}")

    plan = {
        param_key(index, "weight"): (0, np.array([feature])),
        param_key(index, "bias"): (0, np.array([feature])),
    }
    shapes = input_shapes(arch)
    block = np.array([feature])
    for j in range(index + 1, len(arch.layers)):
        kind = arch.layers[j].kind
        if kind == "batchnorm":
            for name in BN_KEYS + BN_BUFFERS:
                plan[param_key(j, name)] = (0, block)
        elif kind == "flatten":
            spatial = int(np.prod(shapes[j][1:]))
            block = np.arange(feature * spatial, (feature + 1) * spatial)
        elif arch.layers[j].learnable:
            plan[param_key(j, "weight")] = (1, block)
            return plan
    raise PruneError(f"layer {arch.layer_label(index)} has no consuming layer")


def _apply(tensors: dict[str, np.ndarray], plan: dict[str, tuple[int, np.ndarray]]) -> dict[str, np.ndarray]:
    return {
        key: np.delete(value, plan[key][1], axis=plan[key][0]) if key in plan else value.copy()
        for key, value in tensors.items()
    }


def prune_feature(arch: ArchSpec, store: ParamStore, index: int, feature: int) -> tuple[ArchSpec, ParamStore]:
    """Remove one output feature and every tensor slice that reads it"""
    plan = _slice_plan(arch, index, feature)
    new_arch = with_widths(arch, {index: arch.layers[index].width - 1})
    new_store = ParamStore(params=_apply(store.params, plan), buffers=_apply(store.buffers, plan))
    expected = param_shapes(new_arch)
    for key, value in new_store.params.items():
        if tuple(value.shape) != tuple(expected[key]):
            raise PruneError(f"{key} has shape {list(value.shape)} after pruning, expected {list(expected[key])}")
    return new_arch, new_store


def prune_snapshot(arch: ArchSpec, snapshot: InitSnapshot, index: int, feature: int) -> InitSnapshot:
    """The init snapshot sliced the same way ``prune_feature`` slices the live weights of ``arch``"""
    return InitSnapshot(weights=_apply(snapshot.weights, _slice_plan(arch, index, feature)))


def recompute_bn_stats(arch: ArchSpec, store: ParamStore, dataset: Dataset, batch_size: int = 256) -> ParamStore:
    """Re-estimate batch-norm running statistics as the average over one pass of ``dataset``"""
    if not any(layer.kind == "batchnorm" for layer in arch.layers):
        return store
    for key, value in store.buffers.items():
        value[...] = 1.0 if key.endswith("running_var") else 0.0
    for k, (x, _) in enumerate(iterate_batches(dataset, batch_size)):
        forward(rebuild(arch, bn_momentum=1.0 / (k + 1)), store, x, mode="train")
    return store


def prune_curve(
    arch: ArchSpec,
    store: ParamStore,
    metric: str,
    eval_set: Dataset,
    snapshot: InitSnapshot | None = None,
    train_set: Dataset | None = None,
    layer: int | None = None,
    recompute_bn: bool = True,
    batch_size: int = 256,
) -> PruneCurve:
    """Remove the least important feature and re-evaluate until every ranked layer is at width 1"""
    layers = [layer] if layer is not None else None
    store = store.copy()
    rank_set = train_set if train_set is not None else eval_set
    _, accuracy = evaluate(arch, store, eval_set, batch_size)
    points = [PrunePoint(features_removed=0, accuracy=accuracy, params=store.num_params())]

    while True:
        ranked = rank_features(arch, store, metric, snapshot, rank_set, layers)
        target = next((r for r in ranked if is_prunable(arch, r.layer)), None)
        if target is None:
            break
        if snapshot is not None:
            snapshot = prune_snapshot(arch, snapshot, target.layer, target.feature)
        arch, store = prune_feature(arch, store, target.layer, target.feature)
        if recompute_bn and train_set is not None:
            recompute_bn_stats(arch, store, train_set, batch_size)
        _, accuracy = evaluate(arch, store, eval_set, batch_size)
        points.append(PrunePoint(
            features_removed=len(points), accuracy=accuracy, params=store.num_params(),
            layer=target.layer, feature=target.feature, score=target.score,
        ))
        logger.debug("[%s] pruned %s[%d] score %.3g acc %.4f", metric, arch.layer_label(target.layer),
                     target.feature, target.score, accuracy)
    logger.info("[%s] pruned %d features, accuracy %.4f -> %.4f", metric, len(points) - 1,
                points[0].accuracy, points[-1].accuracy)
    return PruneCurve(metric=metric, scope="global" if layer is None else "per-layer", layer=layer, points=points)


def prune_curves(
    arch: ArchSpec,
    store: ParamStore,
    cfg: PruneConfig,
    eval_set: Dataset,
    snapshot: InitSnapshot | None = None,
    train_set: Dataset | None = None,
) -> list[PruneCurve]:
    """One curve per metric (global scope) or per (metric, prunable layer) pair"""
    curves = []
    for metric in cfg.metrics:
        if cfg.scope == "global":
            targets: list[int | None] = [None]
        else:
            targets = [i for i in arch.expandable_indices if arch.layers[i].couple_group is None]
        for target in targets:
            curves.append(prune_curve(
                arch, store, metric, eval_set, snapshot, train_set, target, cfg.recompute_bn, cfg.eval_batch_size,
            ))
    return curves
