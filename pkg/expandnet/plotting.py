from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .exceptions import DataFormatError  # noqa: E402
from .schemas import EpochSummary, ExpansionEvent, ImportanceReport, PruneCurve  # noqa: E402

logger = logging.getLogger(__name__)

# Fixed id salt and no Date metadata keep the SVG text identical between runs.
SVG_RC = {"svg.hashsalt": "expandnet", "svg.fonttype": "path"}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info("Wrote %s", path)
    return path


def _labels(count: int, names: Sequence[str] | None) -> list[str]:
    if names is not None and len(names) == count:
        return list(names)
    return [f"layer {i}" for i in range(count)]


def plot_widths(history: Sequence[EpochSummary], path: str | Path, layer_names: Sequence[str] | None = None) -> Path:
    """Bar chart of the last recorded width of every expandable layer"""
    widths = list(history[-1].widths) if history else []
    with matplotlib.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(8, 4))
        ax.bar(np.arange(len(widths)), widths, color="tab:blue")
        ax.set_xticks(np.arange(len(widths)))
        ax.set_xticklabels(_labels(len(widths), layer_names), rotation=45, ha="right")
        ax.set_ylabel("features")
        ax.set_title("Width per layer")
        return _save(fig, path)


def plot_params(
    history: Sequence[EpochSummary], events: Sequence[ExpansionEvent], path: str | Path
) -> Path:
    """Parameter count over recorded epochs, one step per expansion"""
    params = [row.params for row in history] or [0]
    x = np.arange(len(params))
    with matplotlib.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(8, 4))
        ax.step(x, params, where="post", color="tab:green", label="parameters")
        finals = [i for i, row in enumerate(history) if row.phase == "final"]
        if finals:
            ax.axvline(finals[0], color="grey", linestyle="--", linewidth=0.8, label="final training")
        ax.set_xlabel("recorded epoch")
        ax.set_ylabel("parameters")
        applied = sum(1 for event in events if not event.suppressed)
        ax.set_title(f"Parameters over training ({applied} expansions)")
        ax.legend(loc="lower right")
        return _save(fig, path)


def plot_prune_curves(curves: Sequence[PruneCurve], path: str | Path) -> Path:
    with matplotlib.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(8, 4))
        for curve in curves:
            removed = [p.features_removed for p in curve.points]
            if any(b <= a for a, b in zip(removed, removed[1:])):
                raise DataFormatError(f"{curve.metric} curve has a non-increasing features_removed axis")
            label = curve.metric if curve.layer is None else f"{curve.metric} (layer {curve.layer})"
            ax.plot(removed, [100.0 * p.accuracy for p in curve.points], label=label)
        ax.set_xlabel("features removed")
        ax.set_ylabel("accuracy [%]")
        ax.set_title("Accuracy while pruning in ascending importance")
        if curves:
            ax.legend(loc="lower left")
        return _save(fig, path)


def plot_topology(widths_per_run: Sequence[Sequence[int]], path: str | Path, layer_names: Sequence[str] | None = None) -> Path:
    """Mean and std of per-layer widths over several runs"""
    if not widths_per_run or len({len(w) for w in widths_per_run}) != 1:
        raise DataFormatError("topology plot needs runs with the same number of layers")
    widths = np.asarray(widths_per_run, dtype=float)
    mean, std = widths.mean(axis=0), widths.std(axis=0)
    x = np.arange(widths.shape[1])
    with matplotlib.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(8, 4))
        ax.bar(x, mean, yerr=std, capsize=3, color="tab:orange")
        ax.set_xticks(x)
        ax.set_xticklabels(_labels(len(x), layer_names), rotation=45, ha="right")
        ax.set_ylabel("features")
        ax.set_title(f"Topology over {len(widths_per_run)} runs (mean ± std)")
        return _save(fig, path)


def plot_importance(
    reports: Sequence[ImportanceReport], path: str | Path, layer_names: dict[int, str] | None = None
) -> Path:
    """Sorted feature importance per layer, one panel per metric"""
    if not reports:
        raise DataFormatError("importance plot needs at least one report")
    metrics = sorted({report.metric for report in reports})
    names = layer_names or {}
    with matplotlib.rc_context(SVG_RC):
        fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 4), squeeze=False)
        for ax, metric in zip(axes[0], metrics):
            for report in sorted((r for r in reports if r.metric == metric), key=lambda r: r.layer):
                scores = np.sort(np.asarray(report.scores, dtype=float))
                ax.plot(np.arange(1, scores.size + 1), scores, marker=".", label=names.get(report.layer, f"layer {report.layer}"))
            ax.set_xlabel("feature rank")
            ax.set_ylabel("importance")
            ax.set_title(metric)
            ax.legend(loc="upper left", fontsize="small")
        return _save(fig, path)
