from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, augment, iterate_batches
from .exceptions import ConfigError
from .layers import build_store, he_init, with_widths
from .metrics import ImportanceVector, layer_importance, snapshot_refresh
from .optim import init_velocity
from .schemas import ArchSpec, EpochSummary, ExpansionConfig, ExpansionEvent, TrainConfig
from .tensor import child_rng, resolve_dtype
from .trainer import FitResult, evaluate, fit, summarize, train_step

logger = logging.getLogger(__name__)


@dataclass
class ExpansionState:
    epoch: int = 0
    step: int = 0
    search_epochs: int = 0
    width_history: list[list[int]] = field(default_factory=list)
    reset_count: int = 0
    stable_epochs: int = 0
    terminated: bool = False
    limit_reached: bool = False


@dataclass
class ExpansionResult:
    arch: ArchSpec
    state: ExpansionState
    events: list[ExpansionEvent]
    history: list[EpochSummary]
    final: FitResult


def should_expand(vector: ImportanceVector, epsilon: float, condition: str = "prose") -> bool:
    """prose: every non-degenerate feature moved by more than epsilon; printed: max(c) < 1 - epsilon"""
    scores = vector.scores[~vector.degenerate]
    if scores.size == 0:
        return False
    if condition == "printed":
        return bool(scores.max() < 1.0 - epsilon)
    return bool(scores.min() > epsilon)


def group_members(arch: ArchSpec, index: int) -> list[int]:
    group = arch.layers[index].couple_group
    if group is None:
        return [index]
    return [i for i, layer in enumerate(arch.layers) if layer.couple_group == group]


def expand_layer(arch: ArchSpec, index: int, f_exp: int, max_width: int | None = None) -> ArchSpec:
    """Widen a layer and its couple group, or return ``arch`` itself when capped"""
    if index not in arch.expandable_indices:
        raise ConfigError(f"layer {index} ({arch.layer_label(index)}) is not an expandable layer")
    members = group_members(arch, index)
    old = arch.layers[index].width
    if max_width is not None and old + f_exp > max_width:
        logger.warning(
            "Expansion of %s suppressed: %d + %d exceeds max_width %d",
            arch.layer_label(index), old, f_exp, max_width,
        )
        return arch
    return with_widths(arch, {member: old + f_exp for member in members})


def _fresh(arch: ArchSpec, cfg: TrainConfig, rng: np.random.Generator):
    store = he_init(build_store(arch, resolve_dtype(cfg.dtype)), child_rng(rng))
    return store, snapshot_refresh(store), init_velocity(store)


def _triggered(
    arch: ArchSpec, vectors: dict[int, ImportanceVector], exp_cfg: ExpansionConfig
) -> tuple[list[int], float]:
    fired = [index for index, vector in vectors.items() if should_expand(vector, exp_cfg.epsilon, exp_cfg.condition)]
    if not fired:
        return [], 0.0
    score = min(float(vectors[i].scores[~vectors[i].degenerate].min()) for i in fired)
    # one representative per couple group
    leaders: list[int] = []
    seen: set[int] = set()
    for index in fired:
        if index not in seen:
            leaders.append(index)
            seen.update(group_members(arch, index))
    return leaders, score


def run_expansion(
    arch0: ArchSpec,
    train_cfg: TrainConfig,
    exp_cfg: ExpansionConfig,
    train_set: Dataset,
    rng: np.random.Generator,
    eval_set: Dataset | None = None,
) -> ExpansionResult:
    """Grow widths from one feature per layer, then train the converged architecture from scratch"""
    if not exp_cfg.enabled:
        result = fit(arch0, train_cfg, train_set, rng, eval_set)
        state = ExpansionState(width_history=[arch0.widths()], terminated=True, epoch=train_cfg.epochs)
        return ExpansionResult(arch0, state, [], result.history, result)
    if train_cfg.epochs < 1:
        raise ConfigError("expansion needs train.epochs >= 1")
    if any(width != 1 for width in arch0.widths()):
        raise ConfigError(f"expansion starts from width 1 in every layer, got widths {arch0.widths()}")

    arch = arch0
    state = ExpansionState(width_history=[arch.widths()])
    events: list[ExpansionEvent] = []
    history: list[EpochSummary] = []
    capped: set[tuple[int, int]] = set()
    required_stable = math.ceil(exp_cfg.stability_fraction * train_cfg.epochs)
    search_limit = exp_cfg.search_limit(train_cfg.epochs)
    store, snapshot, velocity = _fresh(arch, train_cfg, rng)
    steps_since_init = 0

    while not state.terminated:
        total_loss, correct, seen = 0.0, 0, 0
        reset = False
        for x, y in iterate_batches(train_set, train_cfg.batch_size, rng):
            if train_cfg.flips or train_cfg.max_translate:
                x = augment(x, train_cfg.flips, train_cfg.max_translate, rng)
            loss, hits = train_step(arch, store, velocity, x, y, train_cfg, state.epoch)
            total_loss, correct, seen = total_loss + loss * len(y), correct + hits, seen + len(y)
            state.step += 1
            steps_since_init += 1
            if steps_since_init % exp_cfg.eval_every:
                continue

            vectors = layer_importance(arch, store, "self_resemblance", snapshot, step=state.step)
            leaders, score = _triggered(arch, vectors, exp_cfg)
            if not leaders:
                continue
            old_widths = arch.widths()
            grown = arch
            widened: list[int] = []
            for index in leaders:
                members = group_members(grown, index)
                candidate = expand_layer(grown, index, exp_cfg.f_exp, exp_cfg.max_width)
                if candidate is grown:
                    width = grown.layers[index].width
                    if (index, width) not in capped:
                        capped.add((index, width))
                        events.append(ExpansionEvent(
                            step=state.step, epoch=state.epoch, layers=members, old_widths=old_widths,
                            new_widths=old_widths, trigger_score=score, suppressed=True,
                        ))
                    continue
                grown = candidate
                widened.extend(members)
            if not widened:
                continue

            arch = grown
            events.append(ExpansionEvent(
                step=state.step, epoch=state.epoch, layers=sorted(widened), old_widths=old_widths,
                new_widths=arch.widths(), trigger_score=score,
            ))
            if state.stable_epochs > 0:
                logger.warning(
                    "Late re-initialization at step %d after %d stable epoch(s)", state.step, state.stable_epochs
                )
            logger.info("Expanded %s: %s -> %s", [arch.layer_label(i) for i in sorted(widened)], old_widths, arch.widths())
            store, snapshot, velocity = _fresh(arch, train_cfg, rng)
            steps_since_init = 0
            state.reset_count += 1
            state.stable_epochs = 0
            state.epoch = 0
            state.width_history.append(arch.widths())
            reset = True
            break

        state.search_epochs += 1
        if not reset:
            state.epoch += 1
            state.stable_epochs += 1
            eval_result = evaluate(arch, store, eval_set) if eval_set is not None else None
            history.append(summarize(
                "search", state.epoch, state.step, arch, train_cfg,
                total_loss / max(seen, 1), correct / max(seen, 1), eval_result,
            ))
            if state.stable_epochs >= required_stable:
                state.terminated = True
        if state.search_epochs >= search_limit and not state.terminated:
            logger.warning("Search stopped by its limit of %d epochs before widths were stable", search_limit)
            state.limit_reached = True
            state.terminated = True

    logger.info(
        "Search finished after %d epochs, %d re-initializations, widths %s",
        state.search_epochs, state.reset_count, arch.widths(),
    )
    final = fit(arch, train_cfg, train_set, rng, eval_set, phase="final")
    return ExpansionResult(arch, state, events, history + final.history, final)
