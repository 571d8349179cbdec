from __future__ import annotations

import numpy as np

from .exceptions import ShapeError
from .layers import ParamStore, split_key
from .schemas import TrainConfig
from .tensor import Tensor

Velocity = dict[str, Tensor]


def schedule_lr(cfg: TrainConfig, epoch: int) -> float:
    """λ₀ times every multiplier whose epoch has been reached"""
    lr = cfg.lr0
    for start, multiplier in cfg.schedule:
        if start <= epoch:
            lr *= multiplier
    return lr


def init_velocity(store: ParamStore) -> Velocity:
    return {key: np.zeros_like(value) for key, value in store.params.items()}


def is_decayed(key: str) -> bool:
    # batch-norm scale/shift and biases stay undecayed
    return split_key(key)[1] == "weight"


def sgd_step(
    store: ParamStore, grads: dict[str, Tensor], velocity: Velocity, cfg: TrainConfig, epoch: int
) -> tuple[ParamStore, Velocity]:
    """One in-place update of ``store`` and ``velocity``; both are returned for chaining"""
    lr = schedule_lr(cfg, epoch)
    m = cfg.momentum
    for key, theta in store.params.items():
        g = grads.get(key)
        v = velocity.get(key)
        if g is None or v is None or g.shape != theta.shape or v.shape != theta.shape:
            raise ShapeError(f"gradient/velocity for {key} does not match parameter shape {list(theta.shape)}")
        if cfg.weight_decay and is_decayed(key):
            g = g + cfg.weight_decay * theta
        v *= m
        v += g
        if cfg.nesterov:
            theta -= lr * (g + m * v)
        else:
            theta -= lr * v
    return store, velocity
