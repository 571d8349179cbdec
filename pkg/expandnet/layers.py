from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import ValidationError

from .exceptions import ConfigError, DataFormatError, ExpandNetError, ShapeError
from .schemas import ArchSpec, LayerSpec
from .tensor import (
    DEFAULT_DTYPE,
    Tensor,
    conv2d,
    conv2d_backward,
    matmul,
    max_pool2d,
    max_pool2d_backward,
    output_extent,
)

logger = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).parent / "configs"

Shape = tuple[int, ...]


# keys are "<layer index>.<name>"; only *.weight tensors are weight-decayed
def param_key(index: int, name: str) -> str:
    return f"{index}.{name}"


def split_key(key: str) -> tuple[int, str]:
    index, name = key.split(".", 1)
    return int(index), name


@dataclass
class ParamStore:
    params: dict[str, Tensor]
    buffers: dict[str, Tensor] = field(default_factory=dict)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def copy(self) -> "ParamStore":
        return ParamStore(
            params={k: v.copy() for k, v in self.params.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
        )

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


@dataclass
class Cache:
    arch: ArchSpec
    mode: str
    x: Tensor
    outputs: list[Tensor]
    extras: list[Any]


# -- shape pass ---------------------------------------------------------------


def _layer_error(index: int, layer: LayerSpec, message: str) -> ShapeError:
    label = layer.name or layer.kind
    return ShapeError(f"layer {index} ({label}, {layer.kind}): {message}")


def _classifier_kernel(layer: LayerSpec, in_shape: Shape) -> tuple[int, int]:
    return layer.kernel if layer.kernel is not None else (in_shape[1], in_shape[2])


def _layer_shapes(index: int, layer: LayerSpec, in_shape: Shape) -> tuple[Shape, dict[str, Shape]]:
    """Output shape and parameter shapes of one layer given its input shape"""
    kind = layer.kind
    if kind in ("conv", "maxpool", "classifier-conv", "flatten") and len(in_shape) != 3:
        raise _layer_error(index, layer, f"expects a [C,H,W] input, got {list(in_shape)}")
    if kind == "linear" and len(in_shape) != 1:
        raise _layer_error(index, layer, f"expects a flat input, got {list(in_shape)} (missing flatten?)")

    if kind in ("conv", "linear", "classifier-conv"):
        fan = in_shape[0]
        if layer.in_features is not None and layer.in_features != fan:
            raise _layer_error(index, layer, f"declares {layer.in_features} input features but receives {fan}")

    if kind in ("conv", "maxpool", "classifier-conv"):
        kh, kw = _classifier_kernel(layer, in_shape) if kind == "classifier-conv" else layer.kernel
        h = output_extent(in_shape[1], kh, layer.stride, layer.padding)
        w = output_extent(in_shape[2], kw, layer.stride, layer.padding)
        if h < 1 or w < 1:
            raise _layer_error(index, layer, f"kernel {kh}x{kw} does not fit input {list(in_shape)}")
        if kind == "conv":
            weights = {"weight": (layer.width, in_shape[0], kh, kw), "bias": (layer.width,)}
            return (layer.width, h, w), weights
        if kind == "maxpool":
            return (in_shape[0], h, w), {}
        if (h, w) != (1, 1):
            raise _layer_error(index, layer, f"must cover the full spatial extent, leaves {h}x{w}")
        return (layer.width,), {"weight": (layer.width, in_shape[0], kh, kw), "bias": (layer.width,)}
    if kind == "linear":
        return (layer.width,), {"weight": (layer.width, in_shape[0]), "bias": (layer.width,)}
    if kind == "batchnorm":
        return in_shape, {"scale": (in_shape[0],), "shift": (in_shape[0],)}
    if kind == "relu":
        return in_shape, {}
    return (int(np.prod(in_shape)),), {}


def infer_shapes(arch: ArchSpec) -> list[Shape]:
    """Dry-run shape pass; returns every layer's per-sample output shape"""
    shape: Shape = tuple(arch.input_shape)
    shapes = []
    for index, layer in enumerate(arch.layers):
        shape, _ = _layer_shapes(index, layer, shape)
        shapes.append(shape)
    if shapes[-1] != (arch.num_classes,):
        raise ShapeError(f"network produces {list(shapes[-1])}, expected [{arch.num_classes}] logits")
    return shapes


def input_shapes(arch: ArchSpec) -> list[Shape]:
    return [tuple(arch.input_shape)] + infer_shapes(arch)[:-1]


def param_shapes(arch: ArchSpec) -> dict[str, Shape]:
    shapes = {}
    for index, (layer, in_shape) in enumerate(zip(arch.layers, input_shapes(arch))):
        _, owned = _layer_shapes(index, layer, in_shape)
        for name, shape in owned.items():
            shapes[param_key(index, name)] = shape
    return shapes


def count_params(arch: ArchSpec) -> int:
    return int(sum(np.prod(shape) for shape in param_shapes(arch).values()))


def validate_arch(arch: ArchSpec) -> ArchSpec:
    infer_shapes(arch)
    return arch


def rebuild(arch: ArchSpec, **updates) -> ArchSpec:
    """Re-validate an architecture after changing fields; layers may be LayerSpecs or dicts"""
    data = arch.model_dump()
    if "layers" in updates:
        updates["layers"] = [l.model_dump() if isinstance(l, LayerSpec) else l for l in updates["layers"]]
    data.update(updates)
    try:
        new = ArchSpec.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"Invalid architecture: {exc}") from exc
    return validate_arch(new)


def with_widths(arch: ArchSpec, widths: dict[int, int]) -> ArchSpec:
    """Set expandable widths; declared input sizes are dropped since they no longer hold"""
    layers = []
    for index, layer in enumerate(arch.layers):
        changes: dict[str, Any] = {"in_features": None}
        if index in widths:
            changes["width"] = widths[index]
        layers.append(layer.model_copy(update=changes))
    return rebuild(arch, layers=layers)


def with_unit_widths(arch: ArchSpec) -> ArchSpec:
    return with_widths(arch, {index: 1 for index in arch.expandable_indices})


def adapt_to_data(arch: ArchSpec, input_shape: Shape, num_classes: int) -> ArchSpec:
    if tuple(arch.input_shape) == tuple(input_shape) and arch.num_classes == num_classes:
        return arch
    logger.info(
        "Adapting %s from input %s/%d classes to %s/%d classes",
        arch.name, list(arch.input_shape), arch.num_classes, list(input_shape), num_classes,
    )
    layers = [layer.model_copy(update={"in_features": None}) for layer in arch.layers]
    layers[-1] = layers[-1].model_copy(update={"width": num_classes})
    return rebuild(arch, layers=layers, input_shape=tuple(input_shape), num_classes=num_classes)


def load_arch(ref: str, base_dir: Path | None = None) -> ArchSpec:
    """Load a shipped architecture by name (``gfcnn``) or a JSON file path"""
    shipped = CONFIG_DIR / f"{ref}.json"
    candidates = [shipped, Path(ref)]
    if base_dir is not None:
        candidates.insert(1, Path(base_dir) / ref)
    path = next((p for p in candidates if p.is_file()), None)
    if path is None:
        raise ConfigError(f"Architecture {ref!r} is neither a shipped config nor a readable file")
    try:
        arch = ArchSpec.model_validate(json.loads(path.read_text()))
    except (ValidationError, json.JSONDecodeError) as exc:
        raise ConfigError(f"Invalid architecture file {path}: {exc}") from exc
    return validate_arch(arch)


# -- parameters ---------------------------------------------------------------


def build_store(arch: ArchSpec, dtype: np.dtype = DEFAULT_DTYPE) -> ParamStore:
    params, buffers = {}, {}
    for key, shape in param_shapes(arch).items():
        params[key] = np.zeros(shape, dtype=dtype)
        index, name = split_key(key)
        if name == "scale":
            params[key][:] = 1.0
            buffers[param_key(index, "running_mean")] = np.zeros(shape, dtype=dtype)
            buffers[param_key(index, "running_var")] = np.ones(shape, dtype=dtype)
    return ParamStore(params=params, buffers=buffers)


def he_init(store: ParamStore, rng: np.random.Generator) -> ParamStore:
    """Weights ~ N(0, 2/fan_in), biases and shifts 0, scales 1, fresh running stats"""
    for key, value in store.params.items():
        name = split_key(key)[1]
        if name == "weight":
            fan_in = int(np.prod(value.shape[1:]))
            value[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=value.shape)
        elif name == "scale":
            value[...] = 1.0
        else:
            value[...] = 0.0
    for key, value in store.buffers.items():
        value[...] = 1.0 if key.endswith("running_var") else 0.0
    return store


# -- forward ------------------------------------------------------------------


def _bn_axes(x: Tensor) -> tuple[int, ...]:
    return (0, 2, 3) if x.ndim == 4 else (0,)


def _bn_view(v: Tensor, x: Tensor) -> Tensor:
    return v.reshape(1, -1, 1, 1) if x.ndim == 4 else v.reshape(1, -1)


def _forward_layer(arch: ArchSpec, index: int, store: ParamStore, x: Tensor, train: bool) -> tuple[Tensor, Any]:
    layer = arch.layers[index]
    p = store.params
    kind = layer.kind
    if kind == "conv":
        w, b = p[param_key(index, "weight")], p[param_key(index, "bias")]
        return conv2d(x, w, layer.stride, layer.padding) + b.reshape(1, -1, 1, 1), None
    if kind == "classifier-conv":
        w, b = p[param_key(index, "weight")], p[param_key(index, "bias")]
        y = conv2d(x, w, layer.stride, layer.padding)
        return y.reshape(y.shape[0], -1) + b, None
    if kind == "linear":
        w, b = p[param_key(index, "weight")], p[param_key(index, "bias")]
        return matmul(x, w.T) + b, None
    if kind == "batchnorm":
        scale, shift = p[param_key(index, "scale")], p[param_key(index, "shift")]
        running_mean = store.buffers[param_key(index, "running_mean")]
        running_var = store.buffers[param_key(index, "running_var")]
        axes = _bn_axes(x)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            count = x.size // mean.size
            m = arch.bn_momentum
            running_mean *= 1.0 - m
            running_mean += m * mean
            running_var *= 1.0 - m
            running_var += m * var * (count / max(count - 1, 1))
        else:
            mean, var = running_mean, running_var
        inv_std = 1.0 / np.sqrt(var + arch.bn_eps)
        x_hat = (x - _bn_view(mean, x)) * _bn_view(inv_std, x)
        return _bn_view(scale, x) * x_hat + _bn_view(shift, x), (x_hat, inv_std)
    if kind == "relu":
        return np.maximum(x, 0.0), None
    if kind == "maxpool":
        kh, kw = layer.kernel
        return max_pool2d(x, kh, kw, layer.stride, layer.padding)
    return x.reshape(x.shape[0], -1), None


def forward(arch: ArchSpec, store: ParamStore, batch: Tensor, mode: str = "eval") -> tuple[Tensor, Cache]:
    if mode not in ("train", "eval"):
        raise ConfigError(f"Unknown forward mode {mode!r}")
    if tuple(batch.shape[1:]) != tuple(arch.input_shape):
        raise ShapeError(f"batch shape {list(batch.shape)} does not match input_shape {list(arch.input_shape)}")
    outputs, extras = [], []
    x = batch
    for index in range(len(arch.layers)):
        try:
            x, extra = _forward_layer(arch, index, store, x, train=(mode == "train"))
        except KeyError as exc:
            raise _layer_error(index, arch.layers[index], f"parameter {exc} missing from store") from exc
        except ShapeError as exc:
            raise _layer_error(index, arch.layers[index], exc.detail) from exc
        outputs.append(x)
        extras.append(extra)
    return x, Cache(arch=arch, mode=mode, x=batch, outputs=outputs, extras=extras)


# -- backward -----------------------------------------------------------------


def _backward_layer(
    arch: ArchSpec, index: int, store: ParamStore, x: Tensor, extra: Any, dy: Tensor, grads: dict[str, Tensor]
) -> Tensor:
    layer = arch.layers[index]
    p = store.params
    kind = layer.kind
    if kind in ("conv", "classifier-conv"):
        w = p[param_key(index, "weight")]
        if kind == "classifier-conv":
            dy = dy.reshape(dy.shape[0], dy.shape[1], 1, 1)
        dx, dw = conv2d_backward(x, w, dy, layer.stride, layer.padding)
        grads[param_key(index, "weight")] = dw
        grads[param_key(index, "bias")] = dy.sum(axis=(0, 2, 3))
        return dx
    if kind == "linear":
        w = p[param_key(index, "weight")]
        grads[param_key(index, "weight")] = matmul(dy.T, x)
        grads[param_key(index, "bias")] = dy.sum(axis=0)
        return matmul(dy, w)
    if kind == "batchnorm":
        x_hat, inv_std = extra
        scale = p[param_key(index, "scale")]
        axes = _bn_axes(x)
        count = x.size // scale.size
        grads[param_key(index, "scale")] = (dy * x_hat).sum(axis=axes)
        grads[param_key(index, "shift")] = dy.sum(axis=axes)
        d_hat = dy * _bn_view(scale, x)
        sum_d = _bn_view(d_hat.sum(axis=axes), x)
        sum_dx = _bn_view((d_hat * x_hat).sum(axis=axes), x)
        return _bn_view(inv_std, x) / count * (count * d_hat - sum_d - x_hat * sum_dx)
    if kind == "relu":
        return dy * (x > 0)
    if kind == "maxpool":
        kh, kw = layer.kernel
        return max_pool2d_backward(dy, extra, x.shape, kh, kw, layer.stride, layer.padding)
    return dy.reshape(x.shape)


def backward(cache: Cache, store: ParamStore, logits_grad: Tensor) -> dict[str, Tensor]:
    """Parameter gradients for the forward pass recorded in ``cache``"""
    if cache.mode != "train":
        raise ExpandNetError("backward needs the cache of a train-mode forward pass")
    if logits_grad.shape != cache.outputs[-1].shape:
        raise ShapeError(
            f"cache/arch mismatch: logits {list(cache.outputs[-1].shape)} vs gradient {list(logits_grad.shape)}"
        )
    arch = cache.arch
    if set(param_shapes(arch)) != set(store.params):
        raise ShapeError("cache/arch mismatch: store does not hold the cached architecture's parameters")
    grads: dict[str, Tensor] = {}
    dy = logits_grad
    for index in reversed(range(len(arch.layers))):
        x = cache.x if index == 0 else cache.outputs[index - 1]
        dy = _backward_layer(arch, index, store, x, cache.extras[index], dy, grads)
    return {key: grads[key] for key in store.params}


def cross_entropy(logits: Tensor, labels: np.ndarray) -> tuple[float, Tensor]:
    """Mean negative log-softmax of the true class and its gradient wrt the logits"""
    n, classes = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels {list(labels.shape)} do not match logits {list(logits.shape)}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DataFormatError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -float(log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return loss, grad / n


# -- architecture transforms ----------------------------------------------------


def all_conv_transform(arch: ArchSpec) -> ArchSpec:
    """Replace pooling by strided convolutions and the dense head by one affine classifier-conv"""
    shapes = input_shapes(arch)
    head_start = next(
        (i for i, layer in enumerate(arch.layers) if layer.kind in ("flatten", "linear")), len(arch.layers)
    )
    layers: list[LayerSpec] = []
    for index, layer in enumerate(arch.layers[:head_start]):
        if layer.kind != "maxpool":
            layers.append(layer.model_copy(update={"in_features": None}))
            continue
        label = layer.name or f"pool{index}"
        layers.append(LayerSpec(
            kind="conv",
            name=f"{label}-conv",
            width=shapes[index][0],
            kernel=layer.kernel,
            stride=layer.stride,
            padding=layer.padding,
        ))
        layers.append(LayerSpec(kind="batchnorm"))
        layers.append(LayerSpec(kind="relu"))
    if head_start < len(arch.layers):
        layers.append(LayerSpec(kind="classifier-conv", name="classifier", width=arch.num_classes))
    return rebuild(arch, layers=layers, name=f"{arch.name}-allconv")
