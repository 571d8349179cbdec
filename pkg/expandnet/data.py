from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .exceptions import DataFormatError
from .schemas import DataConfig, SyntheticTaskSpec
from .tensor import DEFAULT_DTYPE

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be [N,C,H,W], got {list(self.images.shape)}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataFormatError(f"{self.labels.shape[0]} labels for {self.images.shape[0]} images")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, limit: int | None) -> "Dataset":
        if limit is None or limit >= len(self):
            return self
        return replace(self, images=self.images[:limit], labels=self.labels[:limit])

    def astype(self, dtype) -> "Dataset":
        return replace(self, images=self.images.astype(dtype, copy=False))


# -- IDX ----------------------------------------------------------------------


def _read_idx(path: str | Path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header_size = 4 * (1 + ndim)
    if len(raw) < header_size:
        raise DataFormatError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    header = np.frombuffer(raw, dtype=">u4", count=1 + ndim)
    if int(header[0]) != magic:
        raise DataFormatError(f"{path}: bad magic 0x{int(header[0]):08x}, expected 0x{magic:08x}")
    dims = tuple(int(d) for d in header[1:])
    count = int(np.prod(dims))
    body = raw[header_size:]
    if len(body) != count:
        raise DataFormatError(f"{path}: truncated or oversized body, {len(body)} bytes for dims {list(dims)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_mnist_idx(images_path: str | Path, labels_path: str | Path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(
        np.array([IMAGES_MAGIC, *images.shape], dtype=">u4").tobytes() + images.tobytes()
    )
    Path(labels_path).write_bytes(np.array([LABELS_MAGIC, labels.shape[0]], dtype=">u4").tobytes() + labels.tobytes())


def load_mnist_idx(
    images_path: str | Path,
    labels_path: str | Path,
    split: str = "train",
    layout: str = "native",
    dtype=DEFAULT_DTYPE,
) -> Dataset:
    images = _read_idx(images_path, IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.astype(dtype)[:, None] / 255.0
    if layout == "replicate32":
        pad_h, pad_w = 32 - x.shape[2], 32 - x.shape[3]
        if pad_h < 0 or pad_w < 0:
            raise DataFormatError(f"cannot pad {list(x.shape[2:])} images up to 32x32")
        x = np.pad(x, ((0, 0), (0, 0), (pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2)))
        x = np.repeat(x, 3, axis=1)
    logger.info("Loaded %d %s images of shape %s from %s", len(x), split, list(x.shape[1:]), images_path)
    return Dataset(images=x, labels=labels.astype(np.int64), num_classes=10, split=split)


# -- normalization --------------------------------------------------------------


def normalize(dataset: Dataset, stats_from: Dataset) -> Dataset:
    """Per-channel (x - mean) / std with statistics taken from a training split"""
    if stats_from.split != "train":
        raise DataFormatError(f"normalization statistics must come from the train split, not {stats_from.split!r}")
    mean = stats_from.images.mean(axis=(0, 2, 3))
    std = stats_from.images.std(axis=(0, 2, 3))
    if np.any(std == 0):
        raise DataFormatError(f"channel(s) {np.flatnonzero(std == 0).tolist()} have zero standard deviation")
    images = (dataset.images - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)
    return replace(dataset, images=images, mean=mean, std=std)


def denormalize(dataset: Dataset) -> Dataset:
    if dataset.mean is None or dataset.std is None:
        raise DataFormatError("dataset carries no normalization statistics")
    images = dataset.images * dataset.std.reshape(1, -1, 1, 1) + dataset.mean.reshape(1, -1, 1, 1)
    return replace(dataset, images=images, mean=None, std=None)


# -- augmentation ----------------------------------------------------------------


def shift_images(batch: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Translate each image by integer (rows, cols) offsets, zero-filling uncovered pixels"""
    limit = int(np.abs(offsets).max()) if offsets.size else 0
    if limit == 0:
        return batch.copy()
    h, w = batch.shape[2:]
    padded = np.pad(batch, ((0, 0), (0, 0), (limit, limit), (limit, limit)))
    out = np.empty_like(batch)
    for i, (dy, dx) in enumerate(offsets):
        out[i] = padded[i, :, limit - dy:limit - dy + h, limit - dx:limit - dx + w]
    return out


def augment(batch: np.ndarray, flips: bool, max_translate: int, rng: np.random.Generator) -> np.ndarray:
    out = batch.copy()
    if flips:
        mask = rng.random(batch.shape[0]) < 0.5
        out[mask] = out[mask][:, :, :, ::-1]
    if max_translate > 0:
        offsets = rng.integers(-max_translate, max_translate + 1, size=(batch.shape[0], 2))
        out = shift_images(out, offsets)
    return out


def iterate_batches(
    dataset: Dataset, batch_size: int, rng: np.random.Generator | None = None
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    order = rng.permutation(len(dataset)) if rng is not None else np.arange(len(dataset))
    for start in range(0, len(dataset), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


# -- synthetic tasks ---------------------------------------------------------------


def gen_synthetic(spec: SyntheticTaskSpec, split: str = "train", dtype=DEFAULT_DTYPE) -> Dataset:
    """Oriented-grating classes with Gaussian clutter.

    Difficulty 0 adds a per-class brightness cue and little noise; difficulty 1
    removes the cue, raises noise and clutter. Class prototypes depend on the
    seed only, so the train and test splits of one spec share them.
    """
    if split not in ("train", "test"):
        raise DataFormatError(f"unknown split {split!r}")
    k, m, s, c = spec.num_classes, spec.clusters_per_class, spec.image_size, spec.channels
    d = spec.difficulty
    proto_seq, train_seq, test_seq = np.random.SeedSequence(spec.seed).spawn(3)
    proto = np.random.default_rng(proto_seq)
    angles = np.pi * np.arange(k)[:, None] / k + proto.normal(0.0, 0.15 * np.pi / k, size=(k, m))
    freqs = proto.uniform(1.5, 3.0, size=(k, m))
    gains = proto.uniform(0.5, 1.0, size=(k, m, c))
    brightness = np.linspace(-1.0, 1.0, k)

    rng = np.random.default_rng(train_seq if split == "train" else test_seq)
    n = spec.n_train if split == "train" else spec.n_test
    labels = rng.permutation(np.arange(n) % k)
    clusters = rng.integers(0, m, size=n)
    phases = rng.uniform(0.0, 2 * np.pi, size=n)

    yy, xx = np.mgrid[0:s, 0:s] / s
    theta = angles[labels, clusters][:, None, None]
    freq = freqs[labels, clusters][:, None, None]
    pattern = np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phases[:, None, None])
    pattern = pattern + (1.0 - d) * brightness[labels][:, None, None]
    images = gains[labels, clusters][:, :, None, None] * pattern[:, None]

    centers = rng.uniform(0, s, size=(n, 3, 2))
    amps = rng.normal(0.0, 1.0, size=(n, 3))
    clutter = np.zeros((n, s, s))
    for j in range(3):
        dist = (yy * s - centers[:, j, 0, None, None]) ** 2 + (xx * s - centers[:, j, 1, None, None]) ** 2
        clutter += amps[:, j, None, None] * np.exp(-dist / (2 * (s / 6) ** 2))
    images = images + d * 1.5 * clutter[:, None]
    images = images + rng.normal(0.0, 0.2 + 1.3 * d, size=images.shape)
    return Dataset(images=images.astype(dtype), labels=labels.astype(np.int64), num_classes=k, split=split)


def build_datasets(cfg: DataConfig, dtype=DEFAULT_DTYPE) -> tuple[Dataset, Dataset]:
    if cfg.source == "mnist":
        train = load_mnist_idx(cfg.mnist_train_images, cfg.mnist_train_labels, "train", cfg.mnist_layout, dtype)
        test = load_mnist_idx(cfg.mnist_test_images, cfg.mnist_test_labels, "test", cfg.mnist_layout, dtype)
    else:
        train = gen_synthetic(cfg.synthetic, "train", dtype)
        test = gen_synthetic(cfg.synthetic, "test", dtype)
    train, test = train.subset(cfg.limit_train), test.subset(cfg.limit_test)
    if len(train) == 0:
        raise DataFormatError("training split is empty")
    if cfg.normalize:
        train, test = normalize(train, train), normalize(test, train)
    return train.astype(dtype), test.astype(dtype)
