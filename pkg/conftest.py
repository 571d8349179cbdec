import os

import numpy as np
import pytest

# keep the module-level engine off the working directory
os.environ.setdefault("EXPANDNET_DATABASE_URL", "sqlite://")

from expandnet.data import Dataset, gen_synthetic, normalize, write_mnist_idx  # noqa: E402
from expandnet.layers import build_store, he_init  # noqa: E402
from expandnet.schemas import ArchSpec, SyntheticTaskSpec  # noqa: E402
from expandnet.tensor import make_rng  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run seeded calibration experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


TINY_LAYERS = [
    {"kind": "conv", "name": "conv1", "width": 3, "kernel": [3, 3], "padding": 1},
    {"kind": "batchnorm"},
    {"kind": "relu"},
    {"kind": "maxpool", "name": "pool1", "kernel": [2, 2], "stride": 2},
    {"kind": "conv", "name": "conv2", "width": 2, "kernel": [3, 3], "padding": 1},
    {"kind": "relu"},
    {"kind": "flatten"},
    {"kind": "linear", "name": "fc1", "width": 4},
    {"kind": "batchnorm"},
    {"kind": "relu"},
    {"kind": "linear", "name": "fc2"},
]


def tiny_arch_dict(input_shape=(2, 6, 6), num_classes=3):
    return {"name": "tiny", "input_shape": list(input_shape), "num_classes": num_classes, "layers": TINY_LAYERS}


# Unpadded convolutions on constant images keep every gradient row parallel to the all-ones vector.
FLAT_LAYERS = [
    {"kind": "conv", "name": "conv1", "width": 1, "kernel": [3, 3], "padding": 0},
    {"kind": "batchnorm"},
    {"kind": "relu"},
    {"kind": "maxpool", "name": "pool1", "kernel": [2, 2], "stride": 2},
    {"kind": "conv", "name": "conv2", "width": 1, "kernel": [3, 3], "padding": 0},
    {"kind": "batchnorm"},
    {"kind": "relu"},
    {"kind": "flatten"},
    {"kind": "linear", "name": "fc1", "width": 1},
    {"kind": "batchnorm"},
    {"kind": "relu"},
    {"kind": "linear", "name": "fc2"},
]


def flat_arch_dict(image_size=12, num_classes=2):
    return {"name": "flat", "input_shape": [1, image_size, image_size], "num_classes": num_classes, "layers": FLAT_LAYERS}


def flat_dataset(n, image_size=12, num_classes=2, split="train"):
    """One constant grey level per class in [-1, 1]"""
    labels = np.arange(n) % num_classes
    levels = np.linspace(-1.0, 1.0, num_classes)
    images = np.broadcast_to(levels[labels].reshape(-1, 1, 1, 1), (n, 1, image_size, image_size)).copy()
    return Dataset(images, labels, num_classes, split)


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def tiny_arch():
    """conv(3) bn relu pool conv(2) relu flatten fc(4) bn relu fc(3) on [2,6,6] inputs"""
    return ArchSpec.model_validate(tiny_arch_dict())


@pytest.fixture
def tiny_store(tiny_arch, rng):
    store = he_init(build_store(tiny_arch), rng)
    for key, value in store.buffers.items():
        if key.endswith("running_mean"):
            value[...] = rng.normal(0.0, 0.3, size=value.shape)
        else:
            value[...] = rng.uniform(0.5, 2.0, size=value.shape)
    for key, value in store.params.items():
        if not key.endswith(".weight"):
            value[...] += rng.normal(0.0, 0.1, size=value.shape)
    return store


@pytest.fixture
def easy_task():
    return SyntheticTaskSpec(num_classes=2, image_size=8, difficulty=0.0, n_train=96, n_test=48, seed=7)


@pytest.fixture
def easy_data(easy_task):
    train = gen_synthetic(easy_task, "train")
    test = gen_synthetic(easy_task, "test")
    return normalize(train, train), normalize(test, train)


@pytest.fixture
def small_arch():
    """Two conv blocks and a two-layer head on [1,8,8] inputs, 2 classes"""
    return ArchSpec.model_validate({
        "name": "small",
        "input_shape": [1, 8, 8],
        "num_classes": 2,
        "layers": [
            {"kind": "conv", "name": "conv1", "width": 4, "kernel": [3, 3], "padding": 1},
            {"kind": "batchnorm"},
            {"kind": "relu"},
            {"kind": "maxpool", "name": "pool1", "kernel": [2, 2], "stride": 2},
            {"kind": "conv", "name": "conv2", "width": 4, "kernel": [3, 3], "padding": 1},
            {"kind": "batchnorm"},
            {"kind": "relu"},
            {"kind": "maxpool", "name": "pool2", "kernel": [2, 2], "stride": 2},
            {"kind": "flatten"},
            {"kind": "linear", "name": "fc1", "width": 4},
            {"kind": "batchnorm"},
            {"kind": "relu"},
            {"kind": "linear", "name": "fc2"},
        ],
    })


@pytest.fixture
def random_batch(rng):
    return rng.normal(size=(5, 2, 6, 6))


@pytest.fixture
def idx_writer(tmp_path):
    """Writes uint8 images/labels as an IDX pair and returns the two paths"""
    def write(images, labels, stem="fixture"):
        images_path = tmp_path / f"{stem}-images-idx3-ubyte"
        labels_path = tmp_path / f"{stem}-labels-idx1-ubyte"
        write_mnist_idx(images_path, labels_path, np.asarray(images), np.asarray(labels))
        return images_path, labels_path

    return write
