import math

import numpy as np
import pytest
from pydantic import ValidationError

from expandnet.exceptions import ConfigError, DataFormatError, ExpandNetError, ShapeError
from expandnet.layers import (
    adapt_to_data,
    all_conv_transform,
    backward,
    build_store,
    count_params,
    cross_entropy,
    forward,
    he_init,
    infer_shapes,
    load_arch,
    param_shapes,
    rebuild,
    split_key,
    with_unit_widths,
)
from expandnet.schemas import ArchSpec
from expandnet.tensor import make_rng


def test_narrow_shape_pass_and_param_count():
    arch = load_arch("gfcnn-narrow")
    shapes = infer_shapes(arch)
    assert shapes[3] == (8, 6, 6)
    assert shapes[11] == (8, 1, 1)
    assert shapes[12] == (8,)
    assert shapes[-1] == (2,)
    conv = 8 * 1 * 9 + 8 + 2 * (8 * 8 * 9 + 8)
    bn = 3 * 16 + 32
    head = 16 * 8 + 16 + 2 * 16 + 2
    assert count_params(arch) == conv + bn + head == 1506


def test_shipped_configs_validate():
    gfcnn = load_arch("gfcnn")
    fc1 = next(layer for layer in gfcnn.layers if layer.name == "fc1")
    assert fc1.in_features == 3168
    assert gfcnn.num_classes == 10
    assert load_arch("gfcnn-allconv").layers[-1].kind == "classifier-conv"
    assert count_params(load_arch("vgg-a")) > 0


def test_declared_in_features_are_checked():
    arch = load_arch("gfcnn-narrow")
    layers = [layer.model_copy() for layer in arch.layers]
    layers[13] = layers[13].model_copy(update={"in_features": 9})
    with pytest.raises(ShapeError, match="declares 9"):
        rebuild(arch, layers=layers)


def test_arch_validation_rules(tiny_arch):
    data = tiny_arch.model_dump()
    assert tiny_arch.layers[-1].width == 3

    no_classifier = dict(data, layers=data["layers"][:-2])
    with pytest.raises(ValidationError):
        ArchSpec.model_validate(no_classifier)

    coupled = [dict(layer) for layer in data["layers"]]
    coupled[0]["couple_group"] = "g"
    coupled[4]["couple_group"] = "g"
    with pytest.raises(ValidationError, match="unequal widths"):
        ArchSpec.model_validate(dict(data, layers=coupled))

    with pytest.raises(ConfigError):
        rebuild(tiny_arch, num_classes=1)


def test_missing_arch_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_arch("no-such-arch")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_arch(str(tmp_path / "bad.json"))


def test_width_helpers():
    arch = load_arch("gfcnn-narrow")
    assert with_unit_widths(arch).widths() == [1, 1, 1, 1]
    adapted = adapt_to_data(arch, (3, 12, 12), 10)
    shapes = param_shapes(adapted)
    assert shapes["0.weight"] == (8, 3, 3, 3)
    assert shapes["16.weight"] == (10, 16)
    assert adapt_to_data(arch, (1, 12, 12), 2) is arch


def test_forward_shapes_and_modes(tiny_arch, tiny_store, random_batch):
    running = tiny_store.buffers["1.running_mean"].copy()
    logits, cache = forward(tiny_arch, tiny_store, random_batch, mode="eval")
    assert logits.shape == (5, 3)
    assert len(cache.outputs) == len(tiny_arch.layers)
    np.testing.assert_array_equal(tiny_store.buffers["1.running_mean"], running)

    _, cache = forward(tiny_arch, tiny_store, random_batch, mode="train")
    assert not np.allclose(tiny_store.buffers["1.running_mean"], running)
    normalized = (cache.outputs[1] - tiny_store.params["1.shift"].reshape(1, -1, 1, 1)) / tiny_store.params[
        "1.scale"
    ].reshape(1, -1, 1, 1)
    np.testing.assert_allclose(normalized.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)

    with pytest.raises(ShapeError):
        forward(tiny_arch, tiny_store, random_batch[:, :1])
    with pytest.raises(ConfigError):
        forward(tiny_arch, tiny_store, random_batch, mode="test")


def test_running_stats_follow_momentum(tiny_arch, rng):
    store = build_store(tiny_arch)
    he_init(store, rng)
    x = rng.normal(size=(4, 2, 6, 6))
    _, cache = forward(tiny_arch, store, x, mode="train")
    conv_out = cache.outputs[0]
    count = conv_out.size // conv_out.shape[1]
    np.testing.assert_allclose(store.buffers["1.running_mean"], 0.1 * conv_out.mean(axis=(0, 2, 3)))
    unbiased = conv_out.var(axis=(0, 2, 3)) * count / (count - 1)
    np.testing.assert_allclose(store.buffers["1.running_var"], 0.9 + 0.1 * unbiased)


def test_backward_needs_train_cache(tiny_arch, tiny_store, random_batch):
    logits, cache = forward(tiny_arch, tiny_store, random_batch, mode="eval")
    with pytest.raises(ExpandNetError):
        backward(cache, tiny_store, np.zeros_like(logits))
    logits, cache = forward(tiny_arch, tiny_store, random_batch, mode="train")
    with pytest.raises(ShapeError):
        backward(cache, tiny_store, np.zeros((5, 4)))
    grads = backward(cache, tiny_store, np.zeros_like(logits))
    assert set(grads) == set(tiny_store.params)
    assert all(grads[k].shape == tiny_store.params[k].shape for k in grads)


def test_cross_entropy_values():
    loss, grad = cross_entropy(np.zeros((2, 2)), np.array([0, 1]))
    assert math.isclose(loss, math.log(2))
    np.testing.assert_allclose(grad, [[-0.25, 0.25], [0.25, -0.25]])
    loss, _ = cross_entropy(np.array([[1000.0, 0.0]]), np.array([0]))
    assert loss == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DataFormatError):
        cross_entropy(np.zeros((1, 2)), np.array([2]))


def test_he_init_statistics():
    arch = load_arch("gfcnn-narrow")
    store = he_init(build_store(arch), make_rng(0))
    w = store.params["4.weight"]
    assert w.std() == pytest.approx(math.sqrt(2.0 / 72), rel=0.15)
    assert np.all(store.params["4.bias"] == 0)
    assert np.all(store.params["5.scale"] == 1)
    assert np.all(store.buffers["5.running_var"] == 1)
    assert {split_key(k)[1] for k in store.params} == {"weight", "bias", "scale", "shift"}


def test_all_conv_transform():
    arch = load_arch("gfcnn-narrow")
    allconv = all_conv_transform(arch)
    kinds = [layer.kind for layer in allconv.layers]
    assert "maxpool" not in kinds and "linear" not in kinds and "flatten" not in kinds
    assert kinds[-1] == "classifier-conv"
    assert len(allconv.layers) == 19
    names = [layer.name for layer in allconv.layers if layer.name]
    assert {"pool1-conv", "pool2-conv", "pool3-conv"} <= set(names)
    assert allconv.name == "gfcnn-narrow-allconv"
    assert infer_shapes(allconv)[-1] == (2,)
