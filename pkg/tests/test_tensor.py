import io

import numpy as np
import pytest

from expandnet.exceptions import DataFormatError, ShapeError
from expandnet.tensor import (
    child_rng,
    conv2d,
    conv2d_backward,
    load_tensors,
    make_rng,
    matmul,
    max_pool2d,
    max_pool2d_backward,
    output_extent,
    read_tensor,
    reduce,
    save_tensors,
    write_tensor,
)


def naive_conv(x, w, stride, padding):
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, _, h, wd = xp.shape
    f, _, kh, kw = w.shape
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    out[b, o, i, j] = np.sum(xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw] * w[o])
    return out


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 2), (3, 1)])
def test_conv2d_matches_naive_loop(rng, stride, padding):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 2))
    out = conv2d(x, w, stride, padding)
    assert out.shape == (2, 4, output_extent(7, 3, stride, padding), output_extent(6, 2, stride, padding))
    np.testing.assert_allclose(out, naive_conv(x, w, stride, padding), atol=1e-12)


def test_conv2d_is_cross_correlation():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 0, 0] = 1.0
    w = np.arange(9, dtype=float).reshape(1, 1, 3, 3)
    assert conv2d(x, w)[0, 0, 0, 0] == 0.0


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (2, 0)])
def test_conv2d_backward_is_adjoint(rng, stride, padding):
    x = rng.normal(size=(2, 2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    g = rng.normal(size=conv2d(x, w, stride, padding).shape)
    dx, dw = conv2d_backward(x, w, g, stride, padding)
    inner = np.sum(conv2d(x, w, stride, padding) * g)
    assert np.isclose(np.sum(x * dx), inner)
    assert np.isclose(np.sum(w * dw), inner)


def test_conv2d_rejects_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        conv2d(rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 3, 3, 3)))


def test_conv2d_rejects_kernel_larger_than_input(rng):
    with pytest.raises(ShapeError):
        conv2d(rng.normal(size=(1, 1, 2, 2)), rng.normal(size=(1, 1, 3, 3)))


def test_max_pool_values_and_backward():
    x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
    out, arg = max_pool2d(x, 2, 2, 2)
    np.testing.assert_array_equal(out[0, 0], [[5, 7], [13, 15]])
    dx = max_pool2d_backward(np.ones_like(out), arg, x.shape, 2, 2, 2)
    expected = np.zeros((4, 4))
    expected[[1, 1, 3, 3], [1, 3, 1, 3]] = 1.0
    np.testing.assert_array_equal(dx[0, 0], expected)


def test_max_pool_overlapping_windows_accumulate():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = 5.0
    out, arg = max_pool2d(x, 2, 2, 1)
    np.testing.assert_array_equal(out[0, 0], [[5, 5], [5, 5]])
    dx = max_pool2d_backward(np.ones_like(out), arg, x.shape, 2, 2, 1)
    assert dx[0, 0, 1, 1] == 4.0
    assert dx.sum() == 4.0


def test_max_pool_padding_ignores_border():
    x = -np.ones((1, 1, 2, 2))
    out, _ = max_pool2d(x, 2, 2, 2, padding=1)
    np.testing.assert_array_equal(out[0, 0], -np.ones((2, 2)))


def test_matmul_and_reduce_errors(rng):
    with pytest.raises(ShapeError):
        matmul(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))
    t = rng.normal(size=(2, 3, 4))
    np.testing.assert_allclose(reduce(t, [0, -1], "sum"), t.sum(axis=(0, 2)))
    assert reduce(t, [1], "max").shape == (2, 4)
    with pytest.raises(ShapeError):
        reduce(t, [3], "mean")
    with pytest.raises(ShapeError):
        reduce(t, [1, -2], "mean")
    with pytest.raises(ShapeError):
        reduce(t, [0], "median")


def test_rng_streams_are_reproducible():
    a, b = make_rng(5), make_rng(5)
    np.testing.assert_array_equal(a.normal(size=4), b.normal(size=4))
    np.testing.assert_array_equal(child_rng(a).normal(size=3), child_rng(b).normal(size=3))


@pytest.mark.parametrize("dtype", [np.float64, np.float32, np.int64])
def test_tensor_binary_layout(dtype):
    t = np.arange(6, dtype=dtype).reshape(2, 3)
    buf = io.BytesIO()
    write_tensor(buf, t)
    raw = buf.getvalue()
    assert raw[0] == {np.float64: 0, np.float32: 1, np.int64: 2}[dtype]
    assert int.from_bytes(raw[1:5], "little") == 2
    assert int.from_bytes(raw[5:13], "little") == 2
    assert int.from_bytes(raw[13:21], "little") == 3
    assert len(raw) == 21 + t.nbytes
    back = read_tensor(io.BytesIO(raw))
    assert back.dtype == t.dtype
    np.testing.assert_array_equal(back, t)


def test_read_tensor_rejects_truncated_and_unknown_code():
    buf = io.BytesIO()
    write_tensor(buf, np.ones(3))
    with pytest.raises(DataFormatError):
        read_tensor(io.BytesIO(buf.getvalue()[:-1]))
    with pytest.raises(DataFormatError):
        read_tensor(io.BytesIO(b"\x09" + buf.getvalue()[1:]))


def test_tensor_bundle(tmp_path, rng):
    tensors = {"0.weight": rng.normal(size=(2, 3)), "0.bias": np.zeros(2)}
    save_tensors(tmp_path / "b.xnt", tensors)
    loaded = load_tensors(tmp_path / "b.xnt")
    assert set(loaded) == set(tensors)
    for name in tensors:
        np.testing.assert_array_equal(loaded[name], tensors[name])
    (tmp_path / "bad.xnt").write_bytes(b"NOPE")
    with pytest.raises(DataFormatError):
        load_tensors(tmp_path / "bad.xnt")
