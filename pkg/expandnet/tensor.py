from __future__ import annotations

import logging
from pathlib import Path
from typing import BinaryIO, Iterable, Literal, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DataFormatError, ShapeError

logger = logging.getLogger(__name__)

Tensor = np.ndarray
DEFAULT_DTYPE = np.float64

_DTYPE_CODES = {
    np.dtype("<f8"): 0,
    np.dtype("<f4"): 1,
    np.dtype("<i8"): 2,
}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}
_BUNDLE_MAGIC = b"XNTB"


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def child_rng(rng: np.random.Generator) -> np.random.Generator:
    """Draw a fresh independent stream from a master generator"""
    return make_rng(int(rng.integers(0, 2**63 - 1)))


def resolve_dtype(name: str) -> np.dtype:
    if name not in ("float64", "float32"):
        raise ShapeError(f"Unsupported dtype {name!r}; use float64 or float32")
    return np.dtype(name)


def _pad_hw(x: Tensor, padding: int, value: float = 0.0) -> Tensor:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=value)


def _windows(xp: Tensor, kh: int, kw: int, stride: int) -> Tensor:
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"Kernel {kh}x{kw} larger than padded input {tuple(xp.shape[2:])}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# weight [out, in, kh, kw] slides over [N, C, H, W] images without a kernel flip
def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d input {tuple(x.shape)} incompatible with weight {tuple(weight.shape)}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    win = _windows(_pad_hw(x, padding), weight.shape[2], weight.shape[3], stride)
    out = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(
    x: Tensor, weight: Tensor, grad_out: Tensor, stride: int = 1, padding: int = 0
) -> tuple[Tensor, Tensor]:
    """Gradients of conv2d with respect to its input and its weight"""
    _, _, kh, kw = weight.shape
    xp = _pad_hw(x, padding)
    win = _windows(xp, kh, kw, stride)
    if grad_out.shape[2:] != win.shape[2:4] or grad_out.shape[:2] != (x.shape[0], weight.shape[0]):
        raise ShapeError(f"conv2d gradient {tuple(grad_out.shape)} does not match output of {tuple(x.shape)}")
    d_weight = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))

    ho, wo = grad_out.shape[2:]
    d_cols = np.tensordot(grad_out, weight, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
    d_xp = np.zeros_like(xp)
    row_end = stride * (ho - 1) + 1
    col_end = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            d_xp[:, :, i:i + row_end:stride, j:j + col_end:stride] += d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    h, w = x.shape[2:]
    d_x = d_xp[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(d_x), d_weight


def max_pool2d(x: Tensor, kh: int, kw: int, stride: int, padding: int = 0) -> tuple[Tensor, Tensor]:
    """Returns the pooled tensor and the flat in-window argmax used by the backward pass"""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects [N,C,H,W], got {tuple(x.shape)}")
    win = _windows(_pad_hw(x, padding, value=-np.inf), kh, kw, stride)
    n, c, ho, wo = win.shape[:4]
    flat = win.reshape(n, c, ho, wo, kh * kw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def max_pool2d_backward(
    grad_out: Tensor, arg: Tensor, x_shape: tuple[int, ...], kh: int, kw: int, stride: int, padding: int = 0
) -> Tensor:
    n, c, h, w = x_shape
    ho, wo = grad_out.shape[2:]
    d_xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=grad_out.dtype)
    nn, cc, ii, jj = np.indices((n, c, ho, wo), sparse=True)
    rows = ii * stride + arg // kw
    cols = jj * stride + arg % kw
    np.add.at(d_xp, (nn, cc, rows, cols), grad_out)
    return d_xp[:, :, padding:padding + h, padding:padding + w]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def reduce(t: Tensor, axes: Iterable[int], kind: Literal["sum", "mean", "max"]) -> Tensor:
    axes = list(axes)
    normalized = []
    for axis in axes:
        if not -t.ndim <= axis < t.ndim:
            raise ShapeError(f"Axis {axis} invalid for tensor of shape {tuple(t.shape)}")
        normalized.append(axis % t.ndim)
    if len(set(normalized)) != len(normalized):
        raise ShapeError(f"Reduction axes must be distinct, got {axes}")
    reducers = {"sum": np.sum, "mean": np.mean, "max": np.max}
    if kind not in reducers:
        raise ShapeError(f"Unknown reduction {kind!r}")
    return reducers[kind](t, axis=tuple(normalized))


# -- binary layout -----------------------------------------------------------
# tensor  := dtype:u8  rank:u32  extents:u64[rank]  values (little-endian, C order)
# bundle  := b"XNTB"  count:u32  { name_len:u32  name:utf-8  tensor }*


def _read_exact(fh: BinaryIO, size: int, what: str) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise DataFormatError(f"Truncated tensor data while reading {what}")
    return data


def write_tensor(fh: BinaryIO, t: Tensor) -> None:
    dtype = t.dtype.newbyteorder("<")
    if dtype not in _DTYPE_CODES:
        raise ShapeError(f"Cannot serialize dtype {t.dtype}")
    fh.write(np.array([_DTYPE_CODES[dtype]], dtype="<u1").tobytes())
    fh.write(np.array([t.ndim], dtype="<u4").tobytes())
    fh.write(np.array(t.shape, dtype="<u8").tobytes())
    fh.write(np.ascontiguousarray(t, dtype=dtype).tobytes())


def read_tensor(fh: BinaryIO) -> Tensor:
    code = int(np.frombuffer(_read_exact(fh, 1, "dtype code"), dtype="<u1")[0])
    if code not in _CODE_DTYPES:
        raise DataFormatError(f"Unknown tensor dtype code {code}")
    dtype = _CODE_DTYPES[code]
    rank = int(np.frombuffer(_read_exact(fh, 4, "rank"), dtype="<u4")[0])
    shape = tuple(int(v) for v in np.frombuffer(_read_exact(fh, 8 * rank, "extents"), dtype="<u8"))
    count = int(np.prod(shape, dtype=np.int64))
    values = np.frombuffer(_read_exact(fh, count * dtype.itemsize, "values"), dtype=dtype)
    return values.reshape(shape).astype(dtype.newbyteorder("="))


def save_tensors(path: str | Path, tensors: Mapping[str, Tensor]) -> None:
    with open(path, "wb") as fh:
        fh.write(_BUNDLE_MAGIC)
        fh.write(np.array([len(tensors)], dtype="<u4").tobytes())
        for name in sorted(tensors):
            encoded = name.encode("utf-8")
            fh.write(np.array([len(encoded)], dtype="<u4").tobytes())
            fh.write(encoded)
            write_tensor(fh, tensors[name])


def load_tensors(path: str | Path) -> dict[str, Tensor]:
    with open(path, "rb") as fh:
        if fh.read(4) != _BUNDLE_MAGIC:
            raise DataFormatError(f"{path} is not a tensor bundle")
        count = int(np.frombuffer(_read_exact(fh, 4, "entry count"), dtype="<u4")[0])
        tensors = {}
        for _ in range(count):
            size = int(np.frombuffer(_read_exact(fh, 4, "name length"), dtype="<u4")[0])
            name = _read_exact(fh, size, "name").decode("utf-8")
            tensors[name] = read_tensor(fh)
    logger.debug("Loaded %d tensors from %s", len(tensors), path)
    return tensors
