"""Dense float32 tensors, numeric kernels, and the on-disk tensor format.

Tensors are plain numpy float32 arrays in C (row-major) order. All kernels
are pure functions of their inputs and never mutate them, so they are safe
to call concurrently. Convolution is cross-correlation (no kernel flip)
and accumulates in 32-bit floats.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, ShapeError

TENSOR_MAGIC = b"QTENSOR1"


def as_tensor(values, name: str = "tensor") -> np.ndarray:
    """Coerce to a contiguous float32 array and validate basic invariants."""
    arr = np.ascontiguousarray(values, dtype=np.float32)
    if arr.ndim < 1 or any(d < 1 for d in arr.shape):
        raise ShapeError(
            f"{name}: rank must be >= 1 with every dimension >= 1, got shape {tuple(arr.shape)}"
        )
    return arr


def tensor_bytes(arr: np.ndarray) -> bytes:
    """Serialized form: magic, u32 LE rank, u32 LE dims, f32 LE values (row-major)."""
    arr = as_tensor(arr)
    header = TENSOR_MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f4", copy=False).tobytes(order="C")


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(tensor_bytes(arr))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:8] != TENSOR_MAGIC:
        raise FormatError(f"{path}: not a QTENSOR1 file")
    (rank,) = struct.unpack_from("<I", data, 8)
    if rank < 1 or rank > 32:
        raise FormatError(f"{path}: implausible tensor rank {rank}")
    if len(data) < 12 + 4 * rank:
        raise FormatError(f"{path}: truncated dimension header")
    dims = struct.unpack_from(f"<{rank}I", data, 12)
    if any(d < 1 for d in dims):
        raise FormatError(f"{path}: zero-sized dimension in {dims}")
    count = int(np.prod(dims))
    offset = 12 + 4 * rank
    if len(data) != offset + 4 * count:
        raise FormatError(
            f"{path}: payload holds {(len(data) - offset) // 4} values, header expects {count}"
        )
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
    arr = arr.astype(np.float32).reshape(dims)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: tensor contains non-finite values")
    return arr


def _as_pair(value, name: str) -> tuple[int, int]:
    if isinstance(value, (int, np.integer)):
        return int(value), int(value)
    pair = tuple(int(v) for v in value)
    if len(pair) != 2:
        raise ShapeError(f"{name} must be an int or a pair, got {value!r}")
    return pair


def conv2d(x, w, b, stride=(1, 1), padding=(0, 0)) -> np.ndarray:
    """2-D cross-correlation. x: NCHW, w: OIHW, b: (O,). Zero padding only."""
    x = as_tensor(x, "input")
    w = as_tensor(w, "weights")
    b = as_tensor(b, "bias")
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be NCHW (rank 4), got shape {tuple(x.shape)}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d: weights must be OIHW (rank 4), got shape {tuple(w.shape)}")
    n, c, h, wd = x.shape
    o, i, kh, kw = w.shape
    if c != i:
        raise ShapeError(f"conv2d: input channels ({c}) != weight input channels ({i})")
    if b.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {tuple(b.shape)} != output channels ({o},)")
    sh, sw = _as_pair(stride, "stride")
    ph, pw = _as_pair(padding, "padding")
    if sh < 1 or sw < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got ({sh}, {sw})")
    if ph < 0 or pw < 0:
        raise ShapeError(f"conv2d: padding must be >= 0, got ({ph}, {pw})")
    if kh > h + 2 * ph or kw > wd + 2 * pw:
        raise ShapeError(
            f"conv2d: kernel ({kh}x{kw}) larger than padded input ({h + 2 * ph}x{wd + 2 * pw})"
        )
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(n * ho * wo, c * kh * kw)
    out = cols @ w.reshape(o, -1).T + b
    return np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))


def dense(x, w, b) -> np.ndarray:
    """Fully connected layer. x: (N, F), w: (O, F), b: (O,)."""
    x = as_tensor(x, "input")
    w = as_tensor(w, "weights")
    b = as_tensor(b, "bias")
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(
            f"dense: input and weights must be rank 2, got {tuple(x.shape)} and {tuple(w.shape)}"
        )
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense: input features ({x.shape[1]}) != weight features ({w.shape[1]})")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"dense: bias shape {tuple(b.shape)} != output features ({w.shape[0]},)")
    return x @ w.T + b


def relu(x) -> np.ndarray:
    x = as_tensor(x, "input")
    return np.maximum(x, np.float32(0.0))


def _pool(x, window, stride, reducer, name: str) -> np.ndarray:
    x = as_tensor(x, "input")
    if x.ndim != 4:
        raise ShapeError(f"{name}: input must be NCHW (rank 4), got shape {tuple(x.shape)}")
    wh, ww = _as_pair(window, "window")
    sh, sw = _as_pair(stride, "stride")
    if wh < 1 or ww < 1 or sh < 1 or sw < 1:
        raise ShapeError(f"{name}: window and stride must be >= 1")
    _, _, h, w = x.shape
    if wh > h or ww > w:
        raise ShapeError(f"{name}: window ({wh}x{ww}) larger than input ({h}x{w})")
    win = sliding_window_view(x, (wh, ww), axis=(2, 3))[:, :, ::sh, ::sw]
    return np.ascontiguousarray(reducer(win, axis=(-2, -1)))


def maxpool2d(x, window, stride) -> np.ndarray:
    return _pool(x, window, stride, np.max, "maxpool2d")


def avgpool2d(x, window, stride) -> np.ndarray:
    return _pool(x, window, stride, np.mean, "avgpool2d")


def global_avg_pool(x) -> np.ndarray:
    """Reduce H and W to 1x1 by averaging."""
    x = as_tensor(x, "input")
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: input must be NCHW (rank 4), got {tuple(x.shape)}")
    return x.mean(axis=(2, 3), keepdims=True, dtype=np.float32)


def add(a, b) -> np.ndarray:
    """Elementwise sum. Shapes must match exactly; no broadcasting."""
    a = as_tensor(a, "lhs")
    b = as_tensor(b, "rhs")
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return a + b
