"""Dense tensor kernels with hand-written gradients.

Tensors are plain numpy arrays in row-major, channel-major layout: a single
image is ``(C, H, W)`` and a batch carries a leading ``N`` axis.  The array
dtype is the precision flag: float32 for training, float64 for gradient
checks.

Convolution is cross-correlation (the kernel is not flipped).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, FormatError

PRECISIONS = {"single": np.float32, "double": np.float64}


def dtype_for(precision):
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}, expected single or double") from None


def as_tensor(data, precision="double"):
    """Copy ``data`` into a validated tensor of the requested precision."""
    arr = np.array(data, dtype=dtype_for(precision))
    if arr.ndim < 1:
        raise DimensionError("tensor rank must be >= 1")
    if 0 in arr.shape:
        raise DimensionError(f"tensor extents must be >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


@dataclass(frozen=True)
class ConvSpec:
    filter_size: int
    stride: int
    in_channels: int
    out_channels: int
    padding: int = 0

    def __post_init__(self):
        if self.filter_size < 1 or self.filter_size % 2 == 0:
            raise DimensionError(f"filter_size must be an odd positive integer, got {self.filter_size}")
        if self.stride < 1:
            raise DimensionError(f"stride must be positive, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise DimensionError("channel counts must be positive")
        if self.padding < 0:
            raise DimensionError(f"padding must be nonnegative, got {self.padding}")

    @property
    def weight_shape(self):
        k = self.filter_size
        return (self.out_channels, self.in_channels, k, k)

    def output_extent(self, extent):
        return (extent + 2 * self.padding - self.filter_size) // self.stride + 1

    def output_shape(self, height, width):
        ho, wo = self.output_extent(height), self.output_extent(width)
        if height + 2 * self.padding < self.filter_size or ho < 1:
            raise DimensionError(f"height {height} too small for filter {self.filter_size}")
        if width + 2 * self.padding < self.filter_size or wo < 1:
            raise DimensionError(f"width {width} too small for filter {self.filter_size}")
        return (self.out_channels, ho, wo)


def _batched(x, rank):
    """Add a leading batch axis to an unbatched input; report whether we did."""
    if x.ndim == rank - 1:
        return x[None], True
    if x.ndim != rank:
        raise DimensionError(f"expected rank {rank - 1} or {rank} input, got shape {x.shape}")
    return x, False


def _im2col(x, spec):
    n, c, h, w = x.shape
    k, s, p = spec.filter_size, spec.stride, spec.padding
    _, ho, wo = spec.output_shape(h, w)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _check_conv_shapes(x, weights, spec):
    if x.shape[1] != spec.in_channels:
        raise DimensionError(f"channel axis: input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if weights.shape != spec.weight_shape:
        names = ("out_channels", "in_channels", "kernel height", "kernel width")
        for name, got, want in zip(names, weights.shape, spec.weight_shape):
            if got != want:
                raise DimensionError(f"weights {name} axis: got {got}, expected {want}")
        raise DimensionError(f"weights shape {weights.shape} != {spec.weight_shape}")


def conv2d_forward(x, weights, bias, spec):
    """Cross-correlate ``x`` with ``weights`` and add a per-channel ``bias``.

    ``x`` is ``(C, H, W)`` or ``(N, C, H, W)``; ``bias`` may be None.
    """
    xb, squeeze = _batched(np.asarray(x), 4)
    _check_conv_shapes(xb, weights, spec)
    if bias is not None and bias.shape != (spec.out_channels,):
        raise DimensionError(f"bias axis: got shape {bias.shape}, expected ({spec.out_channels},)")
    cols, ho, wo = _im2col(xb, spec)
    out = cols @ weights.reshape(spec.out_channels, -1).T
    if bias is not None:
        out += bias
    out = out.reshape(xb.shape[0], ho, wo, spec.out_channels).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    return out[0] if squeeze else out


def conv2d_backward(x, weights, spec, grad_out):
    """Return ``(grad_input, grad_weights, grad_bias)`` for :func:`conv2d_forward`."""
    xb, squeeze = _batched(np.asarray(x), 4)
    gb_, _ = _batched(np.asarray(grad_out), 4)
    _check_conv_shapes(xb, weights, spec)
    n, c, h, w = xb.shape
    _, ho, wo = spec.output_shape(h, w)
    if gb_.shape != (n, spec.out_channels, ho, wo):
        raise DimensionError(f"grad_out shape {gb_.shape} != forward output shape {(n, spec.out_channels, ho, wo)}")
    cols, _, _ = _im2col(xb, spec)
    k, s, p = spec.filter_size, spec.stride, spec.padding

    go = gb_.transpose(0, 2, 3, 1).reshape(-1, spec.out_channels)
    grad_w = (go.T @ cols).reshape(weights.shape)
    grad_b = go.sum(axis=0)
    gcols = (go @ weights.reshape(spec.out_channels, -1)).reshape(n, ho, wo, c, k, k)
    gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=gcols.dtype)
    for di in range(k):
        for dj in range(k):
            gxp[:, :, di:di + s * (ho - 1) + 1:s, dj:dj + s * (wo - 1) + 1:s] += \
                gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    grad_x = gxp[:, :, p:p + h, p:p + w] if p else gxp
    grad_x = np.ascontiguousarray(grad_x)
    return (grad_x[0] if squeeze else grad_x), grad_w, grad_b


@dataclass(frozen=True)
class PoolIndex:
    """Winner positions of a max-pool forward, as flat ``H*W`` offsets."""
    input_shape: tuple
    indices: np.ndarray
    squeezed: bool


def maxpool_forward(x, window, stride):
    """Per-window maximum; ties go to the lowest row-major position."""
    if window < 1 or stride < 1:
        raise DimensionError("window and stride must be >= 1")
    xb, squeeze = _batched(np.asarray(x), 4)
    n, c, h, w = xb.shape
    if window > h or window > w:
        raise DimensionError(f"pool window {window} larger than input extent {(h, w)}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    win = sliding_window_view(xb, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * stride + arg // window
    cols = np.arange(wo)[None, :] * stride + arg % window
    index = PoolIndex(xb.shape, rows * w + cols, squeeze)
    return (out[0] if squeeze else out), index


def maxpool_backward(index, grad_out):
    """Route ``grad_out`` back onto the winning input positions."""
    gb_ = np.asarray(grad_out)
    if index.squeezed:
        gb_ = gb_[None]
    if gb_.shape != index.indices.shape:
        raise DimensionError(f"grad_out shape {np.shape(grad_out)} does not match pool index {index.indices.shape}")
    n, c, h, w = index.input_shape
    offsets = (np.arange(n * c) * (h * w)).reshape(n, c, 1, 1)
    flat = np.bincount((index.indices + offsets).ravel(), weights=gb_.ravel(), minlength=n * c * h * w)
    grad = flat.astype(gb_.dtype, copy=False).reshape(n, c, h, w)
    return grad[0] if index.squeezed else grad


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul expects two matrices")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner axis mismatch: {a.shape[1]} vs {b.shape[0]}")
    return a @ b


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise DimensionError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def add(a, b):
    _same_shape(a, b)
    return a + b


def mul(a, b):
    """Hadamard product."""
    _same_shape(a, b)
    return a * b


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_grad(x):
    s = sigmoid(x)
    return s * (1 - s)


def tanh(x):
    return np.tanh(x)


def tanh_grad(x):
    t = np.tanh(x)
    return 1 - t * t


def relu(x):
    return np.maximum(x, 0)


def relu_grad(x):
    return (x > 0).astype(np.asarray(x).dtype)


# -- TEN1 files -------------------------------------------------------------

TEN1_MAGIC = b"TEN1"


def write_ten(path, array):
    """Write ``array`` as TEN1: magic, u32 rank, u32 extents, f32 payload (all LE)."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim < 1:
        arr = arr.reshape(1)
    header = TEN1_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_ten(path):
    data = Path(path).read_bytes()
    if data[:4] != TEN1_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 8:
        raise FormatError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", data, 4)
    if rank < 1 or len(data) < 8 + 4 * rank:
        raise FormatError(f"{path}: bad rank {rank}")
    shape = struct.unpack_from(f"<{rank}I", data, 8)
    if 0 in shape:
        raise FormatError(f"{path}: zero extent in {shape}")
    offset = 8 + 4 * rank
    count = int(np.prod(shape))
    if len(data) != offset + 4 * count:
        raise FormatError(f"{path}: payload has {len(data) - offset} bytes, expected {4 * count}")
    return np.frombuffer(data, dtype="<f4", offset=offset).reshape(shape).astype(np.float32)
