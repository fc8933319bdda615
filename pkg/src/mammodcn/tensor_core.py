"""
Dense float64 tensors and the bilinear sampling kernel.

Tensors are plain ``numpy.ndarray`` objects in (batch, channel, row, col) axis
order, with at most 4 axes. Every gradient-checked path runs in double
precision.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import RejectedInput

logger = logging.getLogger(__name__)

Tensor = np.ndarray
Axes = Union[None, int, Sequence[int]]

MAX_RANK = 4


@dataclass(frozen=True)
class Point2:
    row: float
    col: float

    def __post_init__(self):
        if not (math.isfinite(self.row) and math.isfinite(self.col)):
            raise RejectedInput(f"non-finite coordinate ({self.row}, {self.col})")


def as_tensor(x, ndim: Optional[int] = None, name: str = "tensor") -> Tensor:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim > MAX_RANK:
        raise RejectedInput(f"{name} has {arr.ndim} axes; at most {MAX_RANK} allowed")
    if ndim is not None and arr.ndim != ndim:
        raise RejectedInput(f"{name} must have {ndim} axes, got shape {arr.shape}")
    if any(extent < 1 for extent in arr.shape):
        raise RejectedInput(f"{name} has an empty extent: {arr.shape}")
    return arr


def check_same_shape(a: Tensor, b: Tensor, what: str = "operands"):
    if a.shape != b.shape:
        raise RejectedInput(f"shape mismatch between {what}: {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    check_same_shape(a, b)
    return a + b


def mul_scalar(a, s: float) -> Tensor:
    return as_tensor(a) * float(s)


def relu(x) -> Tensor:
    return np.maximum(as_tensor(x), 0.0)


def relu_grad(x) -> Tensor:
    # Derivative taken as 0 at x == 0.
    return (as_tensor(x) > 0).astype(np.float64)


def sum_axes(x, axis: Axes = None) -> Union[float, Tensor]:
    return np.sum(as_tensor(x), axis=_normalize_axes(axis))


def mean_axes(x, axis: Axes = None) -> Union[float, Tensor]:
    return np.mean(as_tensor(x), axis=_normalize_axes(axis))


def _normalize_axes(axis: Axes):
    if axis is None or isinstance(axis, int):
        return axis
    return tuple(axis)


def bilinear_corners(rows: np.ndarray, cols: np.ndarray, height: int, width: int):
    """
    Yield (row_index, col_index, weight, d_weight/d_row, d_weight/d_col) for the
    four integer neighbours of each sample point.

    Neighbours outside the map get weight 0 (zero padding); their indices are
    clipped so they can still be used for gathering.
    """
    if not (np.all(np.isfinite(rows)) and np.all(np.isfinite(cols))):
        raise RejectedInput("non-finite sampling coordinate")
    # Every neighbour of a point beyond one pixel of padding is outside anyway.
    rows = np.clip(rows, -2.0, height + 1.0)
    cols = np.clip(cols, -2.0, width + 1.0)
    r0 = np.floor(rows)
    c0 = np.floor(cols)
    fr = rows - r0
    fc = cols - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)

    for dr, wr, dwr in ((0, 1.0 - fr, -1.0), (1, fr, 1.0)):
        for dc, wc, dwc in ((0, 1.0 - fc, -1.0), (1, fc, 1.0)):
            ri = r0 + dr
            ci = c0 + dc
            inside = (ri >= 0) & (ri < height) & (ci >= 0) & (ci < width)
            yield (
                np.clip(ri, 0, height - 1),
                np.clip(ci, 0, width - 1),
                np.where(inside, wr * wc, 0.0),
                np.where(inside, dwr * wc, 0.0),
                np.where(inside, wr * dwc, 0.0),
            )


def bilinear_gather(x: Tensor, rows, cols) -> Tensor:
    """
    Sample every channel of `x` (shape [C, H, W]) at the real-valued points
    (`rows`, `cols`), which must have equal shapes S. Returns [C, *S].
    """
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    if rows.shape != cols.shape:
        raise RejectedInput(f"coordinate shapes differ: {rows.shape} vs {cols.shape}")
    _, height, width = x.shape
    out = np.zeros((x.shape[0],) + rows.shape)
    for ri, ci, w, _, _ in bilinear_corners(rows, cols, height, width):
        out += x[:, ri, ci] * w
    return out


def bilinear_gather_backward(
    x: Tensor, rows, cols, upstream: Tensor
) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """
    Backward of `bilinear_gather`: returns gradients with respect to `x`,
    `rows` and `cols` given the upstream gradient of shape [C, *S]. The
    coordinate gradients are summed over channels.
    """
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    n_channels, height, width = x.shape
    if upstream.shape != (n_channels,) + rows.shape:
        raise RejectedInput(
            f"upstream shape {upstream.shape} does not match "
            f"{(n_channels,) + rows.shape}"
        )
    plane = height * width
    channel_base = (np.arange(n_channels) * plane).reshape(
        (n_channels,) + (1,) * rows.ndim
    )
    flat_index = []
    flat_weight = []
    grad_rows = np.zeros(rows.shape)
    grad_cols = np.zeros(cols.shape)
    for ri, ci, w, dw_dr, dw_dc in bilinear_corners(rows, cols, height, width):
        values = x[:, ri, ci]
        grad_rows += np.sum(upstream * values * dw_dr, axis=0)
        grad_cols += np.sum(upstream * values * dw_dc, axis=0)
        flat_index.append((channel_base + ri * width + ci).ravel())
        flat_weight.append((upstream * w).ravel())
    grad_x = np.bincount(
        np.concatenate(flat_index),
        weights=np.concatenate(flat_weight),
        minlength=n_channels * plane,
    ).reshape(x.shape)
    return grad_x, grad_rows, grad_cols


def bilinear_sample(x, p: Point2) -> float:
    x = as_tensor(x, ndim=2, name="map")
    (value,) = bilinear_gather(x[None], [p.row], [p.col])[0]
    return float(value)


def bilinear_sample_grad(x, p: Point2, upstream: float) -> Tuple[Tensor, Point2]:
    x = as_tensor(x, ndim=2, name="map")
    grad_x, grad_rows, grad_cols = bilinear_gather_backward(
        x[None], [p.row], [p.col], np.full((1, 1), float(upstream))
    )
    return grad_x[0], Point2(float(grad_rows[0]), float(grad_cols[0]))


def conv_output_extent(extent: int, kernel: int, stride: int, pad: int) -> int:
    span = extent + 2 * pad - kernel
    if span < 0:
        raise RejectedInput(
            f"kernel {kernel} does not fit extent {extent} with padding {pad}"
        )
    return span // stride + 1


def im2col(x: Tensor, kh: int, kw: int, stride: int, pad: int) -> Tensor:
    """Unfold [C, H, W] into columns [C*kh*kw, H'*W'] (channel-major rows)."""
    n_channels = x.shape[0]
    out_h = conv_output_extent(x.shape[1], kh, stride, pad)
    out_w = conv_output_extent(x.shape[2], kw, stride, pad)
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))
    windows = windows[
        :,
        : (out_h - 1) * stride + 1 : stride,
        : (out_w - 1) * stride + 1 : stride,
    ]
    return windows.transpose(0, 3, 4, 1, 2).reshape(
        n_channels * kh * kw, out_h * out_w
    )


def col2im(
    cols: Tensor, x_shape: Tuple[int, int, int], kh: int, kw: int, stride: int, pad: int
) -> Tensor:
    """Adjoint of `im2col`: fold columns back, summing overlapping taps."""
    n_channels, height, width = x_shape
    out_h = conv_output_extent(height, kh, stride, pad)
    out_w = conv_output_extent(width, kw, stride, pad)
    taps = cols.reshape(n_channels, kh, kw, out_h, out_w)
    padded = np.zeros((n_channels, height + 2 * pad, width + 2 * pad))
    for a in range(kh):
        for b in range(kw):
            padded[
                :,
                a : a + (out_h - 1) * stride + 1 : stride,
                b : b + (out_w - 1) * stride + 1 : stride,
            ] += taps[:, a, b]
    return padded[:, pad : pad + height, pad : pad + width]
