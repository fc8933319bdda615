"""
Plain convolution, deformable convolution and (deformable) position-sensitive
ROI pooling, each with an analytic backward pass.

Deformable convolution evaluates, for every output location p0,

    y(p0) = sum over taps pn of w(pn) * x(p0 + pn + dpn)

with x sampled bilinearly (zero outside the map). A single offset field is
shared by all input channels.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .detection import BBox
from .errors import RejectedInput
from .tensor_core import (
    Tensor,
    as_tensor,
    bilinear_corners,
    bilinear_gather,
    bilinear_gather_backward,
    col2im,
    conv_output_extent,
    im2col,
)

logger = logging.getLogger(__name__)

# DPS-ROI bin offsets move a bin by this fraction of the ROI size per unit offset.
ROI_OFFSET_SCALE = 0.1

# Each pooling bin averages a 2x2 grid of samples at its quarter points.
_SUBSAMPLE_POSITIONS = np.array([0.25, 0.75])

OffsetField = Tensor


@dataclass
class ConvParams:
    weights: Tensor
    bias: Tensor
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        self.weights = as_tensor(self.weights, ndim=4, name="weights")
        self.bias = as_tensor(self.bias, ndim=1, name="bias")
        c_out, _, kh, kw = self.weights.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise RejectedInput(f"kernel extents must be odd, got {kh}x{kw}")
        if self.bias.shape != (c_out,):
            raise RejectedInput(
                f"bias shape {self.bias.shape} does not match {c_out} output channels"
            )
        if self.stride < 1 or self.pad < 0:
            raise RejectedInput(f"invalid stride {self.stride} / pad {self.pad}")

    @property
    def kernel(self) -> Tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]

    def output_extents(self, x: Tensor) -> Tuple[int, int]:
        kh, kw = self.kernel
        return (
            conv_output_extent(x.shape[1], kh, self.stride, self.pad),
            conv_output_extent(x.shape[2], kw, self.stride, self.pad),
        )


def _check_input(x, params: ConvParams) -> Tensor:
    x = as_tensor(x, ndim=3, name="input")
    if x.shape[0] != params.weights.shape[1]:
        raise RejectedInput(
            f"input has {x.shape[0]} channels, weights expect "
            f"{params.weights.shape[1]}"
        )
    return x


def _apply_weights(cols: Tensor, params: ConvParams, out_h: int, out_w: int):
    c_out = params.weights.shape[0]
    y = params.weights.reshape(c_out, -1) @ cols + params.bias[:, None]
    return y.reshape(c_out, out_h, out_w)


def _weights_backward(cols: Tensor, params: ConvParams, grad_y: Tensor):
    c_out = params.weights.shape[0]
    g = grad_y.reshape(c_out, -1)
    grad_w = (g @ cols.T).reshape(params.weights.shape)
    grad_bias = g.sum(axis=1)
    grad_cols = params.weights.reshape(c_out, -1).T @ g
    return grad_w, grad_bias, grad_cols


def _check_grad_y(grad_y, expected_shape) -> Tensor:
    grad_y = np.asarray(grad_y, dtype=np.float64)
    if grad_y.shape != expected_shape:
        raise RejectedInput(
            f"output gradient shape {grad_y.shape} does not match {expected_shape}"
        )
    return grad_y


def conv2d(x, params: ConvParams) -> Tensor:
    x = _check_input(x, params)
    kh, kw = params.kernel
    out_h, out_w = params.output_extents(x)
    cols = im2col(x, kh, kw, params.stride, params.pad)
    return _apply_weights(cols, params, out_h, out_w)


def conv2d_backward(
    x, params: ConvParams, grad_y
) -> Tuple[Tensor, Tensor, Tensor]:
    x = _check_input(x, params)
    kh, kw = params.kernel
    out_h, out_w = params.output_extents(x)
    grad_y = _check_grad_y(grad_y, (params.weights.shape[0], out_h, out_w))
    cols = im2col(x, kh, kw, params.stride, params.pad)
    grad_w, grad_bias, grad_cols = _weights_backward(cols, params, grad_y)
    grad_x = col2im(grad_cols, x.shape, kh, kw, params.stride, params.pad)
    return grad_x, grad_w, grad_bias


def deform_sampling_grid(
    params: ConvParams, out_h: int, out_w: int, off: OffsetField
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Absolute sampling coordinates [kh*kw, H', W'] of every tap: regular grid
    position p0 + pn plus the learned displacement. Offsets are laid out as
    (row, col) pairs per tap, taps in row-major kernel order.
    """
    kh, kw = params.kernel
    tap_r, tap_c = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
    out_r = np.arange(out_h) * params.stride - params.pad
    out_c = np.arange(out_w) * params.stride - params.pad
    base_r = tap_r.reshape(-1, 1, 1) + out_r.reshape(1, -1, 1)
    base_c = tap_c.reshape(-1, 1, 1) + out_c.reshape(1, 1, -1)
    return base_r + off[0::2], base_c + off[1::2]


def _check_offsets(off, params: ConvParams, out_h: int, out_w: int) -> OffsetField:
    off = np.asarray(off, dtype=np.float64)
    kh, kw = params.kernel
    expected = (2 * kh * kw, out_h, out_w)
    if off.shape != expected:
        raise RejectedInput(f"offset field shape {off.shape} does not match {expected}")
    return off


def deform_conv_forward(x, params: ConvParams, off: OffsetField) -> Tensor:
    x = _check_input(x, params)
    out_h, out_w = params.output_extents(x)
    off = _check_offsets(off, params, out_h, out_w)
    rows, cols = deform_sampling_grid(params, out_h, out_w, off)
    sampled = bilinear_gather(x, rows, cols)
    return _apply_weights(sampled.reshape(-1, out_h * out_w), params, out_h, out_w)


def deform_conv_backward(
    x, params: ConvParams, off: OffsetField, grad_y
) -> Tuple[Tensor, Tensor, Tensor, OffsetField]:
    """Return (grad_x, grad_weights, grad_bias, grad_offsets)."""
    x = _check_input(x, params)
    out_h, out_w = params.output_extents(x)
    off = _check_offsets(off, params, out_h, out_w)
    grad_y = _check_grad_y(grad_y, (params.weights.shape[0], out_h, out_w))
    rows, cols = deform_sampling_grid(params, out_h, out_w, off)
    sampled = bilinear_gather(x, rows, cols)
    grad_w, grad_bias, grad_sampled = _weights_backward(
        sampled.reshape(-1, out_h * out_w), params, grad_y
    )
    grad_x, grad_rows, grad_cols = bilinear_gather_backward(
        x, rows, cols, grad_sampled.reshape(sampled.shape)
    )
    grad_off = np.empty_like(off)
    grad_off[0::2] = grad_rows
    grad_off[1::2] = grad_cols
    return grad_x, grad_w, grad_bias, grad_off


@dataclass
class Roi:
    """
    A region of interest in score-map coordinates, pooled into a k x k grid.

    `offsets` ([2, k, k], row then col) translate each bin by
    ROI_OFFSET_SCALE times the ROI height / width per unit offset.
    """

    box: BBox
    k: int
    offsets: Optional[Tensor] = None

    def __post_init__(self):
        if self.k < 1:
            raise RejectedInput(f"pooling grid size must be >= 1, got {self.k}")
        if not (self.box.height > 0 and self.box.width > 0):
            raise RejectedInput(f"ROI must have positive area: {self.box}")
        if self.offsets is not None:
            self.offsets = np.asarray(self.offsets, dtype=np.float64)
            if self.offsets.shape != (2, self.k, self.k):
                raise RejectedInput(
                    f"ROI offsets shape {self.offsets.shape} does not match "
                    f"{(2, self.k, self.k)}"
                )


def _roi_sample_points(roi: Roi) -> Tuple[np.ndarray, np.ndarray]:
    """Sample coordinates [k, k, 4] (bins x sub-samples) of an ROI."""
    k = roi.k
    box = roi.box
    bin_h = box.height / k
    bin_w = box.width / k
    sub_r, sub_c = np.meshgrid(
        _SUBSAMPLE_POSITIONS, _SUBSAMPLE_POSITIONS, indexing="ij"
    )
    bins = np.arange(k).reshape(-1, 1, 1)
    rows = box.row_min + (bins + sub_r.reshape(1, 1, -1)) * bin_h
    cols = box.col_min + (bins + sub_c.reshape(1, 1, -1)) * bin_w
    rows = np.broadcast_to(rows, (k, k, rows.shape[-1]))
    cols = np.broadcast_to(cols.transpose(1, 0, 2), (k, k, cols.shape[-1]))
    if roi.offsets is not None:
        rows = rows + ROI_OFFSET_SCALE * box.height * roi.offsets[0][:, :, None]
        cols = cols + ROI_OFFSET_SCALE * box.width * roi.offsets[1][:, :, None]
    return rows, cols


def _bank_channels(k: int, n_classes: int) -> np.ndarray:
    """Channel index [C, k, k, 1] read by class c in bin (i, j): (i*k + j)*C + c."""
    banks = np.arange(k * k).reshape(1, k, k, 1)
    return banks * n_classes + np.arange(n_classes).reshape(-1, 1, 1, 1)


def _check_score_maps(score_maps, roi: Roi, n_classes: int) -> Tensor:
    score_maps = as_tensor(score_maps, ndim=3, name="score maps")
    expected = roi.k * roi.k * n_classes
    if score_maps.shape[0] != expected:
        raise RejectedInput(
            f"score maps have {score_maps.shape[0]} channels, expected "
            f"k^2*C = {expected}"
        )
    return score_maps


def _pool(score_maps: Tensor, roi: Roi, n_classes: int) -> Tensor:
    rows, cols = _roi_sample_points(roi)
    channels = _bank_channels(roi.k, n_classes)
    _, height, width = score_maps.shape
    total = np.zeros(channels.shape[:3] + rows.shape[-1:])
    for ri, ci, w, _, _ in bilinear_corners(rows, cols, height, width):
        total += score_maps[channels, ri, ci] * w
    return total.mean(axis=-1)


def _pool_backward(
    score_maps: Tensor, roi: Roi, n_classes: int, grad_out
) -> Tuple[Tensor, Tensor]:
    k = roi.k
    grad_out = _check_grad_y(grad_out, (n_classes, k, k))
    rows, cols = _roi_sample_points(roi)
    n_samples = rows.shape[-1]
    channels = _bank_channels(k, n_classes)
    _, height, width = score_maps.shape
    upstream = np.broadcast_to(
        grad_out[..., None] / n_samples, channels.shape[:3] + (n_samples,)
    )
    grad_rows = np.zeros(rows.shape)
    grad_cols = np.zeros(cols.shape)
    flat_index = []
    flat_weight = []
    for ri, ci, w, dw_dr, dw_dc in bilinear_corners(rows, cols, height, width):
        values = score_maps[channels, ri, ci]
        grad_rows += np.sum(upstream * values * dw_dr, axis=0)
        grad_cols += np.sum(upstream * values * dw_dc, axis=0)
        index = (channels * height + ri) * width + ci
        flat_index.append(index.ravel())
        flat_weight.append((upstream * w).ravel())
    grad_maps = np.bincount(
        np.concatenate(flat_index),
        weights=np.concatenate(flat_weight),
        minlength=score_maps.size,
    ).reshape(score_maps.shape)
    grad_offsets = np.stack(
        [
            ROI_OFFSET_SCALE * roi.box.height * grad_rows.sum(axis=-1),
            ROI_OFFSET_SCALE * roi.box.width * grad_cols.sum(axis=-1),
        ]
    )
    return grad_maps, grad_offsets


def ps_roi_pool(score_maps, roi: Roi, n_classes: int) -> Tensor:
    """Position-sensitive ROI pooling: [k^2*C, H, W] -> [C, k, k]."""
    if roi.offsets is not None:
        raise RejectedInput("plain PS-ROI pooling takes an ROI without offsets")
    score_maps = _check_score_maps(score_maps, roi, n_classes)
    return _pool(score_maps, roi, n_classes)


def ps_roi_pool_backward(score_maps, roi: Roi, n_classes: int, grad_out) -> Tensor:
    if roi.offsets is not None:
        raise RejectedInput("plain PS-ROI pooling takes an ROI without offsets")
    score_maps = _check_score_maps(score_maps, roi, n_classes)
    grad_maps, _ = _pool_backward(score_maps, roi, n_classes, grad_out)
    return grad_maps


def deform_ps_roi_pool(score_maps, roi: Roi, n_classes: int) -> Tensor:
    if roi.offsets is None:
        raise RejectedInput("deformable PS-ROI pooling needs per-bin offsets")
    score_maps = _check_score_maps(score_maps, roi, n_classes)
    return _pool(score_maps, roi, n_classes)


def deform_ps_roi_pool_backward(
    score_maps, roi: Roi, n_classes: int, grad_out
) -> Tuple[Tensor, Tensor]:
    """Return gradients with respect to the score maps and the bin offsets."""
    if roi.offsets is None:
        raise RejectedInput("deformable PS-ROI pooling needs per-bin offsets")
    score_maps = _check_score_maps(score_maps, roi, n_classes)
    return _pool_backward(score_maps, roi, n_classes, grad_out)
