"""
Toy Inception-style backbone: a stem of conv-norm-ReLU (CBR) stages followed by
two-branch blocks whose branch outputs are concatenated along channels, plus a
closed-form activation / parameter memory planner.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import (
    Dict,
    List,
    Literal,
    MutableMapping,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    TypedDict,
)

import numpy as np
import pandas as pd

from .config import BlockSpec
from .deform_ops import (
    ConvParams,
    conv2d,
    conv2d_backward,
    deform_conv_backward,
    deform_conv_forward,
)
from .errors import RejectedInput
from .tensor_core import Tensor, as_tensor, conv_output_extent, relu, relu_grad
from .weights import ModelParams

logger = logging.getLogger(__name__)

NormMode = Literal["frozen", "moving_average"]
NORM_EPS = 1e-5

# Kernel sizes of the (narrow, wide) branch of each block kind.
_BRANCH_KERNELS = {"block_a": (1, 3), "block_b": (1, 5), "block_c": (1, 3)}


@dataclass
class NormState:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    mode: NormMode = "frozen"
    momentum: float = 0.9

    def __post_init__(self):
        shapes = {
            a.shape
            for a in (self.scale, self.shift, self.running_mean, self.running_var)
        }
        if len(shapes) != 1:
            raise RejectedInput(f"normalization arrays differ in shape: {shapes}")
        if np.any(self.running_var < 0):
            raise RejectedInput("running variance must be non-negative")

    @classmethod
    def identity(cls, channels: int) -> NormState:
        return cls(
            scale=np.ones(channels),
            shift=np.zeros(channels),
            running_mean=np.zeros(channels),
            running_var=np.full(channels, 1.0 - NORM_EPS),
        )


class CbrCache(NamedTuple):
    x: Tensor
    conv: ConvParams
    norm: NormState
    offsets: Optional[Tensor]
    z_hat: Tensor
    inv_std: np.ndarray
    pre: Tensor


class CbrGrads(NamedTuple):
    x: Tensor
    weights: Tensor
    bias: Tensor
    scale: np.ndarray
    shift: np.ndarray
    offsets: Optional[Tensor]


def cbr_forward_cached(
    x, conv: ConvParams, norm: NormState, offsets: Optional[Tensor] = None
) -> Tuple[Tensor, CbrCache]:
    x = as_tensor(x, ndim=3, name="input")
    z = conv2d(x, conv) if offsets is None else deform_conv_forward(x, conv, offsets)
    if z.shape[0] != norm.scale.shape[0]:
        raise RejectedInput(
            f"normalization has {norm.scale.shape[0]} channels, "
            f"convolution produces {z.shape[0]}"
        )
    if norm.mode == "moving_average":
        mean = z.mean(axis=(1, 2))
        var = z.var(axis=(1, 2))
        norm.running_mean[...] = (
            norm.momentum * norm.running_mean + (1 - norm.momentum) * mean
        )
        norm.running_var[...] = (
            norm.momentum * norm.running_var + (1 - norm.momentum) * var
        )
    else:
        mean, var = norm.running_mean, norm.running_var
    inv_std = 1.0 / np.sqrt(var + NORM_EPS)
    z_hat = (z - mean[:, None, None]) * inv_std[:, None, None]
    pre = z_hat * norm.scale[:, None, None] + norm.shift[:, None, None]
    return relu(pre), CbrCache(x, conv, norm, offsets, z_hat, inv_std, pre)


def cbr_backward_cached(cache: CbrCache, grad_y: Tensor) -> CbrGrads:
    if cache.norm.mode != "frozen":
        raise RejectedInput("backward requires frozen normalization statistics")
    grad_pre = grad_y * relu_grad(cache.pre)
    grad_scale = np.sum(grad_pre * cache.z_hat, axis=(1, 2))
    grad_shift = np.sum(grad_pre, axis=(1, 2))
    grad_z = grad_pre * (cache.norm.scale * cache.inv_std)[:, None, None]
    if cache.offsets is None:
        grad_x, grad_w, grad_b = conv2d_backward(cache.x, cache.conv, grad_z)
        grad_off = None
    else:
        grad_x, grad_w, grad_b, grad_off = deform_conv_backward(
            cache.x, cache.conv, cache.offsets, grad_z
        )
    return CbrGrads(grad_x, grad_w, grad_b, grad_scale, grad_shift, grad_off)


def cbr_forward(
    x, conv: ConvParams, norm: NormState, offsets: Optional[Tensor] = None
) -> Tensor:
    y, _ = cbr_forward_cached(x, conv, norm, offsets)
    return y


def cbr_backward(
    x, conv: ConvParams, norm: NormState, grad_y, offsets: Optional[Tensor] = None
) -> CbrGrads:
    _, cache = cbr_forward_cached(x, conv, norm, offsets)
    return cbr_backward_cached(cache, np.asarray(grad_y, dtype=np.float64))


@dataclass(frozen=True)
class BranchPlan:
    name: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    deformable: bool = False

    @property
    def pad(self) -> int:
        return self.kernel // 2

    @property
    def offset_channels(self) -> int:
        return 2 * self.kernel * self.kernel


@dataclass(frozen=True)
class UnitPlan:
    """One repeat of a block: parallel branches reading the same input."""

    name: str
    in_channels: int
    branches: Tuple[BranchPlan, ...]

    @property
    def out_channels(self) -> int:
        return sum(b.out_channels for b in self.branches)

    @property
    def stride(self) -> int:
        return self.branches[0].stride


def plan_units(
    blocks: Sequence[BlockSpec], in_channels: int = 1, deformable_block: bool = True
) -> List[UnitPlan]:
    """
    Expand block specs into units. The stem downsamples in every repeat, other
    blocks in their first repeat only. With `deformable_block`, the wide branch
    of the very last unit is a deformable convolution.
    """
    units = []
    channels = in_channels
    for b, spec in enumerate(blocks):
        for r in range(spec.repeats):
            name = f"backbone.{b}.{r}"
            if spec.kind == "stem_cbr":
                stride = 2 if spec.downsample else 1
                branches: Tuple[BranchPlan, ...] = (
                    BranchPlan(f"{name}.b0", channels, spec.out_channels, 3, stride),
                )
            else:
                if spec.out_channels < 2:
                    raise RejectedInput(
                        f"{spec.kind} needs at least 2 output channels, "
                        f"got {spec.out_channels}"
                    )
                stride = 2 if spec.downsample and r == 0 else 1
                narrow = spec.out_channels // 2
                k_narrow, k_wide = _BRANCH_KERNELS[spec.kind]
                branches = (
                    BranchPlan(f"{name}.b0", channels, narrow, k_narrow, stride),
                    BranchPlan(
                        f"{name}.b1",
                        channels,
                        spec.out_channels - narrow,
                        k_wide,
                        stride,
                    ),
                )
            units.append(UnitPlan(name, channels, branches))
            channels = spec.out_channels
    if deformable_block and units:
        last = units[-1]
        wide = dataclasses.replace(last.branches[-1], deformable=True)
        units[-1] = dataclasses.replace(last, branches=last.branches[:-1] + (wide,))
    return units


def units_stride(units: Sequence[UnitPlan]) -> int:
    return int(np.prod([u.stride for u in units]))


def init_backbone_params(
    params: ModelParams, units: Sequence[UnitPlan], rng: np.random.Generator
):
    for unit in units:
        for br in unit.branches:
            k = br.kernel
            fan_in = br.in_channels * k * k
            params[f"{br.name}.conv.weight"] = rng.normal(
                0.0, np.sqrt(2.0 / fan_in), (br.out_channels, br.in_channels, k, k)
            )
            params[f"{br.name}.conv.bias"] = np.zeros(br.out_channels)
            params[f"{br.name}.norm.scale"] = np.ones(br.out_channels)
            params[f"{br.name}.norm.shift"] = np.zeros(br.out_channels)
            params[f"{br.name}.norm.running_mean"] = np.zeros(br.out_channels)
            params[f"{br.name}.norm.running_var"] = np.ones(br.out_channels)
            if br.deformable:
                # Zero offsets: the layer starts as a plain convolution.
                params[f"{br.name}.offset.weight"] = np.zeros(
                    (br.offset_channels, br.in_channels, k, k)
                )
                params[f"{br.name}.offset.bias"] = np.zeros(br.offset_channels)


def branch_conv(params: ModelParams, br: BranchPlan) -> ConvParams:
    return ConvParams(
        params[f"{br.name}.conv.weight"],
        params[f"{br.name}.conv.bias"],
        stride=br.stride,
        pad=br.pad,
    )


def branch_offset_conv(params: ModelParams, br: BranchPlan) -> ConvParams:
    return ConvParams(
        params[f"{br.name}.offset.weight"],
        params[f"{br.name}.offset.bias"],
        stride=br.stride,
        pad=br.pad,
    )


def branch_norm(
    params: ModelParams, br: BranchPlan, mode: NormMode = "frozen", momentum=0.9
) -> NormState:
    return NormState(
        params[f"{br.name}.norm.scale"],
        params[f"{br.name}.norm.shift"],
        params[f"{br.name}.norm.running_mean"],
        params[f"{br.name}.norm.running_var"],
        mode=mode,
        momentum=momentum,
    )


class UnitTape(NamedTuple):
    unit: UnitPlan
    x: Tensor
    caches: List[CbrCache]


def backbone_forward_cached(
    params: ModelParams,
    x,
    units: Sequence[UnitPlan],
    norm_mode: NormMode = "frozen",
    norm_momentum: float = 0.9,
) -> Tuple[Tensor, List[UnitTape]]:
    x = as_tensor(x, ndim=3, name="image")
    stride = units_stride(units)
    if x.shape[1] % stride or x.shape[2] % stride:
        raise RejectedInput(
            f"image extents {x.shape[1:]} are not divisible by the backbone "
            f"stride {stride}"
        )
    if x.shape[0] != units[0].in_channels:
        raise RejectedInput(
            f"image has {x.shape[0]} channels, backbone expects "
            f"{units[0].in_channels}"
        )
    tapes = []
    h = x
    for unit in units:
        outputs = []
        caches = []
        for br in unit.branches:
            offsets = None
            if br.deformable:
                offsets = conv2d(h, branch_offset_conv(params, br))
            y, cache = cbr_forward_cached(
                h,
                branch_conv(params, br),
                branch_norm(params, br, norm_mode, norm_momentum),
                offsets,
            )
            outputs.append(y)
            caches.append(cache)
        tapes.append(UnitTape(unit, h, caches))
        h = np.concatenate(outputs, axis=0)
    return h, tapes


def backbone_forward(
    params: ModelParams,
    x,
    blocks: Sequence[BlockSpec],
    deformable_block: bool = True,
) -> Tensor:
    units = plan_units(blocks, as_tensor(x, ndim=3).shape[0], deformable_block)
    features, _ = backbone_forward_cached(params, x, units)
    return features


def backbone_backward(
    params: ModelParams,
    tapes: Sequence[UnitTape],
    grad_features: Tensor,
    grads: MutableMapping[str, np.ndarray],
) -> Tensor:
    """Accumulate parameter gradients into `grads`; return the image gradient."""
    g = grad_features
    for tape in reversed(tapes):
        grad_in = np.zeros_like(tape.x)
        start = 0
        for br, cache in zip(tape.unit.branches, tape.caches):
            branch_grad = g[start : start + br.out_channels]
            start += br.out_channels
            cg = cbr_backward_cached(cache, branch_grad)
            grads[f"{br.name}.conv.weight"] += cg.weights
            grads[f"{br.name}.conv.bias"] += cg.bias
            grads[f"{br.name}.norm.scale"] += cg.scale
            grads[f"{br.name}.norm.shift"] += cg.shift
            grad_in += cg.x
            if br.deformable:
                gx, gw, gb = conv2d_backward(
                    tape.x, branch_offset_conv(params, br), cg.offsets
                )
                grads[f"{br.name}.offset.weight"] += gw
                grads[f"{br.name}.offset.bias"] += gb
                grad_in += gx
        g = grad_in
    return g


class MemoryPlan(TypedDict):
    activation_bytes: int
    param_bytes: int
    inference_peak_bytes: int
    peak_bytes: int


def memory_table(
    blocks: Sequence[BlockSpec],
    input_side: int,
    bytes_per_element: int = 4,
    batch: int = 1,
    deformable_block: bool = True,
    in_channels: int = 1,
) -> pd.DataFrame:
    """Per-unit activation and parameter storage, in bytes."""
    if min(input_side, bytes_per_element, batch, in_channels) < 1:
        raise RejectedInput("memory planner arguments must be positive")
    rows = []
    side = input_side
    for unit in plan_units(blocks, in_channels, deformable_block):
        first = unit.branches[0]
        side = conv_output_extent(side, first.kernel, first.stride, first.pad)
        activations = unit.out_channels * side * side
        n_params = 0
        for br in unit.branches:
            # conv weights + bias, norm scale/shift + running statistics
            n_params += br.out_channels * br.in_channels * br.kernel**2
            n_params += 5 * br.out_channels
            if br.deformable:
                activations += br.offset_channels * side * side
                n_params += br.offset_channels * (br.in_channels * br.kernel**2 + 1)
        rows.append(
            {
                "unit": unit.name,
                "channels": unit.out_channels,
                "extent": side,
                "activation_bytes": activations * bytes_per_element * batch,
                "param_bytes": n_params * bytes_per_element,
            }
        )
    return pd.DataFrame.from_records(rows)


def memory_plan(
    blocks: Sequence[BlockSpec],
    input_side: int,
    bytes_per_element: int = 4,
    batch: int = 1,
    deformable_block: bool = True,
    in_channels: int = 1,
) -> MemoryPlan:
    """
    Closed-form storage of every layer's activations and parameters.

    `inference_peak_bytes` is the parameters plus the largest pair of adjacent
    live activations (a unit's input and output). `peak_bytes` is the training
    peak: backward needs every unit's input, so the image and all activations
    stay live together with the parameters.
    """
    table = memory_table(
        blocks, input_side, bytes_per_element, batch, deformable_block, in_channels
    )
    input_bytes = in_channels * input_side * input_side * bytes_per_element * batch
    live = [input_bytes] + [int(v) for v in table["activation_bytes"]]
    param_bytes = int(table["param_bytes"].sum())
    largest_pair = max(a + b for a, b in zip(live[:-1], live[1:]))
    return {
        "activation_bytes": sum(live[1:]),
        "param_bytes": param_bytes,
        "inference_peak_bytes": param_bytes + largest_pair,
        "peak_bytes": param_bytes + sum(live),
    }


def max_feasible_side(
    blocks: Sequence[BlockSpec],
    budget_bytes: int,
    bytes_per_element: int = 4,
    batch: int = 1,
    deformable_block: bool = True,
) -> int:
    """
    Largest input side (a multiple of the backbone stride) whose training peak
    fits in the budget; 0 if not even one stride does.
    """
    step = units_stride(plan_units(blocks, 1, deformable_block))

    def fits(multiple: int) -> bool:
        plan = memory_plan(
            blocks, multiple * step, bytes_per_element, batch, deformable_block
        )
        return plan["peak_bytes"] <= budget_bytes

    if not fits(1):
        return 0
    low, high = 1, 2
    while fits(high):
        low, high = high, high * 2
    while high - low > 1:
        middle = (low + high) // 2
        if fits(middle):
            low = middle
        else:
            high = middle
    return low * step


def doubled_repeats(blocks: Sequence[BlockSpec]) -> List[BlockSpec]:
    return [
        b if b.kind == "stem_cbr" else b.copy(update={"repeats": 2 * b.repeats})
        for b in blocks
    ]


def norm_statistics_summary(params: ModelParams) -> Dict[str, float]:
    means = [params[n] for n in params if n.endswith(".running_mean")]
    variances = [params[n] for n in params if n.endswith(".running_var")]
    return {
        "mean_abs_running_mean": float(np.mean(np.abs(np.concatenate(means)))),
        "mean_running_var": float(np.mean(np.concatenate(variances))),
    }
