"""
Central finite-difference checks of every analytic gradient, from the
bilinear kernel up to the complete detector loss.
"""
from __future__ import annotations

import logging
from typing import Callable, Dict, List, Tuple

import numpy as np
import pandas as pd

from .backbone import (
    NormState,
    backbone_backward,
    backbone_forward_cached,
    cbr_backward,
    cbr_forward,
    init_backbone_params,
    plan_units,
)
from .config import (
    AnchorConfig,
    BlockSpec,
    DetectionConfig,
    ModelConfig,
    TrainConfig,
)
from .deform_ops import (
    ConvParams,
    Roi,
    _roi_sample_points,
    deform_conv_backward,
    deform_conv_forward,
    deform_ps_roi_pool,
    deform_ps_roi_pool_backward,
)
from .detection import MALIGNANT, BBox
from .network import Network
from .tensor_core import Point2, bilinear_sample, bilinear_sample_grad
from .trainer import TrainSample, image_loss, smooth_l1, softmax_xent
from .weights import ModelParams

logger = logging.getLogger(__name__)

STEP = 1e-6
OPERATOR_TOLERANCE = 1e-5
MODEL_TOLERANCE = 1e-4

# Sample points closer than this to an integer coordinate are redrawn.
KINK_MARGIN = 1e-3


def relative_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_gradient(f: Callable[[], float], x: np.ndarray, step: float = STEP):
    """Central differences of `f()` with respect to every entry of `x`, in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        plus = f()
        flat[i] = saved - step
        minus = f()
        flat[i] = saved
        grad.reshape(-1)[i] = (plus - minus) / (2 * step)
    return grad


def _off_grid(values: np.ndarray) -> bool:
    frac = values - np.floor(values)
    return bool(np.all((frac > KINK_MARGIN) & (frac < 1 - KINK_MARGIN)))


def _fractional(rng: np.random.Generator, shape, low: int, high: int) -> np.ndarray:
    return rng.integers(low, high, shape) + rng.uniform(0.1, 0.9, shape)


def check_bilinear(rng: np.random.Generator) -> Dict[str, float]:
    x = rng.normal(size=(5, 5))
    p = _fractional(rng, 2, 0, 4)
    grad_x, grad_p = bilinear_sample_grad(x, Point2(*p), 1.0)

    def f():
        return bilinear_sample(x, Point2(*p))

    return {
        "bilinear: map": relative_error(grad_x, numeric_gradient(f, x)),
        "bilinear: point": relative_error(
            [grad_p.row, grad_p.col], numeric_gradient(f, p)
        ),
    }


def check_deform_conv(rng: np.random.Generator) -> Dict[str, float]:
    x = rng.normal(size=(2, 6, 6))
    params = ConvParams(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3), pad=1)
    # Base positions are integers, so fractional offsets keep samples off the grid.
    off = _fractional(rng, (18, 6, 6), -2, 2)
    upstream = rng.normal(size=(3, 6, 6))
    grad_x, grad_w, grad_b, grad_off = deform_conv_backward(x, params, off, upstream)

    def f():
        return float(np.sum(deform_conv_forward(x, params, off) * upstream))

    return {
        "deform conv: input": relative_error(grad_x, numeric_gradient(f, x)),
        "deform conv: weights": relative_error(
            grad_w, numeric_gradient(f, params.weights)
        ),
        "deform conv: bias": relative_error(grad_b, numeric_gradient(f, params.bias)),
        "deform conv: offsets": relative_error(grad_off, numeric_gradient(f, off)),
    }


def check_dps_roi_pool(rng: np.random.Generator) -> Dict[str, float]:
    k, n_classes = 3, 2
    maps = rng.normal(size=(k * k * n_classes, 8, 8))
    while True:
        corner = rng.uniform(0.5, 2.5, 2)
        extent = rng.uniform(3.0, 5.0, 2)
        roi = Roi(
            BBox(corner[0], corner[1], corner[0] + extent[0], corner[1] + extent[1]),
            k,
            rng.uniform(-1.0, 1.0, (2, k, k)),
        )
        rows, cols = _roi_sample_points(roi)
        if _off_grid(rows) and _off_grid(cols):
            break
    upstream = rng.normal(size=(n_classes, k, k))
    grad_maps, grad_off = deform_ps_roi_pool_backward(maps, roi, n_classes, upstream)

    def f():
        return float(np.sum(deform_ps_roi_pool(maps, roi, n_classes) * upstream))

    return {
        "dps-roi pool: maps": relative_error(grad_maps, numeric_gradient(f, maps)),
        "dps-roi pool: offsets": relative_error(
            grad_off, numeric_gradient(f, roi.offsets)
        ),
    }


def check_cbr(rng: np.random.Generator) -> Dict[str, float]:
    x = rng.normal(size=(2, 6, 6))
    conv = ConvParams(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3), pad=1)
    norm = NormState(
        scale=rng.uniform(0.5, 1.5, 3),
        shift=rng.normal(size=3),
        running_mean=rng.normal(size=3),
        running_var=rng.uniform(0.5, 2.0, 3),
    )
    upstream = rng.normal(size=(3, 6, 6))
    grads = cbr_backward(x, conv, norm, upstream)

    def f():
        return float(np.sum(cbr_forward(x, conv, norm) * upstream))

    return {
        "cbr: input": relative_error(grads.x, numeric_gradient(f, x)),
        "cbr: weights": relative_error(
            grads.weights, numeric_gradient(f, conv.weights)
        ),
        "cbr: scale": relative_error(grads.scale, numeric_gradient(f, norm.scale)),
        "cbr: shift": relative_error(grads.shift, numeric_gradient(f, norm.shift)),
    }


def check_losses(rng: np.random.Generator) -> Dict[str, float]:
    logits = rng.normal(size=3)
    label = int(rng.integers(3))
    _, grad_logits = softmax_xent(logits, label)
    pred = rng.normal(size=4)
    # Keep every difference away from the |d| = 1 switch point.
    magnitude = np.where(
        rng.random(4) < 0.5, rng.uniform(0.1, 0.9, 4), rng.uniform(1.1, 2.0, 4)
    )
    target = pred + rng.choice([-1.0, 1.0], 4) * magnitude
    _, grad_pred = smooth_l1(pred, target)
    return {
        "softmax cross entropy": relative_error(
            grad_logits,
            numeric_gradient(lambda: softmax_xent(logits, label)[0], logits),
        ),
        "smooth l1": relative_error(
            grad_pred, numeric_gradient(lambda: smooth_l1(pred, target)[0], pred)
        ),
    }


TOY_BLOCKS = (
    BlockSpec(kind="stem_cbr", repeats=1, out_channels=3, downsample=True),
    BlockSpec(kind="block_a", repeats=1, out_channels=4, downsample=True),
)


def toy_backbone(rng: np.random.Generator) -> ModelParams:
    """Parameters of the two-block `TOY_BLOCKS` backbone with random statistics."""
    params = ModelParams()
    init_backbone_params(params, plan_units(TOY_BLOCKS), rng)
    for name, array in params.items():
        if name.endswith(".offset.weight"):
            params[name] = rng.normal(0.0, 1e-3, array.shape)
        elif name.endswith(".offset.bias"):
            # Fractional offsets keep the deformable taps off the integer grid.
            params[name] = rng.uniform(0.1, 0.4, array.shape)
        elif name.endswith((".conv.bias", ".norm.shift", ".norm.running_mean")):
            params[name] = rng.normal(0.0, 0.1, array.shape)
        elif name.endswith((".norm.scale", ".norm.running_var")):
            params[name] = rng.uniform(0.5, 1.5, array.shape)
    return params


def check_backbone(rng: np.random.Generator) -> Dict[str, float]:
    units = plan_units(TOY_BLOCKS)
    params = toy_backbone(rng)
    x = rng.uniform(0.0, 1.0, (1, 8, 8))
    features, tapes = backbone_forward_cached(params, x, units)
    upstream = rng.normal(size=features.shape)
    grads = {name: np.zeros_like(array) for name, array in params.items()}
    grad_x = backbone_backward(params, tapes, upstream, grads)

    def f():
        return float(np.sum(backbone_forward_cached(params, x, units)[0] * upstream))

    names = list(params.learnable_names())
    return {
        "backbone: input": relative_error(grad_x, numeric_gradient(f, x)),
        "backbone: parameters": relative_error(
            np.concatenate([grads[n].ravel() for n in names]),
            np.concatenate([numeric_gradient(f, params[n]).ravel() for n in names]),
        ),
    }


def miniature_network(rng: np.random.Generator) -> Network:
    """8x8 input, a single deformable stem unit, 3x3 pooling."""
    cfg = ModelConfig(
        blocks=[
            BlockSpec(kind="stem_cbr", repeats=1, out_channels=4, downsample=True)
        ],
        pool_size=3,
        rpn_channels=4,
        anchors=AnchorConfig(base_scales=[4.0, 8.0], aspect_ratios=[1.0], stride=2),
        init_seed=int(rng.integers(2**31)),
    )
    net = Network.initialize(cfg)
    # Non-zero offset branches keep the sample points off the integer grid.
    for name in net.params:
        if ".offset." in name:
            net.params[name] = rng.uniform(0.1, 0.4, net.params[name].shape)
    for name in net.params.learnable_names():
        if name.endswith(".weight") and not name.startswith("backbone"):
            net.params[name] = rng.normal(0.0, 0.3, net.params[name].shape)
    return net


def check_model(rng: np.random.Generator) -> Dict[str, float]:
    net = miniature_network(rng)
    sample = TrainSample(
        "gradcheck",
        rng.uniform(0.0, 1.0, (8, 8)),
        [[1.0, 1.0, 6.0, 6.0]],
        [MALIGNANT],
    )
    rois = np.array([[0.5, 0.5, 3.5, 3.5], [4.5, 4.5, 7.5, 7.5]])
    train = TrainConfig(ohem_budget=16)
    det = DetectionConfig()

    def run():
        return image_loss(net, sample, train, det, np.random.default_rng(0), rois)

    analytic = run().grads

    def f():
        return run().losses["total"]

    groups: Dict[str, List[Tuple[np.ndarray, np.ndarray]]] = {}
    for name in net.params.learnable_names():
        group = name.split(".")[0]
        numeric = numeric_gradient(f, net.params[name])
        groups.setdefault(group, []).append(
            (analytic[name].ravel(), numeric.ravel())
        )
    return {
        f"model: {group}": relative_error(
            np.concatenate([a for a, _ in pairs]), np.concatenate([n for _, n in pairs])
        )
        for group, pairs in groups.items()
    }


OPERATOR_CHECKS = (
    check_bilinear,
    check_deform_conv,
    check_dps_roi_pool,
    check_cbr,
    check_losses,
)


def run_suite(seed: int = 0, include_model: bool = True) -> pd.DataFrame:
    rng = np.random.default_rng(seed)
    rows = []
    for check in OPERATOR_CHECKS:
        for name, error in check(rng).items():
            rows.append((name, error, OPERATOR_TOLERANCE))
    if include_model:
        for name, error in check_backbone(rng).items():
            rows.append((name, error, MODEL_TOLERANCE))
        for name, error in check_model(rng).items():
            rows.append((name, error, MODEL_TOLERANCE))
    report = pd.DataFrame.from_records(
        rows, columns=["check", "max_rel_error", "tolerance"]
    )
    report["passed"] = report["max_rel_error"] <= report["tolerance"]
    logger.debug(f"Gradient checks:\n{report}")
    return report
