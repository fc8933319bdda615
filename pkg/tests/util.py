from __future__ import annotations

import math
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import tomli_w

from mammodcn.config import AnchorConfig, BlockSpec, ModelConfig
from mammodcn.detection import BBox, Detection, iou_matrix
from mammodcn.inference import Exam


def nested_loop_conv(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0
) -> np.ndarray:
    c_in, height, width = x.shape
    c_out, _, kh, kw = w.shape
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    out_h = (height + 2 * pad - kh) // stride + 1
    out_w = (width + 2 * pad - kw) // stride + 1
    y = np.zeros((c_out, out_h, out_w))
    for o in range(c_out):
        for i in range(out_h):
            for j in range(out_w):
                total = b[o]
                for c in range(c_in):
                    for a in range(kh):
                        for d in range(kw):
                            pixel = padded[c, i * stride + a, j * stride + d]
                            total += w[o, c, a, d] * pixel
                y[o, i, j] = total
    return y


def reference_bilinear(plane: np.ndarray, row: float, col: float) -> float:
    """Bilinear sample of a 2-d map, zero outside."""
    r0, c0 = math.floor(row), math.floor(col)
    total = 0.0
    for r, wr in ((r0, 1.0 - (row - r0)), (r0 + 1, row - r0)):
        for c, wc in ((c0, 1.0 - (col - c0)), (c0 + 1, col - c0)):
            if 0 <= r < plane.shape[0] and 0 <= c < plane.shape[1]:
                total += wr * wc * plane[r, c]
    return total


def nested_loop_deform_conv(
    x: np.ndarray,
    w: np.ndarray,
    b: np.ndarray,
    off: np.ndarray,
    stride: int = 1,
    pad: int = 0,
) -> np.ndarray:
    """Sum of weight times the displaced sample, one tap at a time."""
    c_in = x.shape[0]
    c_out, _, kh, kw = w.shape
    _, out_h, out_w = off.shape
    y = np.zeros((c_out, out_h, out_w))
    for o in range(c_out):
        for i in range(out_h):
            for j in range(out_w):
                total = b[o]
                for a in range(kh):
                    for d in range(kw):
                        tap = a * kw + d
                        row = i * stride - pad + a + off[2 * tap, i, j]
                        col = j * stride - pad + d + off[2 * tap + 1, i, j]
                        for c in range(c_in):
                            sample = reference_bilinear(x[c], row, col)
                            total += w[o, c, a, d] * sample
                y[o, i, j] = total
    return y


def brute_force_ps_roi_pool(
    maps: np.ndarray,
    box: Tuple[float, float, float, float],
    k: int,
    n_classes: int,
    offsets: Optional[np.ndarray] = None,
    offset_scale: float = 0.1,
) -> np.ndarray:
    """Average of the 2x2 sub-bin samples of bin (i, j) in channel (i*k+j)*C+c."""
    row_min, col_min, row_max, col_max = box
    bin_h = (row_max - row_min) / k
    bin_w = (col_max - col_min) / k
    out = np.zeros((n_classes, k, k))
    for c in range(n_classes):
        for i in range(k):
            for j in range(k):
                shift_r = shift_c = 0.0
                if offsets is not None:
                    shift_r = offset_scale * (row_max - row_min) * offsets[0, i, j]
                    shift_c = offset_scale * (col_max - col_min) * offsets[1, i, j]
                plane = maps[(i * k + j) * n_classes + c]
                samples = [
                    reference_bilinear(
                        plane,
                        row_min + (i + u) * bin_h + shift_r,
                        col_min + (j + v) * bin_w + shift_c,
                    )
                    for u in (0.25, 0.75)
                    for v in (0.25, 0.75)
                ]
                out[c, i, j] = sum(samples) / len(samples)
    return out


def reference_nms(boxes: np.ndarray, scores: np.ndarray, threshold: float) -> list:
    """Quadratic greedy suppression over a score-sorted list."""
    overlaps = iou_matrix(boxes, boxes).tolist()
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    suppressed = set()
    keep = []
    for position, i in enumerate(order):
        if i in suppressed:
            continue
        keep.append(i)
        for j in order[position + 1 :]:
            if overlaps[i][j] > threshold:
                suppressed.add(j)
    return keep


def pair_count_auc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    positives = [s for s, y in zip(scores, labels) if y]
    negatives = [s for s, y in zip(scores, labels) if not y]
    wins = 0.0
    for p in positives:
        for n in negatives:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(positives) * len(negatives))


def random_boxes(rng: np.random.Generator, n: int, side: float = 100.0) -> np.ndarray:
    corners = rng.uniform(0.0, side * 0.8, (n, 2))
    extents = rng.uniform(1.0, side * 0.3, (n, 2))
    return np.concatenate([corners, corners + extents], axis=1)


def tiny_model_config(deformable_roi: bool = True, **kwargs) -> ModelConfig:
    """Stride-4 backbone with a stem and one two-branch block."""
    return ModelConfig(
        blocks=[
            BlockSpec(kind="stem_cbr", repeats=1, out_channels=4, downsample=True),
            BlockSpec(kind="block_a", repeats=1, out_channels=6, downsample=True),
        ],
        pool_size=3,
        rpn_channels=4,
        deformable_roi=deformable_roi,
        anchors=AnchorConfig(base_scales=[6.0, 12.0], aspect_ratios=[1.0], stride=4),
        **kwargs,
    )


def four_view_exam(
    subject_id: str, labels: Optional[Dict[str, bool]] = None
) -> Exam:
    labels = {"L": False, "R": False} if labels is None else labels
    images = {
        (lat, view): f"{subject_id}_{lat}_{view}"
        for lat in labels
        for view in ("CC", "MLO")
    }
    return Exam(subject_id, images, labels)


def detection(malignant: float, box: Tuple[float, ...] = (0, 0, 4, 4)) -> Detection:
    rest = 1.0 - malignant
    return Detection(BBox(*box), [rest / 2, rest / 2, malignant], objectness=0.5)


def write_toml(path: Path, obj: dict) -> Path:
    with open(path, "wb") as f:
        tomli_w.dump(obj, f)
    return path


def tiny_run_config(outdir: Path) -> dict:
    """A complete pipeline config that trains and scores in seconds."""
    return {
        "schema_version": 1,
        "general": {"outdir": str(outdir)},
        "phantom": {
            "side": 32,
            "train_exams": 2,
            "test_exams": 10,
            "prevalence": 0.3,
            "seed": 3,
        },
        "model": {
            "blocks": [
                {
                    "kind": "stem_cbr",
                    "repeats": 1,
                    "out_channels": 4,
                    "downsample": True,
                },
                {
                    "kind": "block_a",
                    "repeats": 1,
                    "out_channels": 6,
                    "downsample": True,
                },
            ],
            "pool_size": 3,
            "rpn_channels": 4,
            "anchors": {
                "base_scales": [6.0, 12.0],
                "aspect_ratios": [1.0],
                "stride": 4,
            },
        },
        "detection": {"pre_nms_top_n": 50, "post_nms_top_n": 4, "rpn_batch": 32},
        "train": {"epochs": 1, "augment": False, "ohem_budget": 4},
        "memplan": {"sides": [512, 1024], "budget_bytes": 2**26},
    }
