"""
R-FCN detection plumbing: boxes, anchors, RPN label assignment, box coding,
non-maximum suppression, proposal generation and OHEM selection.

Boxes are handled as float64 arrays of shape [N, 4] holding
(row_min, col_min, row_max, col_max) in pixels; `BBox` is the single-box
value type.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .config import AnchorConfig
from .errors import RejectedInput

logger = logging.getLogger(__name__)

CLASS_NAMES = ("negative", "benign", "malignant")
NEGATIVE, BENIGN, MALIGNANT = range(len(CLASS_NAMES))

POSITIVE_LABEL = 1
NEGATIVE_LABEL = 0
IGNORE_LABEL = -1

# Largest log size ratio accepted when decoding, as in the F-RCNN lineage.
MAX_LOG_RATIO = math.log(1000.0 / 16)


@dataclass(frozen=True)
class BBox:
    row_min: float
    col_min: float
    row_max: float
    col_max: float

    def __post_init__(self):
        if not (self.row_max >= self.row_min and self.col_max >= self.col_min):
            raise RejectedInput(f"box corners out of order: {self}")

    @property
    def height(self) -> float:
        return self.row_max - self.row_min

    @property
    def width(self) -> float:
        return self.col_max - self.col_min

    @property
    def area(self) -> float:
        return self.height * self.width

    def to_array(self) -> np.ndarray:
        return np.array([self.row_min, self.col_min, self.row_max, self.col_max])

    @classmethod
    def from_array(cls, values: Sequence[float]) -> BBox:
        return cls(*(float(v) for v in values))

    def scaled(self, factor: float, shift: float = 0.0) -> BBox:
        return BBox(*(v * factor + shift for v in self.to_array()))


@dataclass
class Detection:
    box: BBox
    class_scores: np.ndarray
    objectness: float

    def __post_init__(self):
        self.class_scores = np.asarray(self.class_scores, dtype=np.float64)
        if self.class_scores.shape != (len(CLASS_NAMES),):
            raise RejectedInput(
                f"expected {len(CLASS_NAMES)} class scores, got "
                f"{self.class_scores.shape}"
            )
        if np.any(self.class_scores < 0) or np.any(self.class_scores > 1):
            raise RejectedInput(f"class scores outside [0, 1]: {self.class_scores}")
        if abs(self.class_scores.sum() - 1.0) > 1e-9:
            raise RejectedInput(f"class scores do not sum to 1: {self.class_scores}")

    @property
    def malignant_score(self) -> float:
        return float(self.class_scores[MALIGNANT])


def as_boxes(boxes) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.size == 0:
        return boxes.reshape(0, 4)
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise RejectedInput(f"boxes must have shape [N, 4], got {boxes.shape}")
    return boxes


def box_areas(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou_matrix(a, b) -> np.ndarray:
    a, b = as_boxes(a), as_boxes(b)
    top_left = np.maximum(a[:, None, :2], b[None, :, :2])
    bottom_right = np.minimum(a[:, None, 2:], b[None, :, 2:])
    extents = np.clip(bottom_right - top_left, 0.0, None)
    inter = extents[..., 0] * extents[..., 1]
    union = box_areas(a)[:, None] + box_areas(b)[None, :] - inter
    safe_union = np.where(union > 0, union, 1.0)
    return np.where(union > 0, inter / safe_union, 0.0)


def iou(a: BBox, b: BBox) -> float:
    return float(iou_matrix(a.to_array()[None], b.to_array()[None])[0, 0])


def generate_anchors(cfg: AnchorConfig, feat_h: int, feat_w: int) -> np.ndarray:
    """
    One anchor per (location, scale, ratio), ordered row-major over locations,
    then by scale, then by ratio. Ratio is height / width; area is scale^2.
    """
    if feat_h < 1 or feat_w < 1:
        raise RejectedInput(f"feature map must be non-empty, got {feat_h}x{feat_w}")
    scales = np.asarray(cfg.base_scales, dtype=np.float64)
    ratios = np.asarray(cfg.aspect_ratios, dtype=np.float64)
    heights = (scales[:, None] * np.sqrt(ratios)[None, :]).ravel()
    widths = (scales[:, None] / np.sqrt(ratios)[None, :]).ravel()
    centers_r = (np.arange(feat_h) + 0.5) * cfg.stride
    centers_c = (np.arange(feat_w) + 0.5) * cfg.stride
    cr, cc = np.meshgrid(centers_r, centers_c, indexing="ij")
    cr = cr.reshape(-1, 1)
    cc = cc.reshape(-1, 1)
    anchors = np.stack(
        [
            cr - heights / 2,
            cc - widths / 2,
            cr + heights / 2,
            cc + widths / 2,
        ],
        axis=-1,
    )
    return anchors.reshape(-1, 4)


def assign_rpn_labels(
    anchors,
    gt_boxes,
    positive_iou: float = 0.5,
    negative_iou: float = 0.3,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Label anchors positive (1), negative (0) or ignore (-1).

    Positive: max IoU >= `positive_iou`, or the anchor is a best match of some
    ground-truth box. Negative: max IoU < `negative_iou`. Returns the labels
    and the index of the best-matching ground-truth box (-1 without gt).
    Every ground-truth box with positive area must overlap some anchor.
    """
    anchors, gt_boxes = as_boxes(anchors), as_boxes(gt_boxes)
    n_anchors = len(anchors)
    if len(gt_boxes) == 0:
        return np.zeros(n_anchors, dtype=np.int64), np.full(n_anchors, -1)

    overlaps = iou_matrix(anchors, gt_boxes)
    matched = overlaps.argmax(axis=1)
    max_overlap = overlaps[np.arange(n_anchors), matched]

    labels = np.full(n_anchors, IGNORE_LABEL, dtype=np.int64)
    labels[max_overlap < negative_iou] = NEGATIVE_LABEL
    labels[max_overlap >= positive_iou] = POSITIVE_LABEL

    best_per_gt = overlaps.max(axis=0)
    real = box_areas(gt_boxes) > 0
    unreachable = np.flatnonzero(real & (best_per_gt <= 0))
    if len(unreachable):
        raise RejectedInput(
            f"ground-truth boxes {gt_boxes[unreachable].tolist()} overlap no anchor"
        )
    for gt_index in np.flatnonzero(real):
        best_anchors = np.flatnonzero(overlaps[:, gt_index] == best_per_gt[gt_index])
        labels[best_anchors] = POSITIVE_LABEL
        matched[best_anchors] = gt_index
    return labels, matched


def _centers_and_sizes(boxes: np.ndarray):
    heights = boxes[:, 2] - boxes[:, 0]
    widths = boxes[:, 3] - boxes[:, 1]
    return boxes[:, 0] + 0.5 * heights, boxes[:, 1] + 0.5 * widths, heights, widths


def _check_anchor_sizes(heights: np.ndarray, widths: np.ndarray):
    if np.any(heights <= 0) or np.any(widths <= 0):
        raise RejectedInput("degenerate anchor: non-positive height or width")


def encode_box(anchors, gt) -> np.ndarray:
    """Regression targets (d_row, d_col, log h ratio, log w ratio), shape [N, 4]."""
    anchors, gt = as_boxes(anchors), as_boxes(gt)
    a_r, a_c, a_h, a_w = _centers_and_sizes(anchors)
    _check_anchor_sizes(a_h, a_w)
    g_r, g_c, g_h, g_w = _centers_and_sizes(gt)
    if np.any(g_h <= 0) or np.any(g_w <= 0):
        raise RejectedInput("degenerate target box: non-positive height or width")
    return np.stack(
        [
            (g_r - a_r) / a_h,
            (g_c - a_c) / a_w,
            np.log(g_h / a_h),
            np.log(g_w / a_w),
        ],
        axis=1,
    )


def decode_box(anchors, deltas) -> np.ndarray:
    anchors = as_boxes(anchors)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    a_r, a_c, a_h, a_w = _centers_and_sizes(anchors)
    _check_anchor_sizes(a_h, a_w)
    ctr_r = a_r + deltas[:, 0] * a_h
    ctr_c = a_c + deltas[:, 1] * a_w
    h = a_h * np.exp(np.minimum(deltas[:, 2], MAX_LOG_RATIO))
    w = a_w * np.exp(np.minimum(deltas[:, 3], MAX_LOG_RATIO))
    return np.stack(
        [ctr_r - 0.5 * h, ctr_c - 0.5 * w, ctr_r + 0.5 * h, ctr_c + 0.5 * w], axis=1
    )


def clip_boxes(boxes, image_shape: Tuple[int, int]) -> np.ndarray:
    boxes = as_boxes(boxes).copy()
    height, width = image_shape
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0, height)
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0, width)
    return boxes


def _descending_order(scores: np.ndarray) -> np.ndarray:
    # Ties broken by lower index.
    return np.lexsort((np.arange(len(scores)), -scores))


def nms(boxes, scores, iou_threshold: float) -> np.ndarray:
    """
    Greedy non-maximum suppression. Returns kept indices in descending score
    order; every kept pair overlaps with IoU <= `iou_threshold`.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise RejectedInput(f"NMS threshold must be in [0, 1], got {iou_threshold}")
    boxes = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    order = _descending_order(scores)
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(i)
        overlaps = iou_matrix(boxes[i : i + 1], boxes[order[1:]])[0]
        order = order[1:][overlaps <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def propose(
    objectness,
    deltas,
    anchors,
    image_shape: Tuple[int, int],
    pre_nms_top_n: int = 2000,
    post_nms_top_n: int = 64,
    nms_iou: float = 0.1,
    min_size: float = 4.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Decode every anchor, clip to the image, drop boxes with a side below
    `min_size`, keep the `pre_nms_top_n` best by objectness, suppress at
    `nms_iou` and keep the `post_nms_top_n` best. Returns (boxes, scores).
    """
    objectness = np.asarray(objectness, dtype=np.float64).ravel()
    anchors = as_boxes(anchors)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    if not len(objectness) == len(anchors) == len(deltas):
        raise RejectedInput("objectness, deltas and anchors are not aligned")
    boxes = clip_boxes(decode_box(anchors, deltas), image_shape)
    sides_ok = ((boxes[:, 2] - boxes[:, 0]) >= min_size) & (
        (boxes[:, 3] - boxes[:, 1]) >= min_size
    )
    candidates = np.flatnonzero(sides_ok)
    candidates = candidates[_descending_order(objectness[candidates])][:pre_nms_top_n]
    keep = nms(boxes[candidates], objectness[candidates], nms_iou)[:post_nms_top_n]
    selected = candidates[keep]
    return boxes[selected], objectness[selected]


def ohem_select(
    per_roi_losses,
    budget: int,
    boxes=None,
    dedup_iou: float = 0.7,
) -> np.ndarray:
    """
    Indices of the `budget` highest-loss ROIs in descending loss order, after
    suppressing near-duplicate ROIs (IoU above `dedup_iou`) when `boxes` are
    given.
    """
    if budget < 1:
        raise RejectedInput(f"hard-example budget must be >= 1, got {budget}")
    losses = np.asarray(per_roi_losses, dtype=np.float64)
    if boxes is None:
        ranked = _descending_order(losses)
    else:
        ranked = nms(boxes, losses, dedup_iou)
    return ranked[:budget]


def sample_rpn_anchors(
    labels: np.ndarray,
    rng: np.random.Generator,
    batch_size: int = 256,
    positive_fraction: float = 0.5,
) -> np.ndarray:
    """Subsample labelled anchors; returns a copy with surplus ones set to ignore."""
    labels = labels.copy()
    positives = np.flatnonzero(labels == POSITIVE_LABEL)
    max_positives = int(batch_size * positive_fraction)
    if len(positives) > max_positives:
        drop = rng.choice(positives, len(positives) - max_positives, replace=False)
        labels[drop] = IGNORE_LABEL
    negatives = np.flatnonzero(labels == NEGATIVE_LABEL)
    max_negatives = batch_size - int(np.sum(labels == POSITIVE_LABEL))
    if len(negatives) > max_negatives:
        drop = rng.choice(negatives, len(negatives) - max_negatives, replace=False)
        labels[drop] = IGNORE_LABEL
    return labels


def assign_roi_classes(
    rois: np.ndarray,
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray,
    foreground_iou: float = 0.5,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Class label per ROI (the matched finding's class when IoU >= `foreground_iou`,
    else negative) and the matched ground-truth index (-1 for negatives).
    """
    rois, gt_boxes = as_boxes(rois), as_boxes(gt_boxes)
    classes = np.full(len(rois), NEGATIVE, dtype=np.int64)
    matched = np.full(len(rois), -1, dtype=np.int64)
    if len(gt_boxes) == 0 or len(rois) == 0:
        return classes, matched
    overlaps = iou_matrix(rois, gt_boxes)
    best = overlaps.argmax(axis=1)
    foreground = overlaps[np.arange(len(rois)), best] >= foreground_iou
    classes[foreground] = np.asarray(gt_classes)[best[foreground]]
    matched[foreground] = best[foreground]
    return classes, matched
