"""
Losses, the momentum SGD optimizer and the end-to-end training loop (one image
per step, OHEM over the ROI head).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, TypedDict

import click
import numpy as np
import pandas as pd

from .config import DetectionConfig, TrainConfig
from .detection import (
    IGNORE_LABEL,
    NEGATIVE,
    POSITIVE_LABEL,
    as_boxes,
    assign_roi_classes,
    assign_rpn_labels,
    encode_box,
    ohem_select,
    sample_rpn_anchors,
)
from .errors import RejectedInput, TrainingError
from .inference import DihedralTransform, apply_transform, transform_box
from .network import Network, RoiPass, roi_boxes, softmax
from .weights import ModelParams

logger = logging.getLogger(__name__)

LOSS_COMPONENTS = ("rpn_cls", "rpn_reg", "roi_cls", "roi_reg")


class LossBreakdown(TypedDict):
    rpn_cls: float
    rpn_reg: float
    roi_cls: float
    roi_reg: float
    total: float


@dataclass
class TrainSample:
    """One training image with its findings, boxes in image pixels."""

    image_id: str
    image: np.ndarray
    boxes: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        self.boxes = as_boxes(self.boxes)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.classes):
            raise RejectedInput(
                f"{self.image_id}: {len(self.boxes)} boxes but "
                f"{len(self.classes)} class labels"
            )

    def transformed(self, t: DihedralTransform) -> TrainSample:
        extents = self.image.shape[-2:]
        boxes = [transform_box(b, t, extents).to_array() for b in self.boxes]
        return TrainSample(
            self.image_id, apply_transform(self.image, t), boxes, self.classes
        )


def softmax_xent(logits, label: int) -> Tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size < 2:
        raise RejectedInput(f"need a vector of >= 2 logits, got shape {logits.shape}")
    if not 0 <= label < logits.size:
        raise RejectedInput(f"label {label} outside [0, {logits.size})")
    shifted = logits - logits.max()
    log_norm = np.log(np.sum(np.exp(shifted)))
    loss = float(log_norm - shifted[label])
    grad = softmax(logits)
    grad[label] -= 1.0
    return loss, grad


def smooth_l1(pred, target) -> Tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise RejectedInput(f"shape mismatch: {pred.shape} vs {target.shape}")
    d = pred - target
    small = np.abs(d) < 1.0
    loss = float(np.sum(np.where(small, 0.5 * d * d, np.abs(d) - 0.5)))
    grad = np.where(small, d, np.sign(d))
    return loss, grad


@dataclass
class SgdState:
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def sgd_step(
    params: ModelParams,
    grads: Dict[str, np.ndarray],
    cfg: TrainConfig,
    state: Optional[SgdState] = None,
) -> ModelParams:
    """Momentum SGD with weight decay, in place. Buffers are never updated."""
    state = SgdState() if state is None else state
    state.step += 1
    for name in params.learnable_names():
        if name not in grads:
            raise TrainingError(f"missing gradient for {name} at step {state.step}")
        grad = grads[name]
        if grad.shape != params[name].shape:
            raise TrainingError(
                f"gradient shape {grad.shape} for {name} does not match "
                f"{params[name].shape}"
            )
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient for {name} at step {state.step}")
    for name in params.learnable_names():
        update = grads[name] + cfg.weight_decay * params[name]
        velocity = state.velocity.get(name)
        if velocity is None:
            velocity = np.zeros_like(update)
        velocity = cfg.momentum * velocity + update
        state.velocity[name] = velocity
        params[name] = params[name] - cfg.learning_rate * velocity
    return params


@dataclass
class ImageLoss:
    losses: LossBreakdown
    grads: Dict[str, np.ndarray]
    selected: np.ndarray
    n_rois: int


def image_loss(
    net: Network,
    sample: TrainSample,
    train: TrainConfig,
    det: DetectionConfig,
    rng: np.random.Generator,
    rois=None,
) -> ImageLoss:
    """
    Forward, loss and backward for one image. ROIs are the proposals plus the
    ground-truth boxes unless `rois` fixes them.
    """
    fp = net.forward(sample.image)
    n_anchors = len(fp.anchors)

    # RPN: sampled anchors, both benign and malignant findings are foreground.
    labels, matched = assign_rpn_labels(
        fp.anchors, sample.boxes, det.rpn_positive_iou, det.rpn_negative_iou
    )
    labels = sample_rpn_anchors(labels, rng, batch_size=det.rpn_batch)
    sampled = np.flatnonzero(labels != IGNORE_LABEL)
    positives = np.flatnonzero(labels == POSITIVE_LABEL)
    grad_rpn_logits = np.zeros((n_anchors, 2))
    grad_rpn_deltas = np.zeros((n_anchors, 4))
    rpn_cls = 0.0
    for a in sampled:
        loss, grad = softmax_xent(fp.rpn_logits[a], int(labels[a]))
        rpn_cls += loss / len(sampled)
        grad_rpn_logits[a] = train.rpn_cls_weight * grad / len(sampled)
    rpn_reg = 0.0
    if len(positives):
        targets = encode_box(fp.anchors[positives], sample.boxes[matched[positives]])
        for a, target in zip(positives, targets):
            loss, grad = smooth_l1(fp.rpn_deltas[a], target)
            rpn_reg += loss / len(positives)
            grad_rpn_deltas[a] = train.rpn_reg_weight * grad / len(positives)

    # ROI head with OHEM.
    if rois is None:
        proposals, _ = net.proposals(fp, det)
        rois = np.concatenate([proposals, sample.boxes])
    rois = roi_boxes(rois)
    classes, roi_matched = assign_roi_classes(
        rois, sample.boxes, sample.classes, det.roi_foreground_iou
    )
    passes: List[RoiPass] = []
    per_roi = []
    for box, cls, gt in zip(rois, classes, roi_matched):
        rp = net.roi_forward(fp, box)
        cls_loss, cls_grad = softmax_xent(rp.logits, int(cls))
        reg_loss, reg_grad = 0.0, np.zeros(4)
        if cls != NEGATIVE:
            target = encode_box(box[None], sample.boxes[gt][None])[0]
            reg_loss, reg_grad = smooth_l1(rp.deltas, target)
        passes.append(rp)
        per_roi.append((cls_loss, cls_grad, reg_loss, reg_grad))
    totals = [c + r for c, _, r, _ in per_roi]
    selected = np.zeros(0, dtype=np.int64)
    if len(rois):
        selected = ohem_select(totals, train.ohem_budget, rois, det.ohem_dedup_iou)
    roi_cls = 0.0
    roi_reg = 0.0
    roi_grads = []
    for i in selected:
        cls_loss, cls_grad, reg_loss, reg_grad = per_roi[i]
        roi_cls += cls_loss / len(selected)
        roi_reg += reg_loss / len(selected)
        roi_grads.append(
            (
                passes[i],
                train.roi_cls_weight * cls_grad / len(selected),
                train.roi_reg_weight * reg_grad / len(selected),
            )
        )

    grads = net.backward(fp, grad_rpn_logits, grad_rpn_deltas, roi_grads)
    losses: LossBreakdown = {
        "rpn_cls": rpn_cls,
        "rpn_reg": rpn_reg,
        "roi_cls": roi_cls,
        "roi_reg": roi_reg,
        "total": train.rpn_cls_weight * rpn_cls
        + train.rpn_reg_weight * rpn_reg
        + train.roi_cls_weight * roi_cls
        + train.roi_reg_weight * roi_reg,
    }
    return ImageLoss(losses, grads, selected, len(rois))


def train_step(
    net: Network,
    sample: TrainSample,
    train: TrainConfig,
    det: DetectionConfig,
    state: SgdState,
    rng: np.random.Generator,
    rois=None,
) -> LossBreakdown:
    result = image_loss(net, sample, train, det, rng, rois)
    for name, value in result.losses.items():
        if not np.isfinite(value):
            raise TrainingError(f"non-finite {name} loss at step {state.step + 1}")
    sgd_step(net.params, result.grads, train, state)
    return result.losses


def warmup_norm(net: Network, images: Sequence[np.ndarray], train: TrainConfig):
    """Update running normalization statistics from per-image statistics."""
    images = list(images)[: train.norm_warmup_images]
    for image in images:
        net.forward(
            image, norm_mode="moving_average", norm_momentum=train.norm_momentum
        )
    logger.info(f"Warmed up normalization statistics on {len(images)} images")


def epoch_variants(
    n_samples: int, train: TrainConfig, epoch: int
) -> List[Tuple[int, DihedralTransform]]:
    """The (sample index, transform) visiting order of one epoch."""
    transforms = DihedralTransform.ALL if train.augment else (DihedralTransform(),)
    variants = [(i, t) for i in range(n_samples) for t in transforms]
    if train.shuffle:
        rng = np.random.default_rng([train.seed, epoch])
        variants = [variants[i] for i in rng.permutation(len(variants))]
    return variants


def train_epoch(
    net: Network,
    samples: Sequence[TrainSample],
    train: TrainConfig,
    det: DetectionConfig,
    state: Optional[SgdState] = None,
    epoch: int = 0,
) -> Tuple[Network, pd.DataFrame]:
    if not samples:
        raise RejectedInput("training set is empty")
    state = SgdState() if state is None else state
    rng = np.random.default_rng([train.seed, epoch, 1])
    variants = epoch_variants(len(samples), train, epoch)
    rows = []
    with click.progressbar(
        variants, label=f"Epoch {epoch}", file=click.get_text_stream("stderr")
    ) as bar:
        for index, t in bar:
            sample = samples[index].transformed(t)
            losses = train_step(net, sample, train, det, state, rng)
            row = {
                "epoch": epoch,
                "step": state.step,
                "image_id": sample.image_id,
                "rot": t.rot_quarter,
                "flip": t.hflip,
            }
            row.update(losses)
            rows.append(row)
            logger.debug(
                f"step {state.step} {sample.image_id} "
                + " ".join(f"{k}={v:.4f}" for k, v in losses.items())
            )
    log = pd.DataFrame.from_records(rows)
    columns = list(LOSS_COMPONENTS) + ["total"]
    summary = log[columns].describe().loc[["mean", "min", "max"]]
    logger.info(f"Epoch {epoch} done, {len(log)} steps. Losses:\n{summary}")
    return net, log


def fit(
    net: Network,
    samples: Sequence[TrainSample],
    train_cfg: TrainConfig,
    det: DetectionConfig,
) -> Tuple[Network, pd.DataFrame]:
    warmup_norm(net, [s.image for s in samples], train_cfg)
    state = SgdState()
    logs = []
    for epoch in range(train_cfg.epochs):
        net, log = train_epoch(net, samples, train_cfg, det, state, epoch)
        logs.append(log)
    return net, pd.concat(logs, ignore_index=True)
