from dataclasses import dataclass
from typing import List

import numpy as np
import pytest

from mammodcn.config import AnchorConfig
from mammodcn.detection import (
    BENIGN,
    IGNORE_LABEL,
    MALIGNANT,
    NEGATIVE,
    NEGATIVE_LABEL,
    POSITIVE_LABEL,
    BBox,
    Detection,
    assign_roi_classes,
    assign_rpn_labels,
    clip_boxes,
    decode_box,
    encode_box,
    generate_anchors,
    iou,
    iou_matrix,
    nms,
    ohem_select,
    propose,
    sample_rpn_anchors,
)
from mammodcn.errors import RejectedInput

from .util import random_boxes, reference_nms


@dataclass
class IouCase:
    a: BBox
    b: BBox
    expected: float


iou_cases = [
    IouCase(BBox(0, 0, 2, 2), BBox(0, 0, 2, 2), 1.0),
    IouCase(BBox(0, 0, 2, 2), BBox(1, 0, 3, 2), 1 / 3),
    IouCase(BBox(0, 0, 2, 2), BBox(2, 2, 4, 4), 0.0),  # touching corners
    IouCase(BBox(0, 0, 4, 4), BBox(1, 1, 3, 3), 0.25),  # contained
    IouCase(BBox(1, 1, 1, 1), BBox(1, 1, 1, 1), 0.0),  # degenerate
]


@pytest.mark.parametrize("case", iou_cases)
def test_iou(case: IouCase):
    assert iou(case.a, case.b) == pytest.approx(case.expected)
    assert iou(case.b, case.a) == pytest.approx(case.expected)


def test_bbox_rejects_swapped_corners():
    with pytest.raises(RejectedInput):
        BBox(2, 0, 1, 1)


def test_detection_scores_must_be_a_distribution():
    with pytest.raises(RejectedInput):
        Detection(BBox(0, 0, 1, 1), [0.5, 0.5, 0.5], 1.0)
    with pytest.raises(RejectedInput):
        Detection(BBox(0, 0, 1, 1), [0.5, 0.5], 1.0)
    assert Detection(BBox(0, 0, 1, 1), [0.1, 0.2, 0.7], 1.0).malignant_score == 0.7


def test_anchor_layout():
    cfg = AnchorConfig(
        base_scales=[8.0, 16.0], aspect_ratios=[0.5, 1.0, 2.0], stride=16
    )
    anchors = generate_anchors(cfg, 2, 3)
    assert anchors.shape == (2 * 3 * 6, 4)
    heights = anchors[:, 2] - anchors[:, 0]
    widths = anchors[:, 3] - anchors[:, 1]
    np.testing.assert_allclose(heights * widths, np.tile([64] * 3 + [256] * 3, 6))
    np.testing.assert_allclose(heights[:3] / widths[:3], [0.5, 1.0, 2.0])
    # Second location is one stride to the right of the first.
    np.testing.assert_allclose(anchors[6:12, 1] - anchors[:6, 1], 16.0)
    centers = (anchors[:, :2] + anchors[:, 2:]) / 2
    np.testing.assert_allclose(centers[0], [8.0, 8.0])


def test_rpn_label_flips_from_ignore_to_positive_at_half():
    gt = np.array([[0.0, 0.0, 10.0, 10.0]])
    exact = [0.0, 0.0, 10.0, 10.0]  # best match of the finding
    at_threshold = [0.0, 0.0, 10.0, 5.0]  # half of the finding
    below = [0.0, 0.0, 10.0, 4.5]
    labels, matched = assign_rpn_labels(np.array([exact, at_threshold, below]), gt)
    assert iou_matrix([at_threshold], gt)[0, 0] == 0.5
    assert list(labels) == [POSITIVE_LABEL, POSITIVE_LABEL, IGNORE_LABEL]
    assert list(matched) == [0, 0, 0]


def test_rpn_labels_negative_and_best_match():
    gt = np.array([[0.0, 0.0, 10.0, 10.0]])
    anchors = np.array(
        [
            [50.0, 50.0, 60.0, 60.0],  # no overlap: negative
            [0.0, 0.0, 30.0, 30.0],  # IoU 1/9, but the best match: positive
        ]
    )
    labels, _ = assign_rpn_labels(anchors, gt)
    assert list(labels) == [NEGATIVE_LABEL, POSITIVE_LABEL]
    labels, matched = assign_rpn_labels(anchors, np.zeros((0, 4)))
    assert list(labels) == [NEGATIVE_LABEL, NEGATIVE_LABEL]
    assert list(matched) == [-1, -1]


def test_every_finding_gets_a_positive_anchor():
    anchors = generate_anchors(AnchorConfig(), 4, 4)
    rng = np.random.default_rng(8)
    for _ in range(50):
        gt = random_boxes(rng, int(rng.integers(1, 5)), side=64.0)
        labels, _ = assign_rpn_labels(anchors, gt)
        best = iou_matrix(anchors, gt).argmax(axis=0)
        assert np.all(labels[best] == POSITIVE_LABEL)


def test_finding_outside_every_anchor_is_rejected():
    anchors = np.array([[0.0, 0.0, 10.0, 10.0], [5.0, 5.0, 15.0, 15.0]])
    with pytest.raises(RejectedInput):
        assign_rpn_labels(anchors, [[0.0, 0.0, 4.0, 4.0], [40.0, 40.0, 50.0, 50.0]])
    # A zero-area box needs no anchor.
    labels, _ = assign_rpn_labels(anchors, [[40.0, 40.0, 40.0, 50.0]])
    assert list(labels) == [NEGATIVE_LABEL, NEGATIVE_LABEL]


def test_box_coding_roundtrip_and_identity():
    rng = np.random.default_rng(0)
    anchors = random_boxes(rng, 50)
    gt = random_boxes(rng, 50)
    np.testing.assert_allclose(decode_box(anchors, encode_box(anchors, gt)), gt)
    np.testing.assert_allclose(encode_box(anchors, anchors), 0.0, atol=1e-15)


def test_degenerate_boxes_rejected_by_coding():
    with pytest.raises(RejectedInput):
        encode_box([[0.0, 0.0, 0.0, 2.0]], [[0.0, 0.0, 2.0, 2.0]])
    with pytest.raises(RejectedInput):
        decode_box([[0.0, 0.0, 2.0, 0.0]], [[0.0, 0.0, 0.0, 0.0]])


def test_clip_boxes():
    clipped = clip_boxes([[-5.0, 3.0, 40.0, 70.0]], (32, 64))
    np.testing.assert_array_equal(clipped, [[0.0, 3.0, 32.0, 64.0]])


def test_nms_matches_quadratic_reference():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        boxes = random_boxes(rng, 200)
        # Coarse scores produce ties, broken by index in both implementations.
        scores = np.round(rng.uniform(size=200), 2)
        threshold = [0.1, 0.3, 0.7][trial % 3]
        assert list(nms(boxes, scores, threshold)) == reference_nms(
            boxes, scores, threshold
        )


def test_nms_survivors_shrink_with_the_threshold():
    rng = np.random.default_rng(1)
    for _ in range(200):
        boxes = random_boxes(rng, 200)
        scores = rng.uniform(size=200)
        strict = nms(boxes, scores, 0.1)
        loose = nms(boxes, scores, 0.7)
        assert len(strict) <= len(loose)
        kept = boxes[strict]
        overlaps = iou_matrix(kept, kept) - np.eye(len(kept))
        assert overlaps.max(initial=0.0) <= 0.1


def test_nms_edge_cases():
    assert len(nms(np.zeros((0, 4)), np.zeros(0), 0.5)) == 0
    same = np.array([[0.0, 0.0, 1.0, 1.0]] * 3)
    assert list(nms(same, [0.5, 0.5, 0.5], 0.5)) == [0]
    with pytest.raises(RejectedInput):
        nms(same, [0.5, 0.5, 0.5], 1.5)


def test_propose_respects_budgets():
    rng = np.random.default_rng(2)
    cfg = AnchorConfig(base_scales=[8.0, 16.0], aspect_ratios=[1.0], stride=8)
    anchors = generate_anchors(cfg, 8, 8)
    objectness = rng.uniform(size=len(anchors))
    deltas = rng.normal(0.0, 0.1, (len(anchors), 4))
    boxes, scores = propose(
        objectness, deltas, anchors, (64, 64), pre_nms_top_n=40, post_nms_top_n=5
    )
    assert len(boxes) <= 5
    assert np.all(np.diff(scores) <= 0)
    assert boxes.min() >= 0 and boxes.max() <= 64
    assert np.all(boxes[:, 2] - boxes[:, 0] >= 4.0)
    overlaps = iou_matrix(boxes, boxes) - np.eye(len(boxes))
    assert overlaps.max(initial=0.0) <= 0.1


def test_propose_rejects_misaligned_inputs():
    with pytest.raises(RejectedInput):
        propose(np.zeros(3), np.zeros((2, 4)), np.ones((3, 4)), (8, 8))


@dataclass
class OhemCase:
    losses: List[float]
    budget: int
    expected: List[int]


ohem_cases = [
    OhemCase([0.1, 0.9, 0.5, 0.7], 2, [1, 3]),
    OhemCase([0.1, 0.9], 5, [1, 0]),  # budget above the ROI count
    OhemCase([0.5, 0.5, 0.2], 2, [0, 1]),  # ties by index
]


@pytest.mark.parametrize("case", ohem_cases)
def test_ohem_select(case: OhemCase):
    assert list(ohem_select(case.losses, case.budget)) == case.expected


def test_ohem_suppresses_duplicates():
    boxes = np.array(
        [[0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 10.5], [20.0, 20.0, 30.0, 30.0]]
    )
    selected = ohem_select([0.9, 0.8, 0.1], 2, boxes, dedup_iou=0.7)
    assert list(selected) == [0, 2]
    with pytest.raises(RejectedInput):
        ohem_select([0.1], 0)


def test_rpn_anchor_sampling_caps_positives():
    rng = np.random.default_rng(0)
    labels = np.array([POSITIVE_LABEL] * 200 + [NEGATIVE_LABEL] * 500 + [-1] * 10)
    sampled = sample_rpn_anchors(labels, rng, batch_size=256)
    assert np.sum(sampled == POSITIVE_LABEL) == 128
    assert np.sum(sampled == NEGATIVE_LABEL) == 128
    assert np.sum(labels == POSITIVE_LABEL) == 200  # input untouched

    few = np.array([POSITIVE_LABEL] * 3 + [NEGATIVE_LABEL] * 10)
    np.testing.assert_array_equal(sample_rpn_anchors(few, rng, batch_size=256), few)


def test_roi_classes():
    gt = np.array([[0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0]])
    rois = np.array(
        [[0.0, 0.0, 10.0, 10.0], [21.0, 21.0, 30.0, 30.0], [40.0, 40.0, 50.0, 50.0]]
    )
    classes, matched = assign_roi_classes(rois, gt, np.array([BENIGN, MALIGNANT]))
    assert list(classes) == [BENIGN, MALIGNANT, NEGATIVE]
    assert list(matched) == [0, 1, -1]
