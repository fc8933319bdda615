"""
Dihedral augmentation, per-image malignancy scores and the breast-wise /
subject-wise aggregation of those scores.

Scores of one breast are averaged over its views and augmentations; the
subject score is the maximum over the two breasts.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, ClassVar, Dict, Iterable, List, Literal, Sequence, Tuple

import click
import numpy as np
import pandas as pd

from .config import DetectionConfig, InferenceConfig
from .detection import BBox, Detection
from .errors import RejectedInput

logger = logging.getLogger(__name__)

LATERALITIES = ("L", "R")
VIEWS = ("CC", "MLO")

SCORE_TABLE_COLUMNS = [
    "subject_id",
    "laterality",
    "view",
    "image_id",
    "rot",
    "flip",
    "score",
]


@dataclass(frozen=True)
class DihedralTransform:
    """
    Horizontal flip (if `hflip`) followed by `rot_quarter` counter-clockwise
    quarter turns. Exact pixel permutations only.
    """

    rot_quarter: int = 0
    hflip: bool = False

    ALL: ClassVar[Tuple[DihedralTransform, ...]]

    def __post_init__(self):
        if self.rot_quarter not in range(4):
            raise RejectedInput(f"rot_quarter must be 0..3, got {self.rot_quarter}")

    def compose(self, other: DihedralTransform) -> DihedralTransform:
        """The transform applying `other` first, then `self`."""
        sign = -1 if self.hflip else 1
        return DihedralTransform(
            (self.rot_quarter + sign * other.rot_quarter) % 4,
            self.hflip != other.hflip,
        )

    def inverse(self) -> DihedralTransform:
        if self.hflip:
            return self
        return DihedralTransform(-self.rot_quarter % 4, False)

    @property
    def is_identity(self) -> bool:
        return self.rot_quarter == 0 and not self.hflip

    def __str__(self):
        return f"rot{self.rot_quarter * 90}{'+flip' if self.hflip else ''}"


DihedralTransform.ALL = tuple(
    DihedralTransform(k, f) for f in (False, True) for k in range(4)
)
IDENTITY = DihedralTransform()


def apply_transform(image: np.ndarray, t: DihedralTransform) -> np.ndarray:
    """Transform the last two axes of `image`."""
    out = np.asarray(image)
    if t.hflip:
        out = np.flip(out, axis=-1)
    out = np.rot90(out, t.rot_quarter, axes=(-2, -1))
    return np.ascontiguousarray(out)


def transform_box(box, t: DihedralTransform, extents: Tuple[int, int]) -> BBox:
    """Map a pixel box through `t` on an image of the given (height, width)."""
    if not isinstance(box, BBox):
        box = BBox.from_array(box)
    height, width = extents
    corners = np.array([[box.row_min, box.col_min], [box.row_max, box.col_max]])
    if t.hflip:
        corners[:, 1] = width - corners[:, 1]
    for _ in range(t.rot_quarter):
        # A counter-clockwise quarter turn sends (r, c) to (W - c, r).
        corners = np.stack([width - corners[:, 1], corners[:, 0]], axis=1)
        height, width = width, height
    low = corners.min(axis=0)
    high = corners.max(axis=0)
    return BBox(low[0], low[1], high[0], high[1])


@dataclass
class Exam:
    subject_id: str
    images: Dict[Tuple[str, str], str]
    labels: Dict[str, bool]

    def __post_init__(self):
        for laterality, view in self.images:
            if laterality not in LATERALITIES or view not in VIEWS:
                raise RejectedInput(
                    f"{self.subject_id}: unknown image key ({laterality}, {view})"
                )
        present = set(self.lateralities)
        if set(self.labels) != present:
            raise RejectedInput(
                f"{self.subject_id}: labels for {sorted(self.labels)} but images "
                f"for {sorted(present)}"
            )

    @property
    def lateralities(self) -> List[str]:
        return sorted({laterality for laterality, _ in self.images})

    def images_of(self, laterality: str) -> List[Tuple[str, str]]:
        """(view, image id) pairs of one breast."""
        return sorted(
            (view, image_id)
            for (lat, view), image_id in self.images.items()
            if lat == laterality
        )

    @property
    def subject_label(self) -> bool:
        return any(self.labels.values())


def image_score(
    detections: Sequence[Detection],
    rule: Literal["max", "mean_top_k"] = "max",
    top_k: int = 3,
) -> float:
    """Malignancy score of one image; 0 without detections."""
    scores = sorted((d.malignant_score for d in detections), reverse=True)
    if not scores:
        return 0.0
    if rule == "max":
        return scores[0]
    if rule == "mean_top_k":
        best = scores[:top_k]
        return math.fsum(best) / len(best)
    raise RejectedInput(f"unknown image score rule {rule!r}")


def build_score_table(
    detect: Callable[[np.ndarray], Sequence[Detection]],
    exams: Sequence[Exam],
    load_image: Callable[[str], np.ndarray],
    cfg: InferenceConfig,
    transforms: Iterable[DihedralTransform] = DihedralTransform.ALL,
) -> pd.DataFrame:
    transforms = list(transforms)
    jobs = [
        (exam, laterality, view, image_id)
        for exam in exams
        for (laterality, view), image_id in sorted(exam.images.items())
    ]
    rows = []
    with click.progressbar(
        jobs, label="Scoring images", file=click.get_text_stream("stderr")
    ) as bar:
        for exam, laterality, view, image_id in bar:
            image = load_image(image_id)
            for t in transforms:
                score = image_score(
                    detect(apply_transform(image, t)), cfg.image_score, cfg.top_k
                )
                rows.append(
                    (
                        exam.subject_id,
                        laterality,
                        view,
                        image_id,
                        t.rot_quarter,
                        t.hflip,
                        score,
                    )
                )
    table = pd.DataFrame.from_records(rows, columns=SCORE_TABLE_COLUMNS)
    logger.info(
        f"Scored {len(jobs)} images x {len(transforms)} transforms "
        f"({len(table)} rows)"
    )
    return table


def network_detector(net, det: DetectionConfig) -> Callable[[np.ndarray], List]:
    def detect(image: np.ndarray) -> List[Detection]:
        return net.detect(image, det)

    return detect


def check_score_table(table: pd.DataFrame) -> pd.DataFrame:
    missing = set(SCORE_TABLE_COLUMNS) - set(table.columns)
    if missing:
        raise RejectedInput(f"score table lacks columns {sorted(missing)}")
    scores = table["score"].to_numpy(dtype=np.float64)
    if np.any(~np.isfinite(scores)) or np.any(scores < 0) or np.any(scores > 1):
        raise RejectedInput("score table holds scores outside [0, 1]")
    return table


@dataclass
class SubjectScore:
    subject_id: str
    laterality_scores: Dict[str, float]
    subject: float


def aggregate_subject(
    table: pd.DataFrame,
    exam: Exam,
    rule: Literal["mean", "max"] = "mean",
    transforms: Iterable[DihedralTransform] = DihedralTransform.ALL,
) -> SubjectScore:
    """
    Per-breast aggregate over every (view, transform) score, then the maximum
    over breasts. Every (image, transform) pair of the exam must be present.
    """
    transforms = list(transforms)
    rows = table[table["image_id"].isin(list(exam.images.values()))]
    lookup: Dict[Tuple[str, int, bool], float] = {}
    for image_id, rot, flip, score in zip(
        rows["image_id"], rows["rot"], rows["flip"], rows["score"]
    ):
        key = (str(image_id), int(rot), bool(flip))
        if key in lookup:
            raise RejectedInput(f"duplicate score for image {image_id} ({rot}, {flip})")
        lookup[key] = float(score)

    laterality_scores = {}
    for laterality in exam.lateralities:
        values = []
        for view, image_id in exam.images_of(laterality):
            for t in transforms:
                key = (image_id, t.rot_quarter, t.hflip)
                if key not in lookup:
                    raise RejectedInput(
                        f"{exam.subject_id}: no score for {laterality}-{view} "
                        f"image {image_id} under {t}"
                    )
                values.append(lookup[key])
        if rule == "mean":
            laterality_scores[laterality] = math.fsum(values) / len(values)
        elif rule == "max":
            laterality_scores[laterality] = max(values)
        else:
            raise RejectedInput(f"unknown aggregation rule {rule!r}")
    return SubjectScore(
        exam.subject_id, laterality_scores, max(laterality_scores.values())
    )


def aggregate_exams(
    table: pd.DataFrame,
    exams: Sequence[Exam],
    rule: Literal["mean", "max"] = "mean",
    transforms: Iterable[DihedralTransform] = DihedralTransform.ALL,
) -> Dict[str, SubjectScore]:
    check_score_table(table)
    transforms = list(transforms)
    return {
        exam.subject_id: aggregate_subject(table, exam, rule, transforms)
        for exam in exams
    }


def table_transforms(table: pd.DataFrame) -> List[DihedralTransform]:
    """The distinct transforms a score table was built with."""
    pairs = sorted({(int(r), bool(f)) for r, f in zip(table["rot"], table["flip"])})
    return [DihedralTransform(r, f) for r, f in pairs]


def save_score_table(table: pd.DataFrame, path: Path):
    path = Path(path)
    table.to_csv(path, index=False, float_format="%.17g")
    logger.info(f"Wrote score table with {len(table)} rows to '{path}'")


def load_score_table(path: Path) -> pd.DataFrame:
    table = pd.read_csv(path, dtype={"subject_id": str, "image_id": str})
    return check_score_table(table)
