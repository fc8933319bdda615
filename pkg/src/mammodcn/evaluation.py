"""
ROC curves and AUC, breast-wise and subject-wise.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import RejectedInput
from .inference import Exam, SubjectScore

logger = logging.getLogger(__name__)


def _check_scores_labels(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise RejectedInput(f"{len(scores)} scores but {len(labels)} labels")
    if not np.all(np.isfinite(scores)):
        raise RejectedInput("scores must be finite")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise RejectedInput(
            "AUC needs at least one positive and one negative label "
            f"(got {n_pos} positives of {len(labels)})"
        )
    return scores, labels


def auc(scores, labels) -> float:
    """Mann-Whitney U / (n_pos * n_neg), ties counted one half."""
    scores, labels = _check_scores_labels(scores, labels)
    ranks = pd.Series(scores).rank(method="average").to_numpy()
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def trapezoid_area(self) -> float:
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"fpr": self.fpr, "tpr": self.tpr})


def roc_curve(scores, labels) -> RocCurve:
    """One point per distinct score threshold, from (0, 0) to (1, 1)."""
    scores, labels = _check_scores_labels(scores, labels)
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    # Last index of every group of equal scores.
    group_ends = np.r_[np.flatnonzero(np.diff(scores)), len(scores) - 1]
    true_pos = np.cumsum(labels)[group_ends]
    false_pos = (group_ends + 1) - true_pos
    fpr = np.r_[0.0, false_pos / false_pos[-1]]
    tpr = np.r_[0.0, true_pos / true_pos[-1]]
    return RocCurve(fpr, tpr, auc(scores, labels))


def bootstrap_auc_interval(
    scores,
    labels,
    n_resamples: int,
    confidence: float = 0.95,
    seed: int = 0,
) -> Tuple[float, float]:
    """Percentile bootstrap interval; single-class resamples are skipped."""
    scores, labels = _check_scores_labels(scores, labels)
    if n_resamples < 1:
        raise RejectedInput(f"need at least one resample, got {n_resamples}")
    rng = np.random.default_rng(seed)
    values = []
    for _ in range(n_resamples):
        index = rng.integers(0, len(scores), len(scores))
        drawn = labels[index]
        if drawn.all() or not drawn.any():
            continue
        values.append(auc(scores[index], drawn))
    if not values:
        raise RejectedInput("every bootstrap resample held a single class")
    alpha = (1 - confidence) / 2
    low, high = np.quantile(values, [alpha, 1 - alpha])
    return float(low), float(high)


def _aggregate_of(exam: Exam, aggregates: Mapping[str, SubjectScore]) -> SubjectScore:
    try:
        return aggregates[exam.subject_id]
    except KeyError:
        raise RejectedInput(f"no aggregate for subject {exam.subject_id}") from None


def breastwise_rows(
    exams: Sequence[Exam], aggregates: Mapping[str, SubjectScore]
) -> Tuple[np.ndarray, np.ndarray]:
    """One row per breast; positive iff the breast has a malignant finding."""
    scores, labels = [], []
    for exam in exams:
        aggregate = _aggregate_of(exam, aggregates)
        if set(aggregate.laterality_scores) != set(exam.lateralities):
            raise RejectedInput(
                f"{exam.subject_id}: aggregate covers "
                f"{sorted(aggregate.laterality_scores)}, exam has "
                f"{exam.lateralities}"
            )
        for laterality in exam.lateralities:
            scores.append(aggregate.laterality_scores[laterality])
            labels.append(exam.labels[laterality])
    return np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=bool)


def subjectwise_rows(
    exams: Sequence[Exam], aggregates: Mapping[str, SubjectScore]
) -> Tuple[np.ndarray, np.ndarray]:
    """One row per subject; positive iff either breast is."""
    scores = [_aggregate_of(exam, aggregates).subject for exam in exams]
    labels = [exam.subject_label for exam in exams]
    return np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=bool)


def save_roc(
    curve: RocCurve, path: Path, interval: Optional[Tuple[float, float]] = None
):
    path = Path(path)
    curve.to_frame().to_csv(path, index=False, float_format="%.17g")
    summary = f"# auc={curve.auc:.17g}"
    if interval is not None:
        summary += f" ci_low={interval[0]:.17g} ci_high={interval[1]:.17g}"
    with open(path, "a") as f:
        f.write(summary + "\n")
    logger.info(
        f"Wrote ROC curve ({len(curve.fpr)} points, AUC {curve.auc:.4f}) to '{path}'"
    )


def load_roc(path: Path) -> RocCurve:
    path = Path(path)
    frame = pd.read_csv(path, comment="#")
    value = None
    with open(path) as f:
        for line in f:
            if line.startswith("# auc="):
                value = float(line.split()[1].partition("=")[2])
    if value is None:
        raise RejectedInput(f"no AUC summary line in '{path}'")
    return RocCurve(frame["fpr"].to_numpy(), frame["tpr"].to_numpy(), value)
