from __future__ import annotations

import importlib.resources as resources
from typing import Mapping, Optional, Sequence, Tuple

import matplotlib as mpl
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from matplotlib.figure import Figure
from matplotlib.patches import Rectangle

from .detection import CLASS_NAMES, MALIGNANT, BBox
from .evaluation import RocCurve

# Matplotlib TkAgg backend hogs memory and crashes with too many figures:
# https://github.com/matplotlib/matplotlib/issues/21950
mpl.use("agg")

with resources.as_file(
    resources.files("mammodcn.resources") / "matplotlib-style"
) as path:
    mpl.style.use(path)  # pyright: reportGeneralTypeIssues=false


_CHANCE_KWS = dict(color="0.6", lw=0.8, ls="--")
_BOX_COLORS = {MALIGNANT: "#d62728"}
_DEFAULT_BOX_COLOR = "#ff7f0e"


def plot_roc(
    curves: Mapping[str, RocCurve],
    title: Optional[str] = None,
    intervals: Optional[Mapping[str, Tuple[float, float]]] = None,
) -> Figure:
    """One panel with a step curve per entry of `curves`, AUC in the legend."""
    fig, ax = plt.subplots(figsize=(4.8, 4.8))
    fig.suptitle(title)
    ax.plot([0, 1], [0, 1], **_CHANCE_KWS)
    intervals = intervals or {}
    for label, curve in curves.items():
        legend = f"{label} (AUC {curve.auc:.3f}"
        if label in intervals:
            low, high = intervals[label]
            legend += f", {low:.3f}-{high:.3f}"
        ax.plot(curve.fpr, curve.tpr, lw=1.5, label=legend + ")")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_aspect("equal")
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.legend(loc="lower right")
    return fig


def plot_image_with_boxes(
    image: np.ndarray,
    findings: pd.DataFrame,
    title: Optional[str] = None,
    ax=None,
) -> Figure:
    """
    Image in [0, 1] with its ground-truth findings (rows with row_min, col_min,
    row_max, col_max and cls) drawn as rectangles.
    """
    if ax is None:
        fig, ax = plt.subplots(figsize=(4.0, 4.0))
    else:
        fig = ax.figure
    ax.imshow(image, vmin=0.0, vmax=1.0)
    ax.grid(False)
    ax.set_xticks([])
    ax.set_yticks([])
    ax.set_title(title)
    for row in findings.itertuples():
        box = BBox(row.row_min, row.col_min, row.row_max, row.col_max)
        color = _BOX_COLORS.get(int(row.cls), _DEFAULT_BOX_COLOR)
        # imshow puts pixel centers on integers; box edges sit on pixel borders.
        ax.add_patch(
            Rectangle(
                (box.col_min - 0.5, box.row_min - 0.5),
                box.width,
                box.height,
                fill=False,
                lw=1.0,
                edgecolor=color,
            )
        )
        ax.annotate(
            f"{CLASS_NAMES[int(row.cls)]} {row.kind}",
            (box.col_min - 0.5, box.row_min - 0.5),
            xytext=(0, 2),
            textcoords="offset points",
            color=color,
            fontsize=6,
        )
    return fig


def plot_exam(
    images: Sequence[Tuple[str, np.ndarray, pd.DataFrame]],
    title: Optional[str] = None,
) -> Figure:
    """A row of annotated images, e.g. the four views of one exam."""
    fig, axs = plt.subplots(
        ncols=len(images), figsize=(2.6 * len(images), 3.0), squeeze=False
    )
    fig.suptitle(title)
    for ax, (label, image, findings) in zip(axs[0], images):
        plot_image_with_boxes(image, findings, title=label, ax=ax)
    return fig
