"""
On-disk phantom dataset: one plain 16-bit PGM per image plus feather tables
for the image index, the ground-truth findings and the device gammas.
Intensities stay raw on disk and are normalized through the device LUT on
load.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence

import numpy as np
import pandas as pd

from .config import PhantomSpec
from .detection import BBox
from .errors import RejectedInput
from .inference import Exam
from .phantom import (
    RAW_LEVELS,
    DeviceLut,
    PhantomExam,
    device_id_for,
    normalize_intensity,
)
from .trainer import TrainSample

logger = logging.getLogger(__name__)

INDEX_FILE = "index.feather"
FINDINGS_FILE = "findings.feather"
DEVICES_FILE = "devices.feather"
IMAGE_DIR = "images"

_FINDING_DTYPES = {
    "image_id": "str",
    "row_min": "float64",
    "col_min": "float64",
    "row_max": "float64",
    "col_max": "float64",
    "cls": "int64",
    "kind": "str",
}
FINDING_COLUMNS = list(_FINDING_DTYPES)


def write_pgm(path: Path, raw: np.ndarray, maxval: int = RAW_LEVELS - 1):
    """Plain (ASCII) graymap; maxval above 255 means 16-bit samples."""
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise RejectedInput(f"PGM images are 2-D, got shape {raw.shape}")
    if raw.size and (raw.min() < 0 or raw.max() > maxval):
        raise RejectedInput(f"pixel values outside [0, {maxval}]")
    height, width = raw.shape
    lines = [f"P2\n{width} {height}\n{maxval}"]
    lines.extend(" ".join(str(int(v)) for v in row) for row in raw)
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path: Path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text().splitlines():
        tokens.extend(line.partition("#")[0].split())
    if not tokens or tokens[0] != "P2":
        raise RejectedInput(f"'{path}' is not a plain PGM file")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
        values = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    except ValueError as e:
        raise RejectedInput(f"'{path}': malformed PGM ({e})") from e
    if values.size != width * height:
        raise RejectedInput(
            f"'{path}': expected {width * height} samples, found {values.size}"
        )
    if values.size and (values.min() < 0 or values.max() > maxval):
        raise RejectedInput(f"'{path}': sample outside [0, {maxval}]")
    return values.reshape(height, width).astype(np.uint16)


def save_dataset(
    root: Path, splits: Mapping[str, Sequence[PhantomExam]], spec: PhantomSpec
):
    root = Path(root)
    (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    index_rows = []
    finding_rows = []
    for split, exams in splits.items():
        for phantom in exams:
            for image in phantom.images.values():
                write_pgm(root / IMAGE_DIR / f"{image.image_id}.pgm", image.raw)
                index_rows.append(
                    {
                        "image_id": image.image_id,
                        "subject_id": image.subject_id,
                        "laterality": image.laterality,
                        "view": image.view,
                        "device_id": image.device_id,
                        "split": split,
                        "malignant": phantom.exam.labels[image.laterality],
                    }
                )
                for finding in image.findings:
                    box = finding.box
                    finding_rows.append(
                        (
                            image.image_id,
                            box.row_min,
                            box.col_min,
                            box.row_max,
                            box.col_max,
                            finding.cls,
                            finding.kind,
                        )
                    )
    index = pd.DataFrame.from_records(index_rows)
    findings = pd.DataFrame.from_records(finding_rows, columns=FINDING_COLUMNS)
    findings = findings.astype(_FINDING_DTYPES)
    devices = pd.DataFrame(
        {
            "device_id": [device_id_for(i) for i in range(len(spec.device_gammas))],
            "gamma": pd.Series(spec.device_gammas, dtype="float64"),
        }
    )
    for frame, name in (
        (index, INDEX_FILE),
        (findings, FINDINGS_FILE),
        (devices, DEVICES_FILE),
    ):
        frame.to_feather(root / name)
    logger.info(
        f"Saved {len(index)} images and {len(findings)} findings to '{root}' "
        f"({_get_dir_size_MiB(root):.1f} MiB)."
    )


class PhantomDataset:
    """A saved dataset, read lazily image by image."""

    def __init__(self, root: Path):
        self.root = Path(root)
        for name in (INDEX_FILE, FINDINGS_FILE, DEVICES_FILE):
            if not (self.root / name).exists():
                raise RejectedInput(f"no dataset at '{self.root}' (missing {name})")
        logger.info(f"Reading dataset from '{self.root}'.")
        self.index = pd.read_feather(self.root / INDEX_FILE).set_index("image_id")
        self.findings = pd.read_feather(self.root / FINDINGS_FILE)
        devices = pd.read_feather(self.root / DEVICES_FILE)
        self.luts: Dict[str, DeviceLut] = {
            device_id: DeviceLut.for_gamma(device_id, gamma)
            for device_id, gamma in zip(devices["device_id"], devices["gamma"])
        }

    def image_ids(self, split: str) -> List[str]:
        return list(self.index.index[self.index["split"] == split])

    def exams(self, split: str) -> List[Exam]:
        rows = self.index[self.index["split"] == split]
        exams = []
        for subject_id, group in rows.groupby("subject_id", sort=True):
            images = {
                (lat, view): image_id
                for image_id, lat, view in zip(
                    group.index, group["laterality"], group["view"]
                )
            }
            labels = {
                lat: bool(malignant)
                for lat, malignant in zip(group["laterality"], group["malignant"])
            }
            exams.append(Exam(str(subject_id), images, labels))
        return exams

    def load_raw(self, image_id: str) -> np.ndarray:
        if image_id not in self.index.index:
            raise RejectedInput(f"unknown image {image_id!r}")
        return read_pgm(self.root / IMAGE_DIR / f"{image_id}.pgm")

    def load_image(self, image_id: str) -> np.ndarray:
        """Image normalized to [0, 1] through its device LUT."""
        device_id = self.index.at[image_id, "device_id"]
        return normalize_intensity(self.load_raw(image_id), self.luts[device_id])

    def boxes_of(self, image_id: str) -> pd.DataFrame:
        return self.findings[self.findings["image_id"] == image_id]

    def train_samples(
        self, split: str = "train", include_normals: bool = True
    ) -> List[TrainSample]:
        samples = []
        for image_id in self.image_ids(split):
            found = self.boxes_of(image_id)
            if found.empty and not include_normals:
                continue
            samples.append(
                TrainSample(
                    image_id,
                    self.load_image(image_id),
                    found[["row_min", "col_min", "row_max", "col_max"]].to_numpy(),
                    found["cls"].to_numpy(),
                )
            )
        logger.info(f"Loaded {len(samples)} {split} images for training")
        return samples


def finding_boxes(found: pd.DataFrame) -> Iterable[BBox]:
    for values in found[["row_min", "col_min", "row_max", "col_max"]].to_numpy():
        yield BBox.from_array(values)


def _get_dir_size_MiB(path: Path):
    return sum(p.stat().st_size for p in Path(path).rglob("*") if p.is_file()) / (
        1024 * 1024
    )
