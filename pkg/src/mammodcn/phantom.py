"""
Synthetic screening exams: breast-shaped phantoms with masses and
calcification clusters, recorded through devices with different gamma
responses and normalized back through per-device lookup tables.
"""
from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np

from .config import PhantomSpec
from .detection import BENIGN, CLASS_NAMES, MALIGNANT, BBox
from .errors import RejectedInput
from .inference import LATERALITIES, VIEWS, Exam

logger = logging.getLogger(__name__)

# Detectors deliver 12-bit raw values.
RAW_LEVELS = 4096

LesionKind = Literal["mass", "calcification"]

_BACKGROUND = 0.05
_TISSUE_LEVEL = 0.35
_TISSUE_TEXTURE = 0.06


@dataclass
class DeviceLut:
    """Monotone piecewise-linear map from raw intensity to [0, 1]."""

    device_id: str
    raw_levels: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.raw_levels = np.asarray(self.raw_levels, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.raw_levels.ndim != 1 or self.raw_levels.shape != self.values.shape:
            raise RejectedInput(
                f"LUT {self.device_id}: levels and values differ in shape"
            )
        if len(self.raw_levels) < 2 or np.any(np.diff(self.raw_levels) <= 0):
            raise RejectedInput(f"LUT {self.device_id}: raw levels must increase")
        if np.any(np.diff(self.values) < 0):
            raise RejectedInput(f"LUT {self.device_id}: table must be non-decreasing")
        if self.values.min() < 0 or self.values.max() > 1:
            raise RejectedInput(f"LUT {self.device_id}: values outside [0, 1]")

    @classmethod
    def identity(cls, device_id: str = "identity") -> DeviceLut:
        return cls(device_id, [0.0, 1.0], [0.0, 1.0])

    @classmethod
    def for_gamma(cls, device_id: str, gamma: float) -> DeviceLut:
        """Inverse of a device recording raw = (levels - 1) * tissue ** gamma."""
        levels = np.arange(RAW_LEVELS, dtype=np.float64)
        return cls(device_id, levels, (levels / (RAW_LEVELS - 1)) ** (1.0 / gamma))


def device_id_for(index: int) -> str:
    return f"device{index}"


def device_luts(spec: PhantomSpec) -> Dict[str, DeviceLut]:
    return {
        device_id_for(i): DeviceLut.for_gamma(device_id_for(i), gamma)
        for i, gamma in enumerate(spec.device_gammas)
    }


def normalize_intensity(raw, lut: DeviceLut) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise RejectedInput("raw image holds non-finite values")
    low, high = lut.raw_levels[0], lut.raw_levels[-1]
    if raw.size and (raw.min() < low or raw.max() > high):
        raise RejectedInput(
            f"raw values [{raw.min()}, {raw.max()}] outside the domain "
            f"[{low}, {high}] of LUT {lut.device_id}"
        )
    return np.interp(raw, lut.raw_levels, lut.values)


def record(tissue: np.ndarray, gamma: float) -> np.ndarray:
    """Raw detector values of a tissue image in [0, 1]."""
    raw = np.rint((RAW_LEVELS - 1) * np.clip(tissue, 0.0, 1.0) ** gamma)
    return raw.astype(np.uint16)


@dataclass
class Finding:
    box: BBox
    cls: int
    kind: LesionKind

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.cls]


@dataclass
class PhantomImage:
    image_id: str
    subject_id: str
    laterality: str
    view: str
    device_id: str
    raw: np.ndarray
    findings: List[Finding] = field(default_factory=list)


@dataclass
class PhantomExam:
    exam: Exam
    images: Dict[str, PhantomImage]


@dataclass
class _Lesion:
    cls: int
    kind: LesionKind
    radial: float
    angle: float
    size: float
    seed: int


def _smooth_texture(rng: np.random.Generator, side: int, cutoff: float) -> np.ndarray:
    """Zero-mean, unit-variance low-pass noise."""
    noise = rng.standard_normal((side, side))
    freq = np.fft.fftfreq(side)
    f2 = freq[:, None] ** 2 + freq[None, :] ** 2
    smooth = np.real(np.fft.ifft2(np.fft.fft2(noise) * np.exp(-f2 / (2 * cutoff**2))))
    return (smooth - smooth.mean()) / (smooth.std() + 1e-12)


def _breast_geometry(side: int, view: str) -> Tuple[float, float, float]:
    """Centre row and (row, col) semi-axes of the breast half-ellipse."""
    if view == "CC":
        return side / 2, 0.44 * side, 0.80 * side
    return 0.55 * side, 0.47 * side, 0.72 * side


def _breast_mask(side: int, laterality: str, view: str) -> np.ndarray:
    center, semi_r, semi_c = _breast_geometry(side, view)
    r, c = np.mgrid[0:side, 0:side] + 0.5
    if laterality == "R":
        c = side - c
    return ((r - center) / semi_r) ** 2 + (c / semi_c) ** 2 <= 1.0


def _lesion_center(
    lesion: _Lesion, side: int, laterality: str, view: str, jitter: np.ndarray
) -> Tuple[float, float]:
    center, semi_r, semi_c = _breast_geometry(side, view)
    radial = np.clip(lesion.radial + jitter[0], 0.1, 0.8)
    angle = lesion.angle + jitter[1]
    row = center + radial * semi_r * np.sin(angle)
    col = radial * semi_c * np.cos(angle)
    if laterality == "R":
        col = side - col
    return float(row), float(col)


def _box_of(mask: np.ndarray, margin: float) -> Optional[BBox]:
    rows, cols = np.nonzero(mask)
    if len(rows) == 0:
        return None
    side = mask.shape[0]
    return BBox(
        max(0.0, rows.min() - margin),
        max(0.0, cols.min() - margin),
        min(float(side), rows.max() + 1 + margin),
        min(float(side), cols.max() + 1 + margin),
    )


def _draw_mass(
    tissue: np.ndarray, lesion: _Lesion, row: float, col: float
) -> Optional[BBox]:
    side = tissue.shape[0]
    rng = np.random.default_rng(lesion.seed)
    r, c = np.mgrid[0:side, 0:side] + 0.5
    dr, dc = r - row, c - col
    distance = np.hypot(dr, dc)
    theta = np.arctan2(dr, dc)
    if lesion.cls == MALIGNANT:
        # Irregular outline: a few random angular harmonics.
        radius = lesion.size * (
            1.0
            + sum(
                rng.uniform(0.08, 0.2) * np.cos(h * theta + rng.uniform(0, 2 * np.pi))
                for h in (3, 5, 7)
            )
        )
        contrast = 0.35
    else:
        radius = np.full_like(distance, lesion.size)
        contrast = 0.15
    profile = np.sqrt(np.clip(1.0 - (distance / radius) ** 2, 0.0, 1.0))
    tissue += contrast * profile
    return _box_of(profile > 0, margin=1.0)


def _draw_calcifications(
    tissue: np.ndarray, lesion: _Lesion, row: float, col: float
) -> Optional[BBox]:
    side = tissue.shape[0]
    rng = np.random.default_rng(lesion.seed)
    if lesion.cls == MALIGNANT:
        count, spread, amplitude = rng.integers(8, 15), 0.45 * lesion.size, 0.5
    else:
        count, spread, amplitude = rng.integers(4, 8), lesion.size, 0.25
    centers = np.array([row, col]) + rng.normal(0.0, spread, (count, 2))
    centers = np.clip(centers, 2.0, side - 2.0)
    r, c = np.mgrid[0:side, 0:side] + 0.5
    for cr, cc in centers:
        tissue += amplitude * np.exp(-((r - cr) ** 2 + (c - cc) ** 2) / (2 * 0.8**2))
    footprint = np.zeros((side, side), dtype=bool)
    for cr, cc in centers:
        footprint[int(cr), int(cc)] = True
    return _box_of(footprint, margin=3.0)


def render_image(
    side: int,
    laterality: str,
    view: str,
    lesions: List[_Lesion],
    rng: np.random.Generator,
) -> Tuple[np.ndarray, List[Finding]]:
    """Tissue image in [0, 1] and the findings visible in it."""
    mask = _breast_mask(side, laterality, view)
    tissue = _TISSUE_LEVEL + _TISSUE_TEXTURE * _smooth_texture(rng, side, 0.04)
    findings = []
    for lesion in lesions:
        jitter = rng.normal(0.0, [0.04, 0.12])
        row, col = _lesion_center(lesion, side, laterality, view, jitter)
        draw = _draw_mass if lesion.kind == "mass" else _draw_calcifications
        box = draw(tissue, lesion, row, col)
        if box is not None and box.area > 0:
            findings.append(Finding(box, lesion.cls, lesion.kind))
    tissue = np.where(mask, tissue, _BACKGROUND)
    return np.clip(tissue, 0.0, 1.0), findings


def _breast_lesions(spec: PhantomSpec, rng: np.random.Generator) -> List[_Lesion]:
    def lesion(cls: int) -> _Lesion:
        kind = "calcification" if rng.random() < spec.calcification_share else "mass"
        size = rng.uniform(8.0, 18.0) if kind == "mass" else rng.uniform(6.0, 10.0)
        return _Lesion(
            cls=cls,
            kind=kind,
            radial=rng.uniform(0.25, 0.65),
            angle=rng.uniform(-1.0, 1.0),
            size=size * spec.side / 256,
            seed=int(rng.integers(2**31)),
        )

    lesions = []
    if rng.random() < spec.prevalence:
        lesions.append(lesion(MALIGNANT))
    if rng.random() < spec.prevalence * spec.benign_rate:
        lesions.append(lesion(BENIGN))
    return lesions


def generate_dataset(
    spec: PhantomSpec,
    seed: Optional[int] = None,
    n_exams: Optional[int] = None,
    split: str = "train",
) -> List[PhantomExam]:
    """
    Deterministic phantom exams. Both views of a breast share its lesions,
    with independently jittered positions; a breast is positive iff it holds a
    malignant lesion.
    """
    seed = spec.seed if seed is None else seed
    n_exams = spec.train_exams if n_exams is None else n_exams
    rng = np.random.default_rng([seed, zlib.crc32(split.encode())])
    exams = []
    for index in range(n_exams):
        subject_id = f"{split}{index:04d}"
        device = int(rng.integers(len(spec.device_gammas)))
        gamma = spec.device_gammas[device]
        image_keys: Dict[Tuple[str, str], str] = {}
        labels: Dict[str, bool] = {}
        images: Dict[str, PhantomImage] = {}
        for laterality in LATERALITIES:
            lesions = _breast_lesions(spec, rng)
            labels[laterality] = any(les.cls == MALIGNANT for les in lesions)
            for view in VIEWS:
                image_id = f"{subject_id}_{laterality}_{view}"
                tissue, findings = render_image(
                    spec.side, laterality, view, lesions, rng
                )
                images[image_id] = PhantomImage(
                    image_id=image_id,
                    subject_id=subject_id,
                    laterality=laterality,
                    view=view,
                    device_id=device_id_for(device),
                    raw=record(tissue, gamma),
                    findings=findings,
                )
                image_keys[(laterality, view)] = image_id
        exams.append(PhantomExam(Exam(subject_id, image_keys, labels), images))
    n_breasts = sum(len(e.exam.labels) for e in exams)
    n_malignant = sum(sum(e.exam.labels.values()) for e in exams)
    logger.info(
        f"Generated {len(exams)} {split} exams: {n_malignant} of {n_breasts} "
        f"breasts malignant"
    )
    return exams
