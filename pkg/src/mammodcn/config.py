"""
Experiment configuration: typed sections read from (and written to) a TOML
file. Every section forbids unknown keys.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Mapping

import pydantic
import tomli
import tomli_w

from . import logging_config
from .errors import BadConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

_DEFAULT_OUTDIR = Path("mammodcn")


class _Section(pydantic.BaseModel):
    class Config:
        extra = pydantic.Extra.forbid


class General(_Section):
    outdir: Path = _DEFAULT_OUTDIR


class PhantomSpec(_Section):
    side: int = 256
    train_exams: int = 200
    test_exams: int = 100
    prevalence: float = 0.3
    benign_rate: float = 0.2
    calcification_share: float = 0.5
    device_gammas: List[float] = [1.0, 2.2]
    seed: int = 0

    @pydantic.validator("prevalence", "benign_rate", "calcification_share")
    def must_be_fraction(cls, value):
        if not 0.0 <= value <= 1.0:
            raise BadConfig(f"fraction must be within [0, 1], got {value}")
        return value

    @pydantic.validator("side", "train_exams", "test_exams")
    def must_be_positive(cls, value):
        if value < 1:
            raise BadConfig(f"must be positive, got {value}")
        return value

    @pydantic.validator("device_gammas")
    def gammas_must_be_positive(cls, gammas):
        if not gammas or any(g <= 0 for g in gammas):
            raise BadConfig(f"device gammas must be positive, got {gammas}")
        return gammas


class AnchorConfig(_Section):
    base_scales: List[float] = [8.0, 16.0, 32.0, 64.0]
    aspect_ratios: List[float] = [0.5, 1.0, 2.0]
    stride: int = 16

    @pydantic.validator("base_scales", "aspect_ratios")
    def must_be_positive(cls, values):
        if not values or any(v <= 0 for v in values):
            raise BadConfig(f"anchor sizes must be positive, got {values}")
        return values

    @pydantic.validator("stride")
    def stride_must_be_positive(cls, stride):
        if stride < 1:
            raise BadConfig(f"anchor stride must be positive, got {stride}")
        return stride

    @property
    def anchors_per_location(self) -> int:
        return len(self.base_scales) * len(self.aspect_ratios)


BlockKind = Literal["stem_cbr", "block_a", "block_b", "block_c"]


class BlockSpec(_Section):
    kind: BlockKind
    repeats: int = 1
    out_channels: int
    downsample: bool = False

    @pydantic.validator("repeats", "out_channels")
    def must_be_positive(cls, value):
        if value < 1:
            raise BadConfig(f"must be positive, got {value}")
        return value

    @property
    def stride(self) -> int:
        """Total stride of the block; the stem downsamples in every repeat."""
        if not self.downsample:
            return 1
        return 2**self.repeats if self.kind == "stem_cbr" else 2


DEFAULT_BLOCKS = [
    BlockSpec(kind="stem_cbr", repeats=2, out_channels=16, downsample=True),
    BlockSpec(kind="block_a", repeats=3, out_channels=32, downsample=True),
    BlockSpec(kind="block_b", repeats=1, out_channels=64, downsample=True),
    BlockSpec(kind="block_c", repeats=2, out_channels=64, downsample=False),
]


def total_stride(blocks: Iterable[BlockSpec]) -> int:
    stride = 1
    for block in blocks:
        stride *= block.stride
    return stride


class ModelConfig(_Section):
    blocks: List[BlockSpec] = pydantic.Field(
        default_factory=lambda: [b.copy() for b in DEFAULT_BLOCKS]
    )
    pool_size: int = 3
    rpn_channels: int = 32
    deformable_block: bool = True
    deformable_roi: bool = True
    anchors: AnchorConfig = pydantic.Field(default_factory=AnchorConfig)
    init_seed: int = 0

    @pydantic.validator("blocks")
    def blocks_must_start_with_stem(cls, blocks):
        if not blocks:
            raise BadConfig("at least one block is required")
        if any(b.kind == "stem_cbr" for b in blocks[1:]):
            raise BadConfig("stem_cbr may only be the first block")
        return blocks

    @pydantic.validator("anchors")
    def anchor_stride_must_match_backbone(cls, anchors, values):
        blocks = values.get("blocks")
        if blocks is not None and anchors.stride != total_stride(blocks):
            raise BadConfig(
                f"anchor stride {anchors.stride} differs from the backbone stride "
                f"{total_stride(blocks)}"
            )
        return anchors

    @pydantic.validator("pool_size", "rpn_channels")
    def must_be_positive(cls, value):
        if value < 1:
            raise BadConfig(f"must be positive, got {value}")
        return value

    @property
    def total_stride(self) -> int:
        return total_stride(self.blocks)


class DetectionConfig(_Section):
    rpn_positive_iou: float = 0.5
    rpn_negative_iou: float = 0.3
    rpn_batch: int = 256
    proposal_nms_iou: float = 0.1
    pre_nms_top_n: int = 2000
    post_nms_top_n: int = 64
    min_box_side: float = 4.0
    roi_foreground_iou: float = 0.5
    ohem_dedup_iou: float = 0.7


class TrainConfig(_Section):
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 1
    ohem_budget: int = 16
    seed: int = 0
    augment: bool = True
    include_normals: bool = True
    shuffle: bool = True
    norm_warmup_images: int = 16
    norm_momentum: float = 0.9
    rpn_cls_weight: float = 1.0
    rpn_reg_weight: float = 1.0
    roi_cls_weight: float = 1.0
    roi_reg_weight: float = 1.0

    @pydantic.validator("learning_rate")
    def learning_rate_must_be_positive(cls, value):
        if value <= 0:
            raise BadConfig(f"learning_rate must be > 0, got {value}")
        return value

    @pydantic.validator("ohem_budget", "epochs")
    def must_be_positive(cls, value):
        if value < 1:
            raise BadConfig(f"must be positive, got {value}")
        return value


class InferenceConfig(_Section):
    augment: bool = True
    image_score: Literal["max", "mean_top_k"] = "max"
    top_k: int = 3
    aggregation: Literal["mean", "max"] = "mean"


class EvaluationConfig(_Section):
    bootstrap: int = 0
    confidence: float = 0.95
    seed: int = 0


class MemplanConfig(_Section):
    sides: List[int] = [512, 1024]
    bytes_per_element: int = 4
    batch: int = 1
    budget_bytes: int = 2**30


class Config(_Section):
    schema_version: int = SCHEMA_VERSION
    general: General = pydantic.Field(default_factory=General)
    phantom: PhantomSpec = pydantic.Field(default_factory=PhantomSpec)
    model: ModelConfig = pydantic.Field(default_factory=ModelConfig)
    detection: DetectionConfig = pydantic.Field(default_factory=DetectionConfig)
    train: TrainConfig = pydantic.Field(default_factory=TrainConfig)
    inference: InferenceConfig = pydantic.Field(default_factory=InferenceConfig)
    evaluation: EvaluationConfig = pydantic.Field(default_factory=EvaluationConfig)
    memplan: MemplanConfig = pydantic.Field(default_factory=MemplanConfig)
    logging: Dict[str, Any] = logging_config.DEFAULT_LOG_SETTINGS

    @pydantic.validator("schema_version")
    def schema_version_must_match(cls, version):
        if version != SCHEMA_VERSION:
            raise BadConfig(
                f"config schema_version {version} is not supported "
                f"(expected {SCHEMA_VERSION})"
            )
        return version

    @pydantic.root_validator(skip_on_failure=True)
    def side_must_fit_backbone(cls, values):
        phantom, model = values["phantom"], values["model"]
        if phantom.side % model.total_stride:
            raise BadConfig(
                f"image side {phantom.side} is not divisible by the backbone "
                f"stride {model.total_stride}"
            )
        return values

    @classmethod
    def from_toml(cls, path: Path, overrides: Iterable[str] = ()) -> Config:
        logger.debug(f"Reading config file {path}")
        with open(path, "rb") as f:
            obj = tomli.load(f)
        return cls.parse_obj(apply_overrides(obj, overrides))

    def to_toml(self, path: Path):
        # Round trip through JSON turns paths and tuples into TOML-friendly values.
        obj = json.loads(self.json())
        with open(path, "wb") as f:
            tomli_w.dump(obj, f)
        logger.debug(f"Wrote config file {path}")


def load_config(path: Path, overrides: Iterable[str] = ()) -> Config:
    return Config.from_toml(path, overrides)


def save_config(config: Config, path: Path):
    config.to_toml(path)


def apply_overrides(obj: Mapping[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """
    Apply `SECTION.KEY=VALUE` overrides to a raw config mapping. VALUE is read
    as a TOML value when possible, otherwise kept as a string.
    """
    result = json.loads(json.dumps(obj, default=str))
    for override in overrides:
        key, sep, raw_value = override.partition("=")
        if not sep or not key.strip():
            raise BadConfig(f"override must look like SECTION.KEY=VALUE: {override!r}")
        try:
            value = tomli.loads(f"value = {raw_value}")["value"]
        except tomli.TOMLDecodeError:
            value = raw_value
        *parents, leaf = key.strip().split(".")
        node = result
        for parent in parents:
            node = node.setdefault(parent, {})
            if not isinstance(node, dict):
                raise BadConfig(f"cannot override inside non-table key {parent!r}")
        node[leaf] = value
    return result
