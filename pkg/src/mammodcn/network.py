"""
The complete detector: backbone, RPN branch and the R-FCN head with
(deformable) position-sensitive score maps.

Score maps of the head live on the backbone feature grid. A box in image
pixels maps to feature coordinates as ``box / stride - 0.5``, so that feature
cell i covers the pixels centred on ``(i + 0.5) * stride``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, MutableMapping, Optional, Sequence, Tuple

import numpy as np

from .backbone import (
    NormMode,
    UnitPlan,
    UnitTape,
    backbone_backward,
    backbone_forward_cached,
    init_backbone_params,
    plan_units,
)
from .config import DetectionConfig, ModelConfig
from .deform_ops import (
    ConvParams,
    Roi,
    conv2d,
    conv2d_backward,
    deform_ps_roi_pool,
    deform_ps_roi_pool_backward,
    ps_roi_pool,
    ps_roi_pool_backward,
)
from .detection import (
    CLASS_NAMES,
    BBox,
    Detection,
    as_boxes,
    clip_boxes,
    decode_box,
    generate_anchors,
    propose,
)
from .errors import RejectedInput
from .tensor_core import Tensor, as_tensor, relu, relu_grad
from .weights import ModelParams

logger = logging.getLogger(__name__)

N_CLASSES = len(CLASS_NAMES)
N_BOX_DELTAS = 4

# Standard deviation of the 1x1 prediction layers at initialization.
_HEAD_INIT_STD = 0.01


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _per_anchor(maps: Tensor, n_anchors: int, width: int) -> np.ndarray:
    """[A*width, H, W] -> [H*W*A, width] in anchor order."""
    _, h, w = maps.shape
    return maps.reshape(n_anchors, width, h, w).transpose(2, 3, 0, 1).reshape(-1, width)


def _per_anchor_backward(grad: np.ndarray, n_anchors: int, h: int, w: int) -> Tensor:
    width = grad.shape[1]
    return grad.reshape(h, w, n_anchors, width).transpose(2, 3, 0, 1).reshape(
        n_anchors * width, h, w
    )


@dataclass
class ForwardPass:
    """Everything one image's forward pass keeps for the backward pass."""

    image: Tensor
    features: Tensor
    tapes: List[UnitTape]
    rpn_pre: Tensor
    rpn_hidden: Tensor
    rpn_logits: np.ndarray
    rpn_deltas: np.ndarray
    anchors: np.ndarray
    cls_maps: Tensor
    box_maps: Tensor
    offset_maps: Optional[Tensor]

    @property
    def image_shape(self) -> Tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]

    @property
    def objectness(self) -> np.ndarray:
        return softmax(self.rpn_logits)[:, 1]


@dataclass
class RoiPass:
    box: np.ndarray
    roi: Roi
    logits: np.ndarray
    deltas: np.ndarray


@dataclass
class Network:
    cfg: ModelConfig
    params: ModelParams
    in_channels: int = 1
    units: List[UnitPlan] = field(init=False)

    def __post_init__(self):
        self.units = plan_units(
            self.cfg.blocks, self.in_channels, self.cfg.deformable_block
        )

    @classmethod
    def initialize(cls, cfg: ModelConfig, in_channels: int = 1) -> Network:
        rng = np.random.default_rng(cfg.init_seed)
        params = ModelParams()
        net = cls(cfg, params, in_channels)
        init_backbone_params(params, net.units, rng)
        features = net.units[-1].out_channels
        k2 = cfg.pool_size**2
        n_anchors = cfg.anchors.anchors_per_location
        rpn = cfg.rpn_channels
        params["rpn.conv.weight"] = rng.normal(
            0.0, np.sqrt(2.0 / (features * 9)), (rpn, features, 3, 3)
        )
        params["rpn.conv.bias"] = np.zeros(rpn)
        for name, c_in, c_out in (
            ("rpn.cls", rpn, 2 * n_anchors),
            ("rpn.reg", rpn, N_BOX_DELTAS * n_anchors),
            ("head.cls", features, k2 * N_CLASSES),
            ("head.box", features, k2 * N_BOX_DELTAS),
        ):
            params[f"{name}.weight"] = rng.normal(
                0.0, _HEAD_INIT_STD, (c_out, c_in, 1, 1)
            )
            params[f"{name}.bias"] = np.zeros(c_out)
        if cfg.deformable_roi:
            # Zero offsets: pooling starts out as plain PS-ROI pooling.
            params["head.offset.weight"] = np.zeros((k2 * 2, features, 1, 1))
            params["head.offset.bias"] = np.zeros(k2 * 2)
        logger.debug(f"Initialized network with {params}")
        return net

    @classmethod
    def from_params(
        cls, cfg: ModelConfig, params: ModelParams, in_channels: int = 1
    ) -> Network:
        """Wrap loaded parameters, which must match the layout `cfg` implies."""
        expected = cls.initialize(cfg, in_channels).params.shapes()
        found = params.shapes()
        missing = sorted(set(expected) - set(found))
        extra = sorted(set(found) - set(expected))
        if missing or extra:
            raise RejectedInput(
                f"parameters do not match the model config: missing {missing}, "
                f"unexpected {extra}"
            )
        for name, shape in expected.items():
            if found[name] != shape:
                raise RejectedInput(
                    f"parameter {name} has shape {found[name]}, config implies {shape}"
                )
        return cls(cfg, params, in_channels)

    def _conv(self, name: str, pad: int = 0) -> ConvParams:
        return ConvParams(
            self.params[f"{name}.weight"], self.params[f"{name}.bias"], pad=pad
        )

    @property
    def stride(self) -> int:
        return self.cfg.total_stride

    def forward(
        self, image, norm_mode: NormMode = "frozen", norm_momentum: float = 0.9
    ) -> ForwardPass:
        image = as_tensor(image, name="image")
        if image.ndim == 2:
            image = image[None]
        features, tapes = backbone_forward_cached(
            self.params, image, self.units, norm_mode, norm_momentum
        )
        n_anchors = self.cfg.anchors.anchors_per_location
        rpn_pre = conv2d(features, self._conv("rpn.conv", pad=1))
        rpn_hidden = relu(rpn_pre)
        _, feat_h, feat_w = features.shape
        offset_maps = None
        if self.cfg.deformable_roi:
            offset_maps = conv2d(features, self._conv("head.offset"))
        return ForwardPass(
            image=image,
            features=features,
            tapes=tapes,
            rpn_pre=rpn_pre,
            rpn_hidden=rpn_hidden,
            rpn_logits=_per_anchor(
                conv2d(rpn_hidden, self._conv("rpn.cls")), n_anchors, 2
            ),
            rpn_deltas=_per_anchor(
                conv2d(rpn_hidden, self._conv("rpn.reg")), n_anchors, N_BOX_DELTAS
            ),
            anchors=generate_anchors(self.cfg.anchors, feat_h, feat_w),
            cls_maps=conv2d(features, self._conv("head.cls")),
            box_maps=conv2d(features, self._conv("head.box")),
            offset_maps=offset_maps,
        )

    def feature_box(self, box) -> BBox:
        return BBox.from_array(np.asarray(box, dtype=np.float64) / self.stride - 0.5)

    def roi_forward(self, fp: ForwardPass, box) -> RoiPass:
        k = self.cfg.pool_size
        feature_box = self.feature_box(box)
        if fp.offset_maps is None:
            roi = Roi(feature_box, k)
            cls_bins = ps_roi_pool(fp.cls_maps, roi, N_CLASSES)
            box_bins = ps_roi_pool(fp.box_maps, roi, N_BOX_DELTAS)
        else:
            offsets = ps_roi_pool(fp.offset_maps, Roi(feature_box, k), 2)
            roi = Roi(feature_box, k, offsets)
            cls_bins = deform_ps_roi_pool(fp.cls_maps, roi, N_CLASSES)
            box_bins = deform_ps_roi_pool(fp.box_maps, roi, N_BOX_DELTAS)
        # Each bin votes; the ROI output is the mean over bins.
        return RoiPass(
            box=np.asarray(box, dtype=np.float64),
            roi=roi,
            logits=cls_bins.mean(axis=(1, 2)),
            deltas=box_bins.mean(axis=(1, 2)),
        )

    def proposals(
        self, fp: ForwardPass, det: DetectionConfig
    ) -> Tuple[np.ndarray, np.ndarray]:
        return propose(
            fp.objectness,
            fp.rpn_deltas,
            fp.anchors,
            fp.image_shape,
            pre_nms_top_n=det.pre_nms_top_n,
            post_nms_top_n=det.post_nms_top_n,
            nms_iou=det.proposal_nms_iou,
            min_size=det.min_box_side,
        )

    def detect(self, image, det: DetectionConfig) -> List[Detection]:
        """Every post-NMS proposal becomes a detection with its refined box."""
        fp = self.forward(image)
        boxes, objectness = self.proposals(fp, det)
        detections = []
        for box, score in zip(boxes, objectness):
            rp = self.roi_forward(fp, box)
            refined = clip_boxes(decode_box(box[None], rp.deltas[None]), fp.image_shape)
            detections.append(
                Detection(
                    box=BBox.from_array(refined[0]),
                    class_scores=softmax(rp.logits),
                    objectness=float(score),
                )
            )
        return detections

    def backward(
        self,
        fp: ForwardPass,
        grad_rpn_logits: np.ndarray,
        grad_rpn_deltas: np.ndarray,
        roi_grads: Sequence[Tuple[RoiPass, np.ndarray, np.ndarray]],
    ) -> Dict[str, np.ndarray]:
        """
        Parameter gradients given the gradients of the per-anchor RPN outputs
        and, per ROI, of its class logits and box deltas.
        """
        grads = self.params.zero_grads()
        k = self.cfg.pool_size
        n_anchors = self.cfg.anchors.anchors_per_location
        _, feat_h, feat_w = fp.features.shape
        if grad_rpn_logits.shape != fp.rpn_logits.shape:
            raise RejectedInput(
                f"RPN logit gradient shape {grad_rpn_logits.shape} does not match "
                f"{fp.rpn_logits.shape}"
            )

        grad_features = np.zeros_like(fp.features)

        # RPN branch
        grad_hidden = np.zeros_like(fp.rpn_hidden)
        for name, grad, width in (
            ("rpn.cls", grad_rpn_logits, 2),
            ("rpn.reg", grad_rpn_deltas, N_BOX_DELTAS),
        ):
            grad_maps = _per_anchor_backward(
                np.asarray(grad, dtype=np.float64).reshape(-1, width),
                n_anchors,
                feat_h,
                feat_w,
            )
            grad_hidden += _accumulate(
                grads, name, fp.rpn_hidden, self._conv(name), grad_maps
            )
        grad_features += _accumulate(
            grads,
            "rpn.conv",
            fp.features,
            self._conv("rpn.conv", pad=1),
            grad_hidden * relu_grad(fp.rpn_pre),
        )

        # R-FCN head
        grad_cls_maps = np.zeros_like(fp.cls_maps)
        grad_box_maps = np.zeros_like(fp.box_maps)
        grad_offset_maps = None
        if fp.offset_maps is not None:
            grad_offset_maps = np.zeros_like(fp.offset_maps)
        for rp, grad_logits, grad_deltas in roi_grads:
            grad_cls_bins = np.broadcast_to(
                np.asarray(grad_logits)[:, None, None] / k**2, (N_CLASSES, k, k)
            )
            grad_box_bins = np.broadcast_to(
                np.asarray(grad_deltas)[:, None, None] / k**2, (N_BOX_DELTAS, k, k)
            )
            if fp.offset_maps is None:
                grad_cls_maps += ps_roi_pool_backward(
                    fp.cls_maps, rp.roi, N_CLASSES, grad_cls_bins
                )
                grad_box_maps += ps_roi_pool_backward(
                    fp.box_maps, rp.roi, N_BOX_DELTAS, grad_box_bins
                )
                continue
            g_cls, g_off_cls = deform_ps_roi_pool_backward(
                fp.cls_maps, rp.roi, N_CLASSES, grad_cls_bins
            )
            g_box, g_off_box = deform_ps_roi_pool_backward(
                fp.box_maps, rp.roi, N_BOX_DELTAS, grad_box_bins
            )
            grad_cls_maps += g_cls
            grad_box_maps += g_box
            plain_roi = Roi(rp.roi.box, k)
            grad_offset_maps += ps_roi_pool_backward(
                fp.offset_maps, plain_roi, 2, g_off_cls + g_off_box
            )
        grad_features += _accumulate(
            grads, "head.cls", fp.features, self._conv("head.cls"), grad_cls_maps
        )
        grad_features += _accumulate(
            grads, "head.box", fp.features, self._conv("head.box"), grad_box_maps
        )
        if grad_offset_maps is not None:
            grad_features += _accumulate(
                grads,
                "head.offset",
                fp.features,
                self._conv("head.offset"),
                grad_offset_maps,
            )

        backbone_backward(self.params, fp.tapes, grad_features, grads)
        return grads


def _accumulate(
    grads: MutableMapping[str, np.ndarray],
    name: str,
    x: Tensor,
    conv: ConvParams,
    grad_y: Tensor,
) -> Tensor:
    grad_x, grad_w, grad_b = conv2d_backward(x, conv, grad_y)
    grads[f"{name}.weight"] += grad_w
    grads[f"{name}.bias"] += grad_b
    return grad_x


def roi_boxes(boxes) -> np.ndarray:
    """Drop boxes without positive area; they cannot be pooled."""
    boxes = as_boxes(boxes)
    keep = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    return boxes[keep]
