"""Anchor-based single-stage detection head, target assignment, decoding and NMS."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .boxes import Box, Detection, Label, iou
from .errors import ConfigurationError, InputError
from .nn_core import Backbone, CCSPNeck, init_weights

__all__ = [
    "DEFAULT_ANCHORS",
    "WH_LOGIT_CLAMP",
    "AnchorSet",
    "ModelConfig",
    "HeadOutput",
    "GridTarget",
    "DetectionHead",
    "Detector",
    "decode_grid",
    "encode_box",
    "assign_targets",
    "head_to_detections",
    "nms",
    "predict",
]

WH_LOGIT_CLAMP = 4.0
_EPS_FRAC = 1e-9

# Priors for 64x64 inputs with grids 8/4/2, normalized to image size.
DEFAULT_ANCHORS = (
    ((0.14, 0.14), (0.20, 0.20), (0.26, 0.26)),
    ((0.32, 0.32), (0.40, 0.40), (0.50, 0.50)),
    ((0.60, 0.60), (0.75, 0.75), (0.90, 0.90)),
)


@dataclass(frozen=True)
class AnchorSet:
    """Per-scale ``(w, h)`` priors; every scale must carry the same anchor count."""

    priors: tuple[tuple[tuple[float, float], ...], ...] = DEFAULT_ANCHORS

    def __post_init__(self):
        priors = tuple(tuple((float(w), float(h)) for w, h in scale) for scale in self.priors)
        object.__setattr__(self, "priors", priors)
        if not priors or any(len(s) == 0 for s in priors):
            raise ConfigurationError("each scale needs at least one anchor")
        if len({len(s) for s in priors}) != 1:
            raise ConfigurationError("all scales must have the same anchor count")
        if any(w <= 0 or h <= 0 for s in priors for w, h in s):
            raise ConfigurationError("anchor priors must be positive")

    @property
    def num_scales(self) -> int:
        return len(self.priors)

    @property
    def per_scale(self) -> int:
        return len(self.priors[0])

    def tensor(self, scale: int) -> torch.Tensor:
        return torch.tensor(self.priors[scale], dtype=torch.float64)


@dataclass
class ModelConfig:
    in_channels: int = 3
    widths: tuple[int, int, int] = (8, 16, 32)
    stem_width: int | None = None
    kernel_size: int = 3
    reduction: int = 4
    heads: int = 1
    num_classes: int = 3
    anchors: tuple = DEFAULT_ANCHORS
    denoiser_width: int = 16

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.anchors = AnchorSet(self.anchors).priors
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")

    @property
    def anchor_set(self) -> AnchorSet:
        return AnchorSet(self.anchors)


@dataclass
class HeadOutput:
    """Per-scale decoded grids shaped ``(N, Sy, Sx, B, 5 + C)``.

    Channel layout along the last axis: ``cx, cy, w, h`` in normalized image
    coordinates, objectness probability, then ``C`` class probabilities.
    """

    scales: list[torch.Tensor]

    def __iter__(self):
        return iter(self.scales)

    def __len__(self):
        return len(self.scales)

    def to(self, dtype: torch.dtype) -> "HeadOutput":
        return HeadOutput([s.to(dtype) for s in self.scales])


@dataclass
class GridTarget:
    """Per-scale responsibility indicators and regression/class targets.

    Each list holds one tensor per scale: ``obj``/``noobj`` are ``(Sy, Sx, B)``,
    ``box`` is ``(Sy, Sx, B, 4)`` and ``cls`` is ``(Sy, Sx, B, C)``.  Batched
    targets (see :meth:`stack`) gain a leading ``N`` axis.
    """

    obj: list[torch.Tensor]
    noobj: list[torch.Tensor]
    box: list[torch.Tensor]
    cls: list[torch.Tensor]
    num_classes: int = field(default=0)

    @staticmethod
    def stack(targets: Sequence["GridTarget"]) -> "GridTarget":
        if not targets:
            raise InputError("cannot stack an empty list of targets")
        n = len(targets[0].obj)
        return GridTarget(
            obj=[torch.stack([t.obj[s] for t in targets]) for s in range(n)],
            noobj=[torch.stack([t.noobj[s] for t in targets]) for s in range(n)],
            box=[torch.stack([t.box[s] for t in targets]) for s in range(n)],
            cls=[torch.stack([t.cls[s] for t in targets]) for s in range(n)],
            num_classes=targets[0].num_classes,
        )

    def count(self) -> int:
        return int(sum(o.sum().item() for o in self.obj))


def decode_grid(raw: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Turn raw ``(N, Sy, Sx, B, 5 + C)`` head logits into boxes and probabilities."""
    _, sy, sx, _, _ = raw.shape
    rows = torch.arange(sy, dtype=raw.dtype).view(1, sy, 1, 1)
    cols = torch.arange(sx, dtype=raw.dtype).view(1, 1, sx, 1)
    cx = (cols + torch.sigmoid(raw[..., 0])) / sx
    cy = (rows + torch.sigmoid(raw[..., 1])) / sy
    wh = anchors.to(raw.dtype) * torch.exp(torch.clamp(raw[..., 2:4], -WH_LOGIT_CLAMP, WH_LOGIT_CLAMP))
    probs = torch.sigmoid(raw[..., 4:])
    return torch.cat([cx.unsqueeze(-1), cy.unsqueeze(-1), wh, probs], dim=-1)


def encode_box(box: Box, anchor: tuple[float, float], grid: tuple[int, int]) -> tuple[int, int, np.ndarray]:
    """Inverse of :func:`decode_grid` for one box: ``(row, col, raw_txywh)``."""
    sy, sx = grid
    row = min(int(math.floor(box.cy * sy)), sy - 1)
    col = min(int(math.floor(box.cx * sx)), sx - 1)
    fx = min(max(box.cx * sx - col, _EPS_FRAC), 1 - _EPS_FRAC)
    fy = min(max(box.cy * sy - row, _EPS_FRAC), 1 - _EPS_FRAC)
    raw = np.array(
        [math.log(fx / (1 - fx)), math.log(fy / (1 - fy)), math.log(box.w / anchor[0]), math.log(box.h / anchor[1])]
    )
    return row, col, raw


class DetectionHead(nn.Module):
    """One 1x1 conv per scale emitting ``B * (5 + C)`` channels per cell."""

    def __init__(self, widths: Sequence[int], anchors: AnchorSet, num_classes: int):
        super().__init__()
        if len(widths) != anchors.num_scales:
            raise ConfigurationError(f"{len(widths)} head inputs but {anchors.num_scales} anchor scales")
        self.widths = tuple(widths)
        self.anchors = anchors
        self.num_classes = num_classes
        self.num_outputs = 5 + num_classes
        self.convs = nn.ModuleList(nn.Conv2d(c, anchors.per_scale * self.num_outputs, 1) for c in widths)
        for s in range(anchors.num_scales):
            self.register_buffer(f"anchors_{s}", anchors.tensor(s).float(), persistent=False)

    def init_bias(self, objectness_prior: float = 0.01) -> None:
        """Start objectness near ``objectness_prior`` so the many empty anchors do not dominate."""
        with torch.no_grad():
            for conv in self.convs:
                b = conv.bias.view(self.anchors.per_scale, self.num_outputs)
                b.zero_()
                b[:, 4] = math.log(objectness_prior / (1 - objectness_prior))

    def raw(self, features: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        if len(features) != len(self.convs):
            raise ConfigurationError(f"head expects {len(self.convs)} scales, got {len(features)}")
        out = []
        for x, conv, c in zip(features, self.convs, self.widths):
            if x.shape[1] != c:
                raise ConfigurationError(f"head input has {x.shape[1]} channels, expected {c}")
            n, _, sy, sx = x.shape
            y = conv(x).view(n, self.anchors.per_scale, self.num_outputs, sy, sx)
            out.append(y.permute(0, 3, 4, 1, 2))
        return out

    def forward(self, features: Sequence[torch.Tensor]) -> HeadOutput:
        raws = self.raw(features)
        return HeadOutput([decode_grid(r, getattr(self, f"anchors_{s}")) for s, r in enumerate(raws)])


class Detector(nn.Module):
    """Backbone -> CCSP neck -> detection head."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        config = config or ModelConfig()
        self.config = config
        self.backbone = Backbone(config.in_channels, config.widths, config.stem_width)
        self.neck = CCSPNeck(config.widths, config.kernel_size, config.reduction, config.heads)
        self.head = DetectionHead(config.widths, config.anchor_set, config.num_classes)
        init_weights(self, torch.Generator().manual_seed(seed))
        self.head.init_bias()

    def forward(self, images: torch.Tensor) -> HeadOutput:
        return self.head(self.neck(self.backbone(images)))

    @staticmethod
    def grid_sizes(height: int, width: int) -> list[tuple[int, int]]:
        return [(height // s, width // s) for s in Backbone.strides]


def _shape_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    inter = min(a[0], b[0]) * min(a[1], b[1])
    return inter / (a[0] * a[1] + b[0] * b[1] - inter)


def assign_targets(
    labels: Sequence[Label],
    anchors: AnchorSet,
    grid_sizes: Sequence[tuple[int, int]],
    num_classes: int,
    dtype: torch.dtype = torch.float32,
) -> GridTarget:
    """Give every ground-truth box exactly one responsible (scale, cell, anchor).

    Candidates are ranked by the IoU between the box and each prior centered on
    the box; exact ties go to the smaller scale index, then the smaller anchor
    index.  If the preferred slot already belongs to another box, the next
    candidate is used so no box is dropped.
    """
    if len(grid_sizes) != anchors.num_scales:
        raise ConfigurationError(f"{len(grid_sizes)} grids but {anchors.num_scales} anchor scales")
    b = anchors.per_scale
    obj = [np.zeros((sy, sx, b)) for sy, sx in grid_sizes]
    box_t = [np.zeros((sy, sx, b, 4)) for sy, sx in grid_sizes]
    cls_t = [np.zeros((sy, sx, b, num_classes)) for sy, sx in grid_sizes]

    for label in labels:
        bx = label.box
        if not (bx.w > 0 and bx.h > 0):
            raise InputError(f"degenerate box {bx}")
        if not 0 <= label.class_id < num_classes:
            raise InputError(f"class id {label.class_id} outside [0, {num_classes})")
        candidates = sorted(
            ((-_shape_iou((bx.w, bx.h), prior), s, a) for s, scale in enumerate(anchors.priors) for a, prior in enumerate(scale)),
        )
        for _, s, a in candidates:
            sy, sx = grid_sizes[s]
            row = min(int(math.floor(bx.cy * sy)), sy - 1)
            col = min(int(math.floor(bx.cx * sx)), sx - 1)
            if obj[s][row, col, a] == 0:
                obj[s][row, col, a] = 1
                box_t[s][row, col, a] = (bx.cx, bx.cy, bx.w, bx.h)
                cls_t[s][row, col, a, label.class_id] = 1
                break
        else:
            raise InputError("more boxes than available (cell, anchor) slots")

    def t(a):
        return torch.as_tensor(a, dtype=dtype)

    return GridTarget(
        obj=[t(o) for o in obj],
        noobj=[t(1 - o) for o in obj],
        box=[t(x) for x in box_t],
        cls=[t(c) for c in cls_t],
        num_classes=num_classes,
    )


def head_to_detections(out: HeadOutput, conf_threshold: float = 0.0) -> list[list[Detection]]:
    """Flatten every anchor into a candidate detection scored ``p_obj * max_c p(c)``."""
    n = out.scales[0].shape[0]
    per_image: list[list[Detection]] = [[] for _ in range(n)]
    for grid in out.scales:
        g = grid.detach().to(torch.float64).reshape(n, -1, grid.shape[-1])
        cls_prob, cls_id = g[..., 5:].max(dim=-1)
        conf = g[..., 4] * cls_prob
        keep = conf >= conf_threshold
        for i in range(n):
            idx = torch.nonzero(keep[i]).flatten().tolist()
            boxes = g[i, idx, :4].tolist()
            confs = conf[i, idx].tolist()
            ids = cls_id[i, idx].tolist()
            per_image[i].extend(
                Detection(Box(*bx), int(c), float(p)) for bx, c, p in zip(boxes, ids, confs) if bx[2] > 0 and bx[3] > 0
            )
    return per_image


def nms(dets: Sequence[Detection], iou_threshold: float, conf_threshold: float) -> list[Detection]:
    """Greedy per-class non-maximum suppression.

    Ordering is by confidence, descending; equal confidences keep their input
    order.
    """
    if not (0 <= iou_threshold <= 1 and 0 <= conf_threshold <= 1):
        raise InputError("thresholds must lie in [0, 1]")
    order = sorted(
        (i for i, d in enumerate(dets) if d.confidence >= conf_threshold),
        key=lambda i: -dets[i].confidence,
    )
    kept: dict[int, list[Detection]] = {}
    out = []
    for i in order:
        d = dets[i]
        same = kept.setdefault(d.class_id, [])
        if all(iou(d.box, k.box) <= iou_threshold for k in same):
            same.append(d)
            out.append(d)
    return out


@torch.no_grad()
def predict(
    model: nn.Module,
    images: torch.Tensor,
    conf_threshold: float = 0.001,
    iou_threshold: float = 0.45,
    max_det: int = 100,
) -> list[list[Detection]]:
    """Run ``model`` on a batch and return NMS-filtered detections per image."""
    candidates = head_to_detections(model(images), conf_threshold)
    return [nms(c, iou_threshold, conf_threshold)[:max_det] for c in candidates]
