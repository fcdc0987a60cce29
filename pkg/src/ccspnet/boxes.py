"""Box, label and detection value types plus IoU."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .errors import InputError

__all__ = ["Box", "Label", "Detection", "iou", "iou_xyxy", "read_labels", "format_labels"]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box as center/size, normalized to the image dims."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise InputError(f"degenerate box: w={self.w}, h={self.h}")

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass(frozen=True)
class Label:
    class_id: int
    box: Box


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    confidence: float


def iou_xyxy(a: tuple[float, float, float, float], b: tuple[float, float, float, float]) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when they do not overlap."""
    return iou_xyxy(a.xyxy(), b.xyxy())


def read_labels(text: str) -> list[Label]:
    """Parse ``class_id cx cy w h`` lines."""
    labels = []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise InputError(f"label line {lineno}: expected 5 fields, got {len(parts)}")
        cls, cx, cy, w, h = parts
        labels.append(Label(int(cls), Box(float(cx), float(cy), float(w), float(h))))
    return labels


def format_labels(labels: Iterable[Label]) -> str:
    return "".join(
        f"{lab.class_id} {lab.box.cx:.6f} {lab.box.cy:.6f} {lab.box.w:.6f} {lab.box.h:.6f}\n" for lab in labels
    )
