"""Static detection overlays: predicted and ground-truth boxes plus a count footer."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .boxes import Box, Detection, Label
from .data import CLASS_NAMES

__all__ = ["FOOTER_HEIGHT", "PRED_COLOR", "TRUTH_COLOR", "box_pixels", "render_overlay"]

FOOTER_HEIGHT = 14
PRED_COLOR = (255, 0, 255)
TRUTH_COLOR = (0, 255, 0)
TEXT_COLOR = (255, 255, 255)


def box_pixels(box: Box, width: int, height: int) -> tuple[int, int, int, int]:
    """Inclusive pixel rectangle covered by a normalized box, clipped to the image."""
    x1, y1, x2, y2 = box.xyxy()
    left = min(max(int(round(x1 * width)), 0), width - 1)
    top = min(max(int(round(y1 * height)), 0), height - 1)
    right = min(max(int(round(x2 * width)) - 1, left), width - 1)
    bottom = min(max(int(round(y2 * height)) - 1, top), height - 1)
    return left, top, right, bottom


def _name(class_id: int) -> str:
    return CLASS_NAMES[class_id] if 0 <= class_id < len(CLASS_NAMES) else str(class_id)


def render_overlay(
    image: np.ndarray,
    detections: Sequence[Detection],
    truths: Sequence[Label] | None = None,
    captions: bool = True,
) -> np.ndarray:
    """Draw boxes onto a copy of ``image`` (H, W, 3 in [0, 1]); returns uint8 (H + footer, W, 3).

    Ground truth goes down first so predictions stay visible on top.
    Pixels outside drawn outlines, captions and the footer are untouched.
    """
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    canvas = Image.new("RGB", (w, h + FOOTER_HEIGHT), (0, 0, 0))
    canvas.paste(Image.fromarray(arr, mode="RGB"), (0, 0))
    draw = ImageDraw.Draw(canvas)
    for t in truths or ():
        draw.rectangle(box_pixels(t.box, w, h), outline=TRUTH_COLOR)
    for d in detections:
        rect = box_pixels(d.box, w, h)
        draw.rectangle(rect, outline=PRED_COLOR)
        if captions:
            # caption sits just above the box, or just inside when the box touches the top
            ty = rect[1] - 11 if rect[1] >= 11 else rect[1] + 2
            draw.text((rect[0] + 2, ty), f"{_name(d.class_id)} {d.confidence:.2f}", fill=TEXT_COLOR)
    n = len(detections)
    draw.text((2, h + 2), f"{n} detection{'' if n == 1 else 's'}", fill=TEXT_COLOR)
    return np.asarray(canvas)
