"""Detection metrics: matching, all-point AP, mAP@.5/.75, parameter count and FPS."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .boxes import Detection, Label, iou
from .detector import predict
from .errors import InputError

__all__ = [
    "iou",
    "MetricsReport",
    "match_detections",
    "average_precision",
    "evaluate",
    "evaluate_model",
    "count_parameters",
    "measure_fps",
]


@dataclass
class MetricsReport:
    precision: float
    recall: float
    map50: float
    map75: float
    fps: float = 0.0
    parameter_count: int = 0
    per_class_ap: dict[str, dict[str, float]] = field(default_factory=dict)
    conf_threshold: float = 0.25
    wall_clock: bool = True

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def match_detections(dets: Sequence[Detection], truths: Sequence[Label], iou_threshold: float) -> list[bool]:
    """Greedy TP/FP flags, aligned with ``dets``.

    Detections are visited by descending confidence (ties keep input order).
    Each takes the unmatched same-class truth with the highest IoU, and counts
    as a true positive when that IoU reaches the threshold.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    matched = [False] * len(truths)
    flags = [False] * len(dets)
    for i in order:
        d = dets[i]
        best, best_j = -1.0, -1
        for j, t in enumerate(truths):
            if matched[j] or t.class_id != d.class_id:
                continue
            v = iou(d.box, t.box)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= iou_threshold:
            matched[best_j] = True
            flags[i] = True
    return flags


def average_precision(flags: Sequence[bool], confidences: Sequence[float], truth_count: int) -> float:
    """Area under the precision envelope over recall (all-point interpolation)."""
    if truth_count < 0:
        raise InputError("truth_count must be >= 0")
    if truth_count == 0:
        return 0.0 if len(flags) else 1.0
    if not len(flags):
        return 0.0
    order = np.argsort(-np.asarray(confidences, dtype=np.float64), kind="stable")
    tp = np.asarray(flags, dtype=np.float64)[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / truth_count
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def evaluate(
    predictions: Sequence[Sequence[Detection]],
    truths: Sequence[Sequence[Label]],
    conf_threshold: float = 0.25,
    fps: float = 0.0,
    parameter_count: int = 0,
) -> MetricsReport:
    """Dataset-level metrics from per-image detections (already NMS-filtered).

    Precision and recall use detections at or above ``conf_threshold`` with
    IoU 0.5 matching.  AP uses every detection supplied.  mAP averages over the
    classes that appear in the ground truth.
    """
    if len(predictions) == 0:
        raise InputError("cannot evaluate an empty dataset")
    if len(predictions) != len(truths):
        raise InputError(f"{len(predictions)} prediction lists vs {len(truths)} truth lists")

    tp = fp = 0
    n_truth = sum(len(t) for t in truths)
    for dets, gts in zip(predictions, truths):
        kept = [d for d in dets if d.confidence >= conf_threshold]
        flags = match_detections(kept, gts, 0.5)
        tp += sum(flags)
        fp += len(flags) - sum(flags)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / n_truth if n_truth else 0.0

    classes = sorted({t.class_id for gts in truths for t in gts})
    per_class: dict[str, dict[str, float]] = {}
    for thr, key in ((0.5, "ap50"), (0.75, "ap75")):
        records: dict[int, list[tuple[float, bool]]] = {c: [] for c in classes}
        for dets, gts in zip(predictions, truths):
            for d, f in zip(dets, match_detections(dets, gts, thr)):
                if d.class_id in records:
                    records[d.class_id].append((d.confidence, f))
        for c in classes:
            count = sum(1 for gts in truths for t in gts if t.class_id == c)
            rec = records[c]
            ap = average_precision([f for _, f in rec], [s for s, _ in rec], count)
            per_class.setdefault(str(c), {})[key] = ap
    map50 = float(np.mean([per_class[str(c)]["ap50"] for c in classes])) if classes else 0.0
    map75 = float(np.mean([per_class[str(c)]["ap75"] for c in classes])) if classes else 0.0
    return MetricsReport(
        precision=float(precision),
        recall=float(recall),
        map50=map50,
        map75=map75,
        fps=float(fps),
        parameter_count=int(parameter_count),
        per_class_ap=per_class,
        conf_threshold=conf_threshold,
    )


def count_parameters(model: nn.Module | None) -> int:
    """Total element count of all parameter tensors (frozen ones included)."""
    if model is None:
        return 0
    return sum(p.numel() for p in model.parameters())


@torch.no_grad()
def measure_fps(model: nn.Module, images: torch.Tensor, warmup: int = 2) -> float:
    """Images per second at batch size 1, after ``warmup`` untimed passes."""
    model.eval()
    for i in range(min(warmup, len(images))):
        model(images[i : i + 1])
    start = time.perf_counter()
    for i in range(len(images)):
        model(images[i : i + 1])
    elapsed = time.perf_counter() - start
    return len(images) / elapsed if elapsed > 0 else 0.0


def evaluate_model(
    model: nn.Module,
    images: torch.Tensor,
    truths: Sequence[Sequence[Label]],
    conf_threshold: float = 0.25,
    nms_iou: float = 0.45,
    batch_size: int = 32,
    timed: bool = True,
) -> MetricsReport:
    """Run ``model`` over ``images`` and score its NMS-filtered detections."""
    if len(images) == 0:
        raise InputError("cannot evaluate an empty dataset")
    model.eval()
    predictions: list[list[Detection]] = []
    for start in range(0, len(images), batch_size):
        predictions.extend(predict(model, images[start : start + batch_size], iou_threshold=nms_iou))
    fps = measure_fps(model, images) if timed else 0.0
    return evaluate(predictions, truths, conf_threshold, fps=fps, parameter_count=count_parameters(model))
