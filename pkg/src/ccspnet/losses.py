"""Detection, denoising and joint losses.

The detection terms are squared errors on probabilities and box geometry,
summed over anchors and averaged over the batch.  The denoising term is the
per-image mean squared error averaged over images.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch

from .detector import GridTarget, HeadOutput
from .errors import ConfigurationError, InputError

__all__ = [
    "LossWeights",
    "LossBreakdown",
    "classification_loss",
    "localization_loss",
    "objectness_loss",
    "detection_loss",
    "denoise_loss",
    "joint_loss",
]


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 1.0
    lambda_loc: float = 5.0
    lambda_obj: float = 1.0
    lambda_noobj: float = 0.5
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        bad = [f.name for f in fields(self) if getattr(self, f.name) < 0]
        if bad:
            raise ConfigurationError(f"negative loss weights: {bad}")
        if self.alpha + self.beta <= 0:
            raise ConfigurationError("alpha + beta must be positive")


@dataclass
class LossBreakdown:
    """Scalar loss components; tensors so the training loop can backpropagate."""

    cls: torch.Tensor
    loc: torch.Tensor
    obj: torch.Tensor
    l1: torch.Tensor
    l2: torch.Tensor
    joint: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def _check(pred: HeadOutput, target: GridTarget) -> int:
    if len(pred.scales) != len(target.obj):
        raise InputError(f"{len(pred.scales)} prediction scales vs {len(target.obj)} target scales")
    n = pred.scales[0].shape[0]
    for p, o, c in zip(pred.scales, target.obj, target.cls):
        if p.shape[:-1] != o.shape:
            raise InputError(f"prediction grid {tuple(p.shape[:-1])} vs target {tuple(o.shape)}")
        if p.shape[-1] - 5 != c.shape[-1]:
            raise InputError(f"prediction has {p.shape[-1] - 5} classes, target {c.shape[-1]}")
    return n


def classification_loss(pred: HeadOutput, target: GridTarget) -> torch.Tensor:
    n = _check(pred, target)
    total = 0
    for p, o, c in zip(pred.scales, target.obj, target.cls):
        o = o.to(p.dtype)
        total = total + (o * ((p[..., 5:] - c.to(p.dtype)) ** 2).sum(-1)).sum()
    return total / n


def localization_loss(pred: HeadOutput, target: GridTarget) -> torch.Tensor:
    n = _check(pred, target)
    total = 0
    for p, o, t in zip(pred.scales, target.obj, target.box):
        o = o.to(p.dtype)
        t = t.to(p.dtype)
        resp = o > 0
        if bool((p[..., 2:4][resp] <= 0).any()) or bool((t[..., 2:4][resp] <= 0).any()):
            raise InputError("box width/height must be positive at responsible anchors")
        # non-responsible anchors carry zero targets; keep sqrt away from 0 there
        t_wh = torch.where(resp.unsqueeze(-1), t[..., 2:4], torch.ones_like(t[..., 2:4]))
        xy = ((p[..., 0:2] - t[..., 0:2]) ** 2).sum(-1)
        wh = ((torch.sqrt(p[..., 2:4]) - torch.sqrt(t_wh)) ** 2).sum(-1)
        total = total + (o * (xy + wh)).sum()
    return total / n


def objectness_loss(pred: HeadOutput, target: GridTarget, weights: LossWeights = LossWeights()) -> torch.Tensor:
    n = _check(pred, target)
    total = 0
    for p, o, no in zip(pred.scales, target.obj, target.noobj):
        pobj = p[..., 4]
        total = total + (o.to(p.dtype) * (1 - pobj) ** 2).sum()
        total = total + weights.lambda_noobj * (no.to(p.dtype) * pobj**2).sum()
    return total / n


def detection_loss(pred: HeadOutput, target: GridTarget, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Weighted detection loss ``l1``; ``l2`` is zero and ``joint`` is ``alpha * l1``."""
    cls = classification_loss(pred, target)
    loc = localization_loss(pred, target)
    obj = objectness_loss(pred, target, weights)
    l1 = weights.lambda_cls * cls + weights.lambda_loc * loc + weights.lambda_obj * obj
    l2 = torch.zeros_like(l1)
    return LossBreakdown(cls, loc, obj, l1, l2, joint_loss(l1, l2, weights))


def denoise_loss(pred: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """Mean over images of each image's per-pixel, per-channel mean squared error."""
    if pred.shape != truth.shape:
        raise InputError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(truth.shape)}")
    if pred.ndim != 4:
        raise InputError(f"expected (D, C, H, W) batches, got shape {tuple(pred.shape)}")
    per_image = ((pred - truth) ** 2).flatten(1).mean(1)
    return per_image.mean()


def joint_loss(l1, l2, weights: LossWeights = LossWeights()):
    """``alpha * l1 + beta * l2``; works on floats and tensors alike."""
    if float(torch.as_tensor(l1).detach()) < 0 or float(torch.as_tensor(l2).detach()) < 0:
        raise InputError("losses must be nonnegative")
    return weights.alpha * l1 + weights.beta * l2
