"""Small U-shaped restoration network that predicts a residual correction."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InputError
from .losses import denoise_loss
from .nn_core import ConvNormAct, ResidualConv, init_weights

__all__ = ["Denoiser", "pretrain_step"]


class Denoiser(nn.Module):
    """Three-level encoder/decoder with skip connections.

    The output is ``clamp(x + residual(x), 0, 1)``.  The final conv starts at
    zero so a freshly built denoiser is the identity on ``[0, 1]`` images.
    """

    def __init__(self, channels: int = 3, width: int = 16, seed: int = 0):
        super().__init__()
        b = width
        self.enc1 = ConvNormAct(channels, b, 3)
        self.enc2 = ConvNormAct(b, 2 * b, 3, 2)
        self.enc3 = ConvNormAct(2 * b, 4 * b, 3, 2)
        self.bottleneck = ResidualConv(4 * b, 3)
        self.dec2 = ConvNormAct(6 * b, 2 * b, 3)
        self.dec1 = ConvNormAct(3 * b, b, 3)
        self.residual = nn.Conv2d(b, channels, 3, padding=1)
        init_weights(self, torch.Generator().manual_seed(seed))
        self.zero_residual()

    def zero_residual(self) -> None:
        with torch.no_grad():
            self.residual.weight.zero_()
            self.residual.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4:
            raise InputError(f"expected (N, C, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise InputError(f"image size {h}x{w} is not a multiple of 4")
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        e3 = self.bottleneck(self.enc3(e2))
        d2 = self.dec2(torch.cat([F.interpolate(e3, scale_factor=2.0), e2], 1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, scale_factor=2.0), e1], 1))
        return torch.clamp(x + self.residual(d1), 0.0, 1.0)


def pretrain_step(
    degraded: torch.Tensor,
    clean: torch.Tensor,
    denoiser: Denoiser,
    optimizer: torch.optim.Optimizer,
) -> float:
    """One optimizer step on the denoising loss alone; returns the pre-step loss."""
    if degraded.shape != clean.shape:
        raise InputError(f"shape mismatch: {tuple(degraded.shape)} vs {tuple(clean.shape)}")
    optimizer.zero_grad()
    loss = denoise_loss(denoiser(degraded), clean)
    loss.backward()
    optimizer.step()
    return float(loss.detach())
