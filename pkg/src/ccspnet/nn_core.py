"""Convolutional building blocks: CoT attention, the CCSP block, backbone and neck.

Every tensor flowing through here is a rank-4 ``(N, C, H, W)`` feature map.
Normalization is a learnable per-channel affine with no batch statistics, so
each forward pass is independent of the other images in the batch.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, InputError

__all__ = [
    "ChannelAffine",
    "ConvNormAct",
    "ResidualConv",
    "CoTLayer",
    "CCSPBlock",
    "Backbone",
    "CCSPNeck",
    "init_weights",
]


def init_weights(module: nn.Module, generator: torch.Generator | None = None) -> None:
    """Centered uniform fan-in init for every conv; biases start at zero."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels // m.groups * m.kernel_size[0] * m.kernel_size[1]
            bound = math.sqrt(3.0 / fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


def _check_channels(x: torch.Tensor, expected: int, where: str) -> None:
    if x.ndim != 4:
        raise InputError(f"{where}: expected a rank-4 feature map, got shape {tuple(x.shape)}")
    if x.shape[1] != expected:
        raise ConfigurationError(f"{where}: input has {x.shape[1]} channels, layer expects {expected}")


class ChannelAffine(nn.Module):
    """Per-channel scale and shift applied uniformly over the spatial dims."""

    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class ConvNormAct(nn.Module):
    """Conv -> per-channel affine -> SiLU."""

    def __init__(self, c_in: int, c_out: int, k: int = 1, stride: int = 1, groups: int = 1, act: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, k, stride, padding=k // 2, groups=groups, bias=True)
        self.norm = ChannelAffine(c_out)
        self.act = nn.SiLU() if act else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.conv(x)))


class ResidualConv(nn.Module):
    """``y = x + ConvNormAct(x)`` with matching channel counts."""

    def __init__(self, channels: int, k: int = 1):
        super().__init__()
        self.branch = ConvNormAct(channels, channels, k)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.branch(x)


class CoTLayer(nn.Module):
    """Contextual-transformer layer.

    The static context ``K1`` is a grouped ``k x k`` conv of the input.  Local
    attention logits come from two stacked 1x1 convs over ``[K1, Q]`` with
    ``Q = x``; for each position they are softmax-normalized over the ``k*k``
    window and used to aggregate the value map ``V`` over that same window,
    giving the dynamic context ``K2``.  Returns ``K1 + K2``.

    Out-of-bounds window entries read a zero value but their logits still take
    part in the softmax.
    """

    def __init__(self, channels: int, kernel_size: int = 3, reduction: int = 4, heads: int = 1):
        super().__init__()
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel_size must be odd, got {kernel_size}")
        if heads < 1 or channels % heads:
            raise ConfigurationError(f"heads={heads} must divide channels={channels}")
        if reduction < 1:
            raise ConfigurationError(f"reduction must be positive, got {reduction}")
        self.channels = channels
        self.kernel_size = kernel_size
        self.heads = heads
        hidden = max(1, 2 * channels // reduction)
        self.key = ConvNormAct(channels, channels, kernel_size, groups=heads)
        self.value = ConvNormAct(channels, channels, 1)
        self.attn_hidden = ConvNormAct(2 * channels, hidden, 1)
        # raw logits: no norm/activation before the softmax
        self.attn_logits = nn.Conv2d(hidden, heads * kernel_size * kernel_size, 1)

    def attention(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(K1, weights)`` with weights shaped ``(N, heads, k*k, H, W)``."""
        _check_channels(x, self.channels, "CoTLayer")
        n, _, h, w = x.shape
        k1 = self.key(x)
        logits = self.attn_logits(self.attn_hidden(torch.cat([k1, x], dim=1)))
        logits = logits.view(n, self.heads, self.kernel_size**2, h, w)
        return k1, torch.softmax(logits, dim=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        k1, weights = self.attention(x)
        kk = self.kernel_size**2
        v = self.value(x)
        windows = F.unfold(v, self.kernel_size, padding=self.kernel_size // 2)
        windows = windows.view(n, self.heads, c // self.heads, kk, h, w)
        k2 = (windows * weights.unsqueeze(2)).sum(dim=3).view(n, c, h, w)
        return k1 + k2


class CCSPBlock(nn.Module):
    """Residual 1x1 conv -> CoT -> residual 3x3 conv, fused back onto the input."""

    def __init__(self, channels: int, kernel_size: int = 3, reduction: int = 4, heads: int = 1):
        super().__init__()
        self.channels = channels
        self.pre = ResidualConv(channels, 1)
        self.cot = CoTLayer(channels, kernel_size, reduction, heads)
        self.post = ResidualConv(channels, 3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.channels, "CCSPBlock")
        x1 = self.pre(x)
        x2 = self.cot(x1)
        x3 = self.post(x2)
        return x + x3


class Backbone(nn.Module):
    """Plain strided-conv stand-in producing feature maps at strides 8, 16 and 32."""

    strides = (8, 16, 32)

    def __init__(self, in_channels: int = 3, widths: Sequence[int] = (8, 16, 32), stem_width: int | None = None):
        super().__init__()
        if len(widths) != 3:
            raise ConfigurationError(f"backbone needs three widths, got {list(widths)}")
        stem_width = stem_width or widths[0]
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.stem = ConvNormAct(in_channels, stem_width, 3, 2)
        chans = [stem_width, stem_width, *widths]
        self.stages = nn.ModuleList(
            nn.Sequential(ConvNormAct(chans[i], chans[i + 1], 3, 2), ResidualConv(chans[i + 1], 3)) for i in range(4)
        )

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        _check_channels(image, self.in_channels, "Backbone")
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise InputError(f"image size {h}x{w} is not a multiple of 32")
        x = self.stem(image)
        taps = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i >= 1:
                taps.append(x)
        return taps


class CCSPNeck(nn.Module):
    """PAN-style top-down then bottom-up fusion with CCSP refinement at every stage."""

    def __init__(self, widths: Sequence[int] = (8, 16, 32), kernel_size: int = 3, reduction: int = 4, heads: int = 1):
        super().__init__()
        if len(widths) != 3:
            raise ConfigurationError(f"neck needs three widths, got {list(widths)}")
        c3, c4, c5 = widths
        self.widths = tuple(widths)

        def ccsp(c: int) -> CCSPBlock:
            return CCSPBlock(c, kernel_size, reduction, heads)

        self.lateral5 = ConvNormAct(c5, c4, 1)
        self.reduce_td4 = ConvNormAct(2 * c4, c4, 1)
        self.refine_td4 = ccsp(c4)
        self.lateral4 = ConvNormAct(c4, c3, 1)
        self.reduce_out3 = ConvNormAct(2 * c3, c3, 1)
        self.refine_out3 = ccsp(c3)
        self.down3 = ConvNormAct(c3, c3, 3, 2)
        self.reduce_out4 = ConvNormAct(2 * c3, c4, 1)
        self.refine_out4 = ccsp(c4)
        self.down4 = ConvNormAct(c4, c4, 3, 2)
        self.reduce_out5 = ConvNormAct(2 * c4, c5, 1)
        self.refine_out5 = ccsp(c5)

    def forward(self, scales: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        if len(scales) != 3:
            raise ConfigurationError(f"neck expects 3 scales, got {len(scales)}")
        p3, p4, p5 = scales
        for x, c, name in zip(scales, self.widths, ("P3", "P4", "P5")):
            _check_channels(x, c, f"CCSPNeck {name}")

        h5 = self.lateral5(p5)
        t4 = self.refine_td4(self.reduce_td4(torch.cat([F.interpolate(h5, scale_factor=2.0), p4], 1)))
        h4 = self.lateral4(t4)
        o3 = self.refine_out3(self.reduce_out3(torch.cat([F.interpolate(h4, scale_factor=2.0), p3], 1)))
        o4 = self.refine_out4(self.reduce_out4(torch.cat([self.down3(o3), h4], 1)))
        o5 = self.refine_out5(self.reduce_out5(torch.cat([self.down4(o4), h5], 1)))
        return [o3, o4, o5]
