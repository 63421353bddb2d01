"""Small convolutional building blocks shared by teacher and student."""
from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F


def _groups(ch: int) -> int:
    return math.gcd(ch, 8)


class ConvNormAct2d(nn.Module):
    def __init__(self, cin, cout, kernel=3, stride=1, norm=True):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel, stride, kernel // 2, bias=not norm)
        self.norm = nn.GroupNorm(_groups(cout), cout) if norm else nn.Identity()

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), 0.2)


class ConvNormAct3d(nn.Module):
    def __init__(self, cin, cout, kernel=3, norm=True):
        super().__init__()
        self.conv = nn.Conv3d(cin, cout, kernel, 1, kernel // 2, bias=not norm)
        self.norm = nn.GroupNorm(_groups(cout), cout) if norm else nn.Identity()

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), 0.2)


class ResBlock2d(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.a = ConvNormAct2d(ch, ch)
        self.b = ConvNormAct2d(ch, ch)

    def forward(self, x):
        return x + self.b(self.a(x))


class ResBlock3d(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.a = ConvNormAct3d(ch, ch)
        self.b = ConvNormAct3d(ch, ch)

    def forward(self, x):
        return x + self.b(self.a(x))


class UpBlock2d(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = ConvNormAct2d(cin, cout)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


def gaussian_heatmaps(points: torch.Tensor, grid: torch.Tensor, variance: float) -> torch.Tensor:
    """exp(-|g - p|^2 / (2 var)) for points (B, K, n) on a grid (..., n) -> (B, K, ...)."""
    B, K, n = points.shape
    spatial = grid.shape[:-1]
    g = grid.reshape(1, 1, -1, n)
    d2 = ((g - points[:, :, None, :]) ** 2).sum(-1)
    return torch.exp(-0.5 * d2 / variance).reshape(B, K, *spatial)
