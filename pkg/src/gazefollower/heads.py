"""Lightweight prediction heads decoding pooled interaction features."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


class HeatmapHead(nn.Module):
    """Upsampling conv stack mapping ``[B, C, h, w]`` to gaze logits ``[B, 8h, 8w]``.

    Three groups of (bilinear 2x upsample, 3x3 conv, batch norm, ReLU) narrow
    the channels, followed by a 1x1 conv to a single logit map whose argmax
    marks the predicted gaze target.
    """

    def __init__(self, in_channels: int = 24, widths: tuple[int, ...] = (64, 32, 16)):
        super().__init__()
        layers: list[nn.Module] = []
        c = in_channels
        for w in widths:
            layers += [
                nn.Upsample(scale_factor=2.0, mode="bilinear", align_corners=False),
                nn.Conv2d(c, w, kernel_size=3, padding=1),
                nn.BatchNorm2d(w),
                nn.ReLU(inplace=True),
            ]
            c = w
        layers.append(nn.Conv2d(c, 1, kernel_size=1))
        self.net = nn.Sequential(*layers)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.net(features).squeeze(1)


class InOutHead(nn.Module):
    """Two-layer MLP turning the pooled token feature into P(watching outside)."""

    def __init__(self, dim: int = 384):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim // 2)
        self.fc2 = nn.Linear(dim // 2, 1)

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc2(F.relu(self.fc1(feature)))).squeeze(-1)
