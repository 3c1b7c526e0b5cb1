"""Per-level road-border detector used for deep supervision."""

from __future__ import annotations

import torch
from torch import nn


class BorderHead(nn.Module):
    """Two 3x3 convs and a logistic output.

    Returns (border_prob, border_feature) where border_feature is the
    activation fed into the final projection; it carries the border
    morphology consumed by the structure GNN.
    """

    def __init__(self, in_channels: int, border_channels: int = 64):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, border_channels, 3, padding=1)
        self.relu = nn.ReLU(inplace=False)
        self.project = nn.Conv2d(border_channels, 1, 3, padding=1)

    def forward(self, road_feature: torch.Tensor):
        border_feature = self.relu(self.conv1(road_feature))
        border_prob = torch.sigmoid(self.project(border_feature))
        return border_prob, border_feature
