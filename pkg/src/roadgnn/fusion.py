"""Element-wise attention for fusing feature pairs across levels."""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ValidationError


class ElementAttention(nn.Module):
    """Spatial gate from concatenated features, applied residually.

    A single-channel map alpha = sigmoid(1x1 conv(concat(guide, feat)))
    modulates the gated feature: out = W((feat * alpha) + feat), where W
    is a bias-free 1x1 channel transform. The guide is resampled
    bilinearly to the gated feature's spatial dims when they differ.
    """

    def __init__(self, guide_channels: int, feat_channels: int):
        super().__init__()
        self.guide_channels = guide_channels
        self.feat_channels = feat_channels
        self.gate = nn.Conv2d(guide_channels + feat_channels, 1, 1)
        self.transform = nn.Conv2d(feat_channels, feat_channels, 1, bias=False)

    def attention_map(self, guide: torch.Tensor, feat: torch.Tensor) -> torch.Tensor:
        if guide.shape[1] != self.guide_channels or feat.shape[1] != self.feat_channels:
            raise ValidationError(
                f"channel mismatch: got guide={guide.shape[1]}, feat={feat.shape[1]}, "
                f"configured ({self.guide_channels}, {self.feat_channels})")
        if guide.shape[-2:] != feat.shape[-2:]:
            guide = F.interpolate(guide, size=feat.shape[-2:], mode="bilinear",
                                  align_corners=False)
        return torch.sigmoid(self.gate(torch.cat([guide, feat], dim=1)))

    def forward(self, guide: torch.Tensor, feat: torch.Tensor) -> torch.Tensor:
        alpha = self.attention_map(guide, feat)
        return self.transform(feat * alpha + feat)
