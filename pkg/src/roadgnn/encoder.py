"""Residual backbone producing feature maps at strides 4, 8, 16, 32."""

from __future__ import annotations

import torch
from torch import nn

from .errors import ConfigError, ValidationError

LEVEL_STRIDES = (4, 8, 16, 32)


def make_norm(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    if kind == "group":
        # group norm keeps batch-size-1 debugging runs stable
        groups = min(8, channels)
        while channels % groups:
            groups -= 1
        return nn.GroupNorm(groups, channels)
    raise ConfigError(f"unknown norm kind: {kind!r}")


class BasicBlock(nn.Module):
    """Two 3x3 convs with an identity (or projected) skip connection."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1,
                 norm: str = "batch"):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride,
                               padding=1, bias=False)
        self.norm1 = make_norm(norm, out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.norm2 = make_norm(norm, out_channels)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_channels != out_channels:
            self.skip = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                make_norm(norm, out_channels))
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        out = self.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return self.relu(out + self.skip(x))


class ResidualEncoder(nn.Module):
    """Four residual stages; spatial dims halve and widths grow stage to stage.

    The stem is a 7x7 stride-2 conv followed by a stride-2 max pool, so the
    first stage already sits at stride 4.
    """

    def __init__(self, widths=(64, 128, 256, 512), in_channels: int = 3,
                 blocks_per_stage: int = 2, norm: str = "batch"):
        super().__init__()
        if len(widths) != 4:
            raise ConfigError(f"expected 4 stage widths, got {widths}")
        if any(widths[i] > widths[i + 1] for i in range(3)):
            raise ConfigError(f"stage widths must be nondecreasing, got {widths}")
        self.widths = tuple(widths)
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], 7, stride=2, padding=3, bias=False),
            make_norm(norm, widths[0]),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1))
        stages = []
        in_ch = widths[0]
        for i, out_ch in enumerate(widths):
            blocks = [BasicBlock(in_ch, out_ch, stride=1 if i == 0 else 2, norm=norm)]
            blocks += [BasicBlock(out_ch, out_ch, norm=norm)
                       for _ in range(blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        self._init_weights()

    def _init_weights(self):
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.kaiming_normal_(module.weight, mode="fan_in",
                                        nonlinearity="relu")
            elif isinstance(module, (nn.BatchNorm2d, nn.GroupNorm)):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)

    def forward(self, image: torch.Tensor):
        """Return the four stage outputs (strides 4, 8, 16, 32)."""
        if image.dim() != 4:
            raise ValidationError(f"expected (B, C, H, W) input, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise ValidationError(f"input dims {h}x{w} must be divisible by 32")
        x = self.stem(image)
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return tuple(features)
