"""Full network assembly and the ablation variant presets."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import torch
from torch import nn
from torch.nn import functional as F

from .border import BorderHead
from .encoder import ResidualEncoder
from .errors import ConfigError, ValidationError
from .fusion import ElementAttention
from .gnn import StructureGNN

ALL_GNN_LEVELS = (2, 3, 4)

# variant -> (gnn_levels, upper stream, lower stream)
VARIANT_PRESETS = {
    "BU": ((), False, False),
    "SG": ((2, 3, 4), True, False),
    "E1": ((4,), True, True),
    "E2": ((3, 4), True, True),
    "full": ((2, 3, 4), True, True),
}


def level_stride(level: int) -> int:
    """Spatial stride of a hierarchy level (level 1 = stride 4, ... 4 = 32)."""
    return 2 ** (level + 1)


@dataclass
class ModelConfig:
    """Architecture description; variant presets pin the ablation fields."""

    widths: tuple = (64, 128, 256, 512)
    width_divisor: int = 1
    gnn_levels: tuple = (2, 3, 4)
    enable_upper_stream: bool = True
    enable_lower_stream: bool = True
    attn_dim: int = 64          # query/key dimension of the upper stream
    graph_nodes: int = 64       # latent node count of the lower stream
    graph_dim: int = 64         # latent node feature dimension
    border_channels: int = 64   # border head feature width
    consistency_weight: float = 1.0
    variant: str = "full"
    norm: str = "batch"

    @classmethod
    def from_variant(cls, variant: str, **overrides) -> "ModelConfig":
        if variant not in VARIANT_PRESETS:
            raise ConfigError(
                f"unknown variant {variant!r}; expected one of {sorted(VARIANT_PRESETS)}")
        levels, upper, lower = VARIANT_PRESETS[variant]
        config = cls(variant=variant, gnn_levels=levels,
                     enable_upper_stream=upper, enable_lower_stream=lower)
        return replace(config, **overrides)

    def validate(self) -> "ModelConfig":
        if len(self.widths) != 4:
            raise ConfigError(f"widths must have 4 entries, got {self.widths}")
        if self.width_divisor < 1 or any(w % self.width_divisor for w in self.widths):
            raise ConfigError(
                f"width_divisor {self.width_divisor} must divide all widths {self.widths}")
        levels = tuple(sorted(set(self.gnn_levels)))
        if any(level not in ALL_GNN_LEVELS for level in levels):
            raise ConfigError(f"gnn_levels must be a subset of {ALL_GNN_LEVELS}, "
                              f"got {self.gnn_levels}")
        if levels and not (self.enable_upper_stream or self.enable_lower_stream):
            raise ConfigError("gnn_levels set but both streams disabled")
        if self.variant:
            preset_levels, upper, lower = VARIANT_PRESETS.get(
                self.variant, (None, None, None))
            if preset_levels is None:
                raise ConfigError(f"unknown variant {self.variant!r}")
            actual = (levels, self.enable_upper_stream and bool(levels),
                      self.enable_lower_stream and bool(levels))
            expected = (tuple(preset_levels), upper, lower)
            if actual != expected:
                raise ConfigError(
                    f"variant {self.variant!r} pins (gnn_levels, upper, lower)="
                    f"{expected} but config has {actual}")
        return self

    def scaled_widths(self) -> tuple:
        return tuple(w // self.width_divisor for w in self.widths)

    def border_strides(self) -> tuple:
        """Strides of the border supervision levels, ascending."""
        return tuple(level_stride(level) for level in sorted(self.gnn_levels))

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "width_divisor": self.width_divisor,
            "gnn_levels": list(self.gnn_levels),
            "enable_upper_stream": self.enable_upper_stream,
            "enable_lower_stream": self.enable_lower_stream,
            "attn_dim": self.attn_dim,
            "graph_nodes": self.graph_nodes,
            "graph_dim": self.graph_dim,
            "border_channels": self.border_channels,
            "consistency_weight": self.consistency_weight,
            "variant": self.variant,
            "norm": self.norm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["widths"] = tuple(d.get("widths", (64, 128, 256, 512)))
        d["gnn_levels"] = tuple(d.get("gnn_levels", (2, 3, 4)))
        return cls(**d)


@dataclass
class PredictionBundle:
    """Per-tile outputs: road probability plus one border map per level."""

    road: torch.Tensor              # (B, H, W) or (H, W), values in [0, 1]
    borders: dict = field(default_factory=dict)  # level -> (B, h, w) or (h, w)

    @property
    def levels(self) -> list:
        return sorted(self.borders)


class RoadExtractor(nn.Module):
    """Encoder plus the road-structure inference path (Fig-style wiring).

    The running feature starts at the deepest encoder level. At each
    enabled level a border head taps it, the structure GNN refines it
    (residually), and element-wise attention merges it with the next
    shallower encoder feature after 2x upsampling. A final 4x upsample
    and 1x1 conv produce full-resolution road logits.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = config.scaled_widths()
        self.encoder = ResidualEncoder(widths, norm=config.norm)
        channels = widths[3]
        self.border_heads = nn.ModuleDict()
        self.gnn_modules = nn.ModuleDict()
        for level in sorted(config.gnn_levels):
            self.border_heads[str(level)] = BorderHead(channels, config.border_channels)
            self.gnn_modules[str(level)] = StructureGNN(
                config.border_channels, channels, channels,
                attn_dim=config.attn_dim, node_count=config.graph_nodes,
                node_dim=config.graph_dim,
                use_attention=config.enable_upper_stream,
                use_graph=config.enable_lower_stream)
        # decoder merges with encoder skips at strides 16, 8, 4
        self.merges = nn.ModuleList([
            ElementAttention(widths[2], channels),
            ElementAttention(widths[1], channels),
            ElementAttention(widths[0], channels),
        ])
        self.road_head = nn.Conv2d(channels, 1, 1)

    def forward(self, image: torch.Tensor) -> PredictionBundle:
        squeeze = image.dim() == 3
        if squeeze:
            image = image.unsqueeze(0)
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValidationError(f"expected (3, H, W) or (B, 3, H, W) input, "
                                  f"got {tuple(image.shape)}")
        features = self.encoder(image)
        x = features[3]
        borders = {}
        for merge, level in zip(self.merges, (4, 3, 2)):
            key = str(level)
            if key in self.border_heads:
                border_prob, border_feature = self.border_heads[key](x)
                borders[level] = border_prob.squeeze(1)
                x = x + self.gnn_modules[key](border_feature, x)
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = F.relu(merge(features[level - 2], x))
        x = F.interpolate(x, scale_factor=4, mode="bilinear", align_corners=False)
        road = torch.sigmoid(self.road_head(x)).squeeze(1)
        if squeeze:
            road = road.squeeze(0)
            borders = {level: b.squeeze(0) for level, b in borders.items()}
        return PredictionBundle(road=road, borders=borders)


def build_model(config: ModelConfig, seed: int | None = None) -> RoadExtractor:
    """Construct a model; with a seed, parameters are reproducible bit-for-bit."""
    if seed is not None:
        torch.manual_seed(seed)
    return RoadExtractor(config)


def parameter_checksum(model: nn.Module) -> str:
    """SHA-256 over all parameters and buffers, order-independent of creation."""
    digest = hashlib.sha256()
    state = model.state_dict()
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        digest.update(name.encode())
        digest.update(str(tensor.dtype).encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()
