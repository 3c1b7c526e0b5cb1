"""Two-stream structure reasoning over border and road features.

The upper stream computes scaled dot-product attention whose similarity
lives in border space while values are road features, so each output row
is the border-space soft nearest neighbor expressed in road-feature
space. The lower stream projects border-feature dimensions into a fixed
set of latent nodes carrying road features, smooths them over a learned
adjacency, and projects back. Both streams are fused by point-wise
summation.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ConfigError, ValidationError


def flatten_grid(x: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, H*W, C); exact inverse of unflatten_grid."""
    return x.flatten(2).transpose(1, 2)


def unflatten_grid(x: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """(B, N, C) -> (B, C, H, W) with N = H*W."""
    b, n, c = x.shape
    if n != height * width:
        raise ValidationError(f"cannot unflatten {n} rows to {height}x{width}")
    return x.transpose(1, 2).reshape(b, c, height, width)


def fuse_streams(upper: torch.Tensor, lower: torch.Tensor,
                 height: int, width: int) -> torch.Tensor:
    """Point-wise sum of two node matrices, returned as a spatial map."""
    squeeze = upper.dim() == 2
    if squeeze:
        upper = upper.unsqueeze(0)
    if lower.dim() == 2:
        lower = lower.unsqueeze(0)
    if upper.shape != lower.shape:
        raise ValidationError(
            f"stream shapes differ: {tuple(upper.shape)} vs {tuple(lower.shape)}")
    fused = unflatten_grid(upper + lower, height, width)
    return fused.squeeze(0) if squeeze else fused


class CoAttention(nn.Module):
    """Border-similarity attention over road-feature values."""

    def __init__(self, border_channels: int, road_channels: int,
                 out_channels: int, attn_dim: int = 64):
        super().__init__()
        if attn_dim <= 0:
            raise ConfigError(f"attn_dim must be positive, got {attn_dim}")
        self.attn_dim = attn_dim
        self.query = nn.Conv2d(border_channels, attn_dim, 1, bias=False)
        self.key = nn.Conv2d(border_channels, attn_dim, 1, bias=False)
        self.value = nn.Conv2d(road_channels, out_channels, 1, bias=False)

    def attention(self, border_feature: torch.Tensor) -> torch.Tensor:
        """Row-stochastic (B, N, N) weights from border similarity."""
        if border_feature.shape[-2] * border_feature.shape[-1] == 0:
            raise ValidationError("attention over zero spatial positions")
        q = flatten_grid(self.query(border_feature))
        k = flatten_grid(self.key(border_feature))
        scores = torch.bmm(q, k.transpose(1, 2)) / math.sqrt(self.attn_dim)
        return torch.softmax(scores, dim=-1)

    def forward(self, border_feature: torch.Tensor,
                road_feature: torch.Tensor) -> torch.Tensor:
        b, _, h, w = road_feature.shape
        weights = self.attention(border_feature)
        values = flatten_grid(self.value(road_feature))
        return unflatten_grid(torch.bmm(weights, values), h, w)


class LatentGraphReasoner(nn.Module):
    """Latent-node graph convolution with a learned adjacency.

    node_count latent nodes (one per projected border dimension) each
    carry a node_dim road feature; the node set size never depends on
    the spatial input size.
    """

    def __init__(self, border_channels: int, road_channels: int,
                 out_channels: int, node_count: int = 64, node_dim: int = 64):
        super().__init__()
        if node_count <= 0 or node_dim <= 0:
            raise ConfigError(
                f"node_count/node_dim must be positive, got {node_count}/{node_dim}")
        self.node_count = node_count
        self.node_proj = nn.Conv2d(border_channels, node_count, 1, bias=False)
        self.feat_proj = nn.Conv2d(road_channels, node_dim, 1, bias=False)
        self.back_proj = nn.Conv2d(road_channels, node_count, 1, bias=False)
        # small random init keeps (I - A) near the identity early in training
        self.adjacency = nn.Parameter(torch.randn(node_count, node_count) * 0.01)
        self.node_transform = nn.Linear(node_dim, node_dim, bias=False)
        self.out_transform = nn.Conv2d(node_dim, out_channels, 1)

    def project_nodes(self, border_feature: torch.Tensor,
                      road_feature: torch.Tensor) -> torch.Tensor:
        """Bilinear projection onto the latent nodes: (B, node_count, node_dim)."""
        phi = flatten_grid(self.node_proj(border_feature))
        psi = flatten_grid(self.feat_proj(road_feature))
        return torch.bmm(phi.transpose(1, 2), psi)

    def smooth_nodes(self, nodes: torch.Tensor) -> torch.Tensor:
        """Laplacian-smoothed graph convolution (I - A) @ nodes @ W."""
        eye = torch.eye(self.node_count, dtype=nodes.dtype, device=nodes.device)
        propagated = torch.matmul(eye - self.adjacency, nodes)
        return self.node_transform(propagated)

    def forward(self, border_feature: torch.Tensor,
                road_feature: torch.Tensor) -> torch.Tensor:
        b, _, h, w = road_feature.shape
        nodes = self.smooth_nodes(self.project_nodes(border_feature, road_feature))
        coeff = flatten_grid(self.back_proj(road_feature))
        out = unflatten_grid(torch.bmm(coeff, nodes), h, w)
        return self.out_transform(out)


class StructureGNN(nn.Module):
    """Upper (attention) and lower (latent graph) streams fused by summation."""

    def __init__(self, border_channels: int, road_channels: int,
                 out_channels: int, attn_dim: int = 64, node_count: int = 64,
                 node_dim: int = 64, use_attention: bool = True,
                 use_graph: bool = True):
        super().__init__()
        if not (use_attention or use_graph):
            raise ConfigError("at least one stream must be enabled")
        self.attention_stream = (
            CoAttention(border_channels, road_channels, out_channels, attn_dim)
            if use_attention else None)
        self.graph_stream = (
            LatentGraphReasoner(border_channels, road_channels, out_channels,
                                node_count, node_dim)
            if use_graph else None)

    def forward(self, border_feature: torch.Tensor,
                road_feature: torch.Tensor) -> torch.Tensor:
        h, w = road_feature.shape[-2:]
        if self.attention_stream is None:
            return self.graph_stream(border_feature, road_feature)
        if self.graph_stream is None:
            return self.attention_stream(border_feature, road_feature)
        upper = flatten_grid(self.attention_stream(border_feature, road_feature))
        lower = flatten_grid(self.graph_stream(border_feature, road_feature))
        return fuse_streams(upper, lower, h, w)
