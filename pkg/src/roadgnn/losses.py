"""Joint objective: class-balanced BCE plus the border consistency term."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch.nn import functional as F

from .errors import ValidationError

PROB_EPS = 1e-7  # probability clamp inside the cross entropy


def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 2:
        return x.unsqueeze(0), True
    if x.dim() == 3:
        return x, False
    raise ValidationError(f"expected (H, W) or (B, H, W), got {tuple(x.shape)}")


def balanced_bce(pred, target, pos_weight, neg_weight) -> torch.Tensor:
    """Mean pixel cross entropy with per-class compensation weights.

    pos_weight scales the positive term and neg_weight the negative one;
    with weights from balance_weights the rare class dominates neither.
    """
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target)
    if pred.shape != target.shape:
        raise ValidationError(
            f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if torch.isnan(pred).any() or torch.isnan(target).any():
        raise FloatingPointError("NaN in balanced_bce inputs (divergence tripwire)")
    pred, _ = _batched(pred)
    target, _ = _batched(target)
    pos = torch.as_tensor(pos_weight, dtype=pred.dtype).reshape(-1, 1, 1)
    neg = torch.as_tensor(neg_weight, dtype=pred.dtype).reshape(-1, 1, 1)
    p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)
    t = target.to(pred.dtype)
    pixel = -(pos * t * torch.log(p) + neg * (1.0 - t) * torch.log(1.0 - p))
    return pixel.mean()


def border_consistency(road_pred, border_pred, threshold: float = 0.5) -> torch.Tensor:
    """Mismatch between a predicted border map and the road map's edges.

    The road map's spatial gradient (symmetric differences with replicate
    padding, scaled by 1/sqrt(2) so a two-axis unit step maps to 1) is
    compared with the border probability over the support set: pixels
    where either the binarized border fires or the gradient is nonzero.
    Returns 0 when the support is empty. Gradients flow through both maps.
    """
    road = torch.as_tensor(road_pred)
    border = torch.as_tensor(border_pred)
    if road.shape != border.shape:
        raise ValidationError(
            f"road shape {tuple(road.shape)} != border shape {tuple(border.shape)}")
    road, squeezed = _batched(road)
    border, _ = _batched(border)
    padded = F.pad(road.unsqueeze(1), (1, 1, 1, 1), mode="replicate").squeeze(1)
    grad_x = padded[:, 1:-1, 2:] - padded[:, 1:-1, :-2]
    grad_y = padded[:, 2:, 1:-1] - padded[:, :-2, 1:-1]
    squared = grad_x ** 2 + grad_y ** 2
    # sqrt with a vanishing shift: exact 0 and NaN-free gradient at flat pixels
    magnitude = torch.sqrt(squared + 1e-24) - 1e-12
    support = (border > threshold) | (squared > 0)
    mismatch = torch.abs(magnitude / math.sqrt(2.0) - border) * support
    counts = support.sum(dim=(1, 2))
    per_sample = mismatch.sum(dim=(1, 2)) / counts.clamp(min=1)
    per_sample = torch.where(counts > 0, per_sample, torch.zeros_like(per_sample))
    return per_sample.mean() if not squeezed else per_sample.squeeze(0)


@dataclass
class LossReport:
    """All loss components for one step; total stays differentiable."""

    road: torch.Tensor
    border: dict = field(default_factory=dict)       # level -> scalar tensor
    consistency: dict = field(default_factory=dict)  # level -> scalar tensor
    total: torch.Tensor = None

    def as_floats(self) -> dict:
        row = {"l_road": float(self.road.detach())}
        for level in sorted(self.border):
            row[f"l_border_{level}"] = float(self.border[level].detach())
        for level in sorted(self.consistency):
            row[f"l_cons_{level}"] = float(self.consistency[level].detach())
        row["total"] = float(self.total.detach())
        return row


def total_loss(bundle, batch, consistency_weight: float = 1.0) -> LossReport:
    """Compose road BCE, per-level border BCE and weighted consistency terms."""
    road_pred, _ = _batched(torch.as_tensor(bundle.road))
    road_gt, _ = _batched(torch.as_tensor(batch.road_mask))
    height = road_gt.shape[-2]
    l_road = balanced_bce(road_pred, road_gt, batch.pos_weight, batch.neg_weight)
    border_losses = {}
    consistency_losses = {}
    seen_strides = set()
    for level in bundle.levels:
        border_pred, _ = _batched(torch.as_tensor(bundle.borders[level]))
        level_height = border_pred.shape[-2]
        if level_height == 0 or height % level_height:
            raise ValidationError(
                f"border level {level} height {level_height} does not divide "
                f"road height {height}")
        stride = height // level_height
        if stride not in batch.border_masks:
            raise ValidationError(
                f"no border ground truth at stride {stride} (level {level}); "
                f"sample carries strides {sorted(batch.border_masks)}")
        seen_strides.add(stride)
        border_gt, _ = _batched(torch.as_tensor(batch.border_masks[stride]))
        gt_float = border_gt.to(border_pred.dtype)
        pos_fraction = gt_float.mean(dim=(1, 2))
        border_losses[level] = balanced_bce(
            border_pred, border_gt, 1.0 - pos_fraction, pos_fraction)
        road_at_level = F.avg_pool2d(road_pred.unsqueeze(1), stride).squeeze(1)
        consistency_losses[level] = border_consistency(road_at_level, border_pred)
    unused = set(batch.border_masks) - seen_strides
    if unused:
        raise ValidationError(
            f"sample border strides {sorted(unused)} have no matching prediction level")
    total = l_road
    for level in sorted(border_losses):
        total = total + border_losses[level]
    for level in sorted(consistency_losses):
        total = total + consistency_weight * consistency_losses[level]
    return LossReport(road=l_road, border=border_losses,
                      consistency=consistency_losses, total=total)
