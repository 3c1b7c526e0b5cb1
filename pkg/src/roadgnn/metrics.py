"""Region metrics and the distance-relaxed boundary F-score."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .data import extract_border
from .errors import ValidationError

BOUNDARY_THRESHOLDS = (1, 2, 3, 4, 5)


@dataclass
class MetricReport:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    iou: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    boundary_f: dict = field(default_factory=dict)  # threshold px -> score

    def to_json_dict(self) -> dict:
        return {
            "iou": self.iou,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "boundary_f": {str(k): v for k, v in sorted(self.boundary_f.items())},
            "counts": {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn},
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "MetricReport":
        counts = d.get("counts", {})
        return cls(
            tp=int(counts.get("tp", 0)), fp=int(counts.get("fp", 0)),
            fn=int(counts.get("fn", 0)), tn=int(counts.get("tn", 0)),
            iou=float(d["iou"]), precision=float(d["precision"]),
            recall=float(d["recall"]), f1=float(d["f1"]),
            boundary_f={int(k): float(v) for k, v in d.get("boundary_f", {}).items()},
        )


def _checked_pair(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if not np.isin(pred, (0, 1)).all() or not np.isin(gt, (0, 1)).all():
        raise ValidationError("masks must be binary")
    return pred.astype(bool), gt.astype(bool)


def _ratios(tp: int, fp: int, fn: int) -> tuple[float, float, float, float]:
    # both masks empty counts as a perfect match
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0, 1.0
    iou = tp / (tp + fp + fn)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return iou, precision, recall, f1


def region_metrics(pred, gt) -> MetricReport:
    """Exact confusion counts and the derived region ratios."""
    pred, gt = _checked_pair(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(np.count_nonzero(~pred & ~gt))
    iou, precision, recall, f1 = _ratios(tp, fp, fn)
    return MetricReport(tp=tp, fp=fp, fn=fn, tn=tn, iou=iou,
                        precision=precision, recall=recall, f1=f1)


def boundary_scores(pred, gt, thresholds=BOUNDARY_THRESHOLDS) -> dict:
    """Boundary F-score at each pixel threshold (Euclidean matching)."""
    pred, gt = _checked_pair(pred, gt)
    for threshold in thresholds:
        if not 1 <= threshold <= 5:
            raise ValidationError(f"boundary threshold must be in 1..5, got {threshold}")
    pred_border = extract_border(pred.astype(np.uint8)).astype(bool)
    gt_border = extract_border(gt.astype(np.uint8)).astype(bool)
    scores = {}
    if not pred_border.any() and not gt_border.any():
        return {int(t): 1.0 for t in thresholds}
    if not pred_border.any() or not gt_border.any():
        return {int(t): 0.0 for t in thresholds}
    dist_to_gt = ndimage.distance_transform_edt(~gt_border)
    dist_to_pred = ndimage.distance_transform_edt(~pred_border)
    pred_dists = dist_to_gt[pred_border]
    gt_dists = dist_to_pred[gt_border]
    for threshold in thresholds:
        precision = float((pred_dists <= threshold).mean())
        recall = float((gt_dists <= threshold).mean())
        f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        scores[int(threshold)] = f
    return scores


def boundary_f(pred, gt, threshold_px: int) -> float:
    return boundary_scores(pred, gt, (threshold_px,))[int(threshold_px)]


def evaluate_masks(pred, gt, thresholds=BOUNDARY_THRESHOLDS) -> MetricReport:
    """Region metrics plus boundary F-scores for one mask pair."""
    report = region_metrics(pred, gt)
    report.boundary_f = boundary_scores(pred, gt, thresholds)
    return report


def aggregate(reports: list, mode: str = "micro") -> MetricReport:
    """Dataset-level report: micro sums confusion counts, macro averages ratios.

    Boundary F-scores are macro-averaged over images in both modes.
    """
    if not reports:
        raise ValidationError("cannot aggregate an empty report list")
    if mode not in ("micro", "macro"):
        raise ValidationError(f"unknown aggregation mode {mode!r}")
    tp = sum(r.tp for r in reports)
    fp = sum(r.fp for r in reports)
    fn = sum(r.fn for r in reports)
    tn = sum(r.tn for r in reports)
    if mode == "micro":
        iou, precision, recall, f1 = _ratios(tp, fp, fn)
    else:
        iou = float(np.mean([r.iou for r in reports]))
        precision = float(np.mean([r.precision for r in reports]))
        recall = float(np.mean([r.recall for r in reports]))
        f1 = float(np.mean([r.f1 for r in reports]))
    thresholds = sorted(reports[0].boundary_f)
    if any(sorted(r.boundary_f) != thresholds for r in reports):
        raise ValidationError("reports carry different boundary threshold sets")
    boundary = {t: float(np.mean([r.boundary_f[t] for r in reports]))
                for t in thresholds}
    return MetricReport(tp=tp, fp=fp, fn=fn, tn=tn, iou=iou, precision=precision,
                        recall=recall, f1=f1, boundary_f=boundary)
