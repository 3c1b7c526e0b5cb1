"""Shared test utilities: finite-difference gradient checks and pixel oracles."""

import numpy as np
import torch


def numeric_gradient(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central-difference gradient of a scalar function w.r.t. x (float64)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    grad_flat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            plus = float(fn(x))
            flat[i] = orig - eps
            minus = float(fn(x))
            flat[i] = orig
            grad_flat[i] = (plus - minus) / (2 * eps)
    return grad


def analytic_gradient(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    out = fn(x)
    out.backward()
    return x.grad.detach()


def max_relative_error(analytic: torch.Tensor, numeric: torch.Tensor,
                       floor: float = 1e-6) -> float:
    """Elementwise |a - n| / max(|a|, |n|, floor), reduced with max."""
    diff = (analytic - numeric).abs()
    scale = torch.maximum(analytic.abs(), numeric.abs()).clamp(min=floor)
    return float((diff / scale).max())


def check_gradient(fn, x: torch.Tensor, tol: float = 1e-4, eps: float = 1e-6) -> float:
    """Assert the autograd gradient of a scalar fn matches central differences."""
    assert x.dtype == torch.float64, "gradient checks run at float64"
    analytic = analytic_gradient(fn, x)
    numeric = numeric_gradient(fn, x, eps=eps)
    err = max_relative_error(analytic, numeric)
    assert err <= tol, f"gradient mismatch: max relative error {err:.3e} > {tol}"
    return err


def counting_region_oracle(pred: np.ndarray, gt: np.ndarray):
    """Confusion counts by an explicit per-pixel loop."""
    tp = fp = fn = tn = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            p, g = int(pred[i, j]), int(gt[i, j])
            if p and g:
                tp += 1
            elif p and not g:
                fp += 1
            elif not p and g:
                fn += 1
            else:
                tn += 1
    return tp, fp, fn, tn


def dilation_erosion_oracle(mask: np.ndarray, radius: int = 1) -> np.ndarray:
    """Brute-force inner border: mask pixels whose window reaches background.

    Outside-image pixels count as foreground, matching the crop-edge
    clamping of the production operator.
    """
    h, w = mask.shape
    border = np.zeros_like(mask, dtype=np.uint8)
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            eroded = True
            for di in range(-radius, radius + 1):
                for dj in range(-radius, radius + 1):
                    ni, nj = i + di, j + dj
                    if 0 <= ni < h and 0 <= nj < w and not mask[ni, nj]:
                        eroded = False
            border[i, j] = 0 if eroded else 1
    return border


def consistency_oracle(road: np.ndarray, border: np.ndarray,
                       threshold: float = 0.5) -> float:
    """Scalar-loop recomputation of the border consistency loss."""
    h, w = road.shape
    total, count = 0.0, 0
    for i in range(h):
        for j in range(w):
            jp, jm = min(j + 1, w - 1), max(j - 1, 0)
            ip, im = min(i + 1, h - 1), max(i - 1, 0)
            gx = road[i, jp] - road[i, jm]
            gy = road[ip, j] - road[im, j]
            mag = np.sqrt(gx * gx + gy * gy)
            if border[i, j] > threshold or mag > 0:
                count += 1
                total += abs(mag / np.sqrt(2.0) - border[i, j])
    return total / count if count else 0.0
