"""Dataset handling: border ground truth, class balancing, crops, synthetic tiles.

Images are float32 arrays of shape (3, H, W) in [0, 1]; masks are uint8
arrays of shape (H, W) with values in {0, 1}. All sampling is a pure
function of (seed, index, epoch), so any number of workers may load
samples concurrently without coordination.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .errors import ValidationError

IMAGE_EXTENSIONS = (".png", ".tif", ".tiff", ".jpg", ".jpeg")
MASK_THRESHOLD = 128  # 8-bit masks are antialiased in places; road = 255
DEFAULT_BORDER_STRIDES = (8, 16, 32)


@dataclass
class DatasetSpec:
    """Where a split lives on disk and how it is sampled."""

    image_dir: str = ""
    mask_dir: str = ""
    split: str = "train"
    crop_size: int = 256
    seed: int = 0
    tile_stride: int | None = None  # test-time tiling; None = whole image

    def root_dirs(self) -> tuple[Path, Path]:
        """Dataset root dirs before split resolution (env default applies)."""
        image_dir = Path(self.image_dir) if self.image_dir else _data_root() / "images"
        mask_dir = Path(self.mask_dir) if self.mask_dir else _data_root() / "masks"
        return image_dir, mask_dir

    def has_split_subdirs(self, split: str | None = None) -> bool:
        image_dir, mask_dir = self.root_dirs()
        split = split or self.split
        return (image_dir / split).is_dir() and (mask_dir / split).is_dir()

    def resolved_dirs(self) -> tuple[Path, Path]:
        """Return (image_dir, mask_dir), descending into a split subdir if present."""
        image_dir, mask_dir = self.root_dirs()
        if (image_dir / self.split).is_dir():
            image_dir = image_dir / self.split
        if (mask_dir / self.split).is_dir():
            mask_dir = mask_dir / self.split
        return image_dir, mask_dir

    def with_split(self, split: str) -> "DatasetSpec":
        return replace(self, split=split)

    def to_dict(self) -> dict:
        return {
            "image_dir": str(self.image_dir),
            "mask_dir": str(self.mask_dir),
            "split": self.split,
            "crop_size": self.crop_size,
            "seed": self.seed,
            "tile_stride": 0 if self.tile_stride is None else self.tile_stride,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        stride = d.pop("tile_stride", 0)
        spec = cls(**d)
        spec.tile_stride = None if not stride else int(stride)
        return spec


def _data_root() -> Path:
    return Path(os.environ.get("HNS_DATA_ROOT", "data"))


@dataclass
class RoadSample:
    """One training/eval item with derived border supervision targets."""

    image: np.ndarray           # (3, H, W) float32 in [0, 1]
    road_mask: np.ndarray       # (H, W) uint8 {0, 1}
    border_masks: list          # one (H/s, W/s) uint8 mask per stride
    border_strides: tuple       # strides matching border_masks
    pos_weight: float
    neg_weight: float


def _require_binary(mask: np.ndarray, name: str = "mask") -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {mask.shape}")
    if mask.size == 0:
        raise ValidationError(f"{name} is empty")
    if not np.isin(mask, (0, 1)).all():
        raise ValidationError(f"{name} must be binary (values in {{0, 1}})")
    return mask.astype(np.uint8)


def extract_border(mask: np.ndarray, radius: int = 1) -> np.ndarray:
    """Masked morphological gradient: road pixels adjacent to background.

    Uses a square structuring element of side 2*radius+1. Pixels outside
    the image are treated as road, so a road running off the tile edge
    does not produce a spurious border along the cut.
    """
    mask = _require_binary(mask)
    if radius < 1:
        raise ValidationError(f"radius must be >= 1, got {radius}")
    footprint = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    eroded = ndimage.binary_erosion(mask.astype(bool), structure=footprint, border_value=1)
    return (mask.astype(bool) & ~eroded).astype(np.uint8)


def border_pyramid(border: np.ndarray, strides) -> list:
    """Max-pool a full-resolution border mask down to each stride.

    Any positive pixel inside an s x s window marks the window positive,
    which keeps 1-px structures alive under downsampling.
    """
    border = _require_binary(border, "border")
    h, w = border.shape
    levels = []
    for stride in strides:
        if stride < 1 or h % stride or w % stride:
            raise ValidationError(f"stride {stride} does not divide mask dims {h}x{w}")
        pooled = border.reshape(h // stride, stride, w // stride, stride).max(axis=(1, 3))
        levels.append(pooled.astype(np.uint8))
    return levels


def balance_weights(target: np.ndarray) -> tuple[float, float]:
    """Per-sample class-balance weights: (neg fraction, pos fraction).

    The positive term of the cross entropy is scaled by the negative
    fraction and vice versa, so the rare class is compensated. When a
    class is absent, its opposing weight is 0 and the loss degrades
    gracefully (no division by zero anywhere).
    """
    target = _require_binary(target, "target")
    total = target.size
    positives = int(target.sum())
    return (total - positives) / total, positives / total


def make_sample(image: np.ndarray, mask: np.ndarray,
                border_strides=DEFAULT_BORDER_STRIDES, radius: int = 1) -> RoadSample:
    """Assemble a RoadSample: derive borders, pyramid and balance weights."""
    mask = _require_binary(mask)
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[0] != 3 or image.shape[1:] != mask.shape:
        raise ValidationError(
            f"image shape {image.shape} does not match mask shape {mask.shape}")
    border = extract_border(mask, radius)
    pyramid = border_pyramid(border, border_strides)
    pos_w, neg_w = balance_weights(mask)
    return RoadSample(image=image, road_mask=mask, border_masks=pyramid,
                      border_strides=tuple(border_strides),
                      pos_weight=pos_w, neg_weight=neg_w)


def _load_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return np.ascontiguousarray(rgb.transpose(2, 0, 1))


def _load_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            raw = np.asarray(img.convert("L"))
    except OSError as exc:
        raise OSError(f"cannot read mask {path}: {exc}") from exc
    return (raw >= MASK_THRESHOLD).astype(np.uint8)


class RoadDataset:
    """Image/mask pairs matched by basename under a split directory."""

    def __init__(self, spec: DatasetSpec):
        self.spec = spec
        image_dir, mask_dir = spec.resolved_dirs()
        if not image_dir.is_dir():
            raise ValidationError(f"image directory not found: {image_dir}")
        if not mask_dir.is_dir():
            raise ValidationError(f"mask directory not found: {mask_dir}")
        images = {p.stem: p for p in sorted(image_dir.iterdir())
                  if p.suffix.lower() in IMAGE_EXTENSIONS}
        masks = {p.stem: p for p in sorted(mask_dir.iterdir())
                 if p.suffix.lower() in IMAGE_EXTENSIONS}
        missing_masks = sorted(set(images) - set(masks))
        missing_images = sorted(set(masks) - set(images))
        if missing_masks or missing_images:
            raise ValidationError(
                "image/mask basename mismatch: "
                f"images without masks={missing_masks}, masks without images={missing_images}")
        if not images:
            raise ValidationError(f"no images found in {image_dir}")
        self.pairs = [(images[k], masks[k]) for k in sorted(images)]

    def __len__(self) -> int:
        return len(self.pairs)

    def load_pair(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        image_path, mask_path = self.pairs[index]
        image = _load_image(image_path)
        mask = _load_mask(mask_path)
        if image.shape[1:] != mask.shape:
            raise ValidationError(
                f"{image_path.name}: image dims {image.shape[1:]} != mask dims {mask.shape}")
        return image, mask

    def full_sample(self, index: int, border_strides=DEFAULT_BORDER_STRIDES) -> RoadSample:
        image, mask = self.load_pair(index)
        return make_sample(image, mask, border_strides)

    def sample_crop(self, index: int, epoch: int = 0,
                    border_strides=DEFAULT_BORDER_STRIDES) -> RoadSample:
        """Deterministic random crop; borders are recomputed on the crop.

        Recomputing (rather than cropping precomputed full-res borders)
        avoids spurious borders where a road is cut by the crop edge.
        """
        image, mask = self.load_pair(index)
        crop = self.spec.crop_size
        h, w = mask.shape
        if crop > h or crop > w:
            raise ValidationError(f"crop_size {crop} exceeds source dims {h}x{w}")
        rng = np.random.default_rng([self.spec.seed, epoch, index])
        top = int(rng.integers(0, h - crop + 1))
        left = int(rng.integers(0, w - crop + 1))
        image = image[:, top:top + crop, left:left + crop]
        mask = mask[top:top + crop, left:left + crop]
        return make_sample(image, mask, border_strides)


@dataclass
class TrainBatch:
    """Stacked tensors for one optimization step."""

    images: torch.Tensor        # (B, 3, H, W) float32
    road_mask: torch.Tensor     # (B, H, W) float32 {0, 1}
    border_masks: dict          # stride -> (B, H/s, W/s) float32 {0, 1}
    pos_weight: torch.Tensor    # (B,)
    neg_weight: torch.Tensor    # (B,)


def collate(samples: list) -> TrainBatch:
    """Stack RoadSamples sharing dims and border strides into tensors."""
    if not samples:
        raise ValidationError("cannot collate an empty sample list")
    strides = samples[0].border_strides
    if any(s.border_strides != strides for s in samples):
        raise ValidationError("samples carry different border stride sets")
    images = torch.from_numpy(np.stack([s.image for s in samples]))
    road = torch.from_numpy(np.stack([s.road_mask for s in samples])).float()
    borders = {}
    for i, stride in enumerate(strides):
        borders[stride] = torch.from_numpy(
            np.stack([s.border_masks[i] for s in samples])).float()
    pos = torch.tensor([s.pos_weight for s in samples], dtype=torch.float32)
    neg = torch.tensor([s.neg_weight for s in samples], dtype=torch.float32)
    return TrainBatch(images=images, road_mask=road, border_masks=borders,
                      pos_weight=pos, neg_weight=neg)


# ---------------------------------------------------------------------------
# Synthetic tiles: desk-scale stand-in for the full aerial dataset.
# Generator parameters (1-4 curves, widths 3-9 px, the color bands below)
# were frozen after measuring positive-pixel density over 100 seeds.
# ---------------------------------------------------------------------------

ROAD_LUMINANCE = (0.12, 0.32)
BACKGROUND_LUMINANCE = (0.45, 0.82)
MAX_ROAD_FRACTION = 0.35  # stop adding curves past this density


def _edge_point(rng, size: int, edge: int) -> np.ndarray:
    t = rng.uniform(0, size - 1)
    if edge == 0:
        return np.array([0.0, t])
    if edge == 1:
        return np.array([t, size - 1.0])
    if edge == 2:
        return np.array([size - 1.0, t])
    return np.array([t, 0.0])


def _stamp_curve(size: int, p0, ctrl, p1, width: float) -> np.ndarray:
    steps = 4 * size
    t = np.linspace(0.0, 1.0, steps)[:, None]
    points = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * ctrl + t ** 2 * p1
    radius = width / 2.0
    reach = int(np.ceil(radius))
    dy, dx = np.mgrid[-reach:reach + 1, -reach:reach + 1]
    keep = dy ** 2 + dx ** 2 <= radius ** 2
    offsets = np.stack([dy[keep], dx[keep]], axis=1)
    cells = np.rint(points).astype(int)[:, None, :] + offsets[None, :, :]
    cells = cells.reshape(-1, 2)
    inside = ((cells >= 0) & (cells < size)).all(axis=1)
    cells = cells[inside]
    mask = np.zeros((size, size), dtype=bool)
    mask[cells[:, 0], cells[:, 1]] = True
    return mask


def _render_tile(rng, size: int, road_width: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    # textured background: ramp between two light colors + noise
    lo, hi = BACKGROUND_LUMINANCE
    color_a = rng.uniform(lo, hi, size=3)
    color_b = rng.uniform(lo, hi, size=3)
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy + 1) / 3.0
    image = color_a[:, None, None] * (1 - ramp) + color_b[:, None, None] * ramp

    # distractor blobs share the background color band, never the road band
    for _ in range(int(rng.integers(0, 5))):
        cy, cx = rng.uniform(0, size, size=2)
        ry, rx = rng.uniform(size / 16, size / 4, size=2)
        blob = ((np.mgrid[0:size, 0:size][0] - cy) / ry) ** 2 \
            + ((np.mgrid[0:size, 0:size][1] - cx) / rx) ** 2 <= 1.0
        image[:, blob] = rng.uniform(lo, hi, size=3)[:, None]

    mask = np.zeros((size, size), dtype=bool)
    w_lo, w_hi = road_width
    for _ in range(int(rng.integers(1, 5))):
        if mask.mean() > MAX_ROAD_FRACTION:
            break
        edge0 = int(rng.integers(0, 4))
        edge1 = (edge0 + int(rng.integers(1, 4))) % 4
        p0 = _edge_point(rng, size, edge0)
        p1 = _edge_point(rng, size, edge1)
        ctrl = rng.uniform(0, size - 1, size=2)
        width = int(rng.integers(w_lo, w_hi + 1))
        curve = _stamp_curve(size, p0, ctrl, p1, width)
        mask |= curve
        luminance = rng.uniform(*ROAD_LUMINANCE)
        tint = luminance + rng.uniform(-0.03, 0.03, size=3)
        image[:, curve] = tint[:, None]

    image = image + rng.normal(0.0, 0.02, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask.astype(np.uint8)


def synth_tiles(count: int, size: int, seed: int, road_width=(3, 9),
                border_strides=DEFAULT_BORDER_STRIDES) -> list:
    """Generate seed-deterministic synthetic road tiles."""
    if count < 0:
        raise ValidationError(f"count must be >= 0, got {count}")
    if size < 64:
        raise ValidationError(f"size must be >= 64, got {size}")
    w_lo, w_hi = road_width
    if not (1 <= w_lo <= w_hi):
        raise ValidationError(f"bad road width range {road_width}")
    samples = []
    for index in range(count):
        rng = np.random.default_rng([seed, index])
        image, mask = _render_tile(rng, size, (w_lo, w_hi))
        samples.append(make_sample(image, mask, border_strides))
    return samples


def write_synth_dataset(out_dir, count: int, size: int, seed: int,
                        road_width=(3, 9), split: str | None = None) -> dict:
    """Write synthetic tiles as PNG pairs under out_dir/{images,masks}[/split]."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images" / split if split else out_dir / "images"
    mask_dir = out_dir / "masks" / split if split else out_dir / "masks"
    image_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)
    fractions = []
    for index in range(count):
        rng = np.random.default_rng([seed, index])
        image, mask = _render_tile(rng, size, road_width)
        name = f"tile_{index:05d}.png"
        rgb = np.rint(image.transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(rgb).save(image_dir / name)
        Image.fromarray(mask * 255).save(mask_dir / name)
        fractions.append(float(mask.mean()))
    return {
        "count": count, "size": size, "seed": seed,
        "road_width": list(road_width),
        "image_dir": str(image_dir), "mask_dir": str(mask_dir),
        "mean_road_fraction": float(np.mean(fractions)) if fractions else 0.0,
    }
