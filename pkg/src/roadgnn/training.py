"""Training loop, split evaluation, checkpointing and the ablation harness."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import RunConfig, config_hash
from .data import RoadDataset, collate
from .errors import ConfigError, TrainingDivergedError, ValidationError
from .losses import total_loss
from .metrics import BOUNDARY_THRESHOLDS, MetricReport, aggregate, evaluate_masks
from .model import build_model, parameter_checksum

FORMAT_VERSION = 1

# Reference accuracy from full-scale training (1108 Massachusetts tiles,
# 50 epochs, batch 20). Recorded for report footers; not reproducible at
# desk scale.
REFERENCE_SCORES = {
    "massachusetts_test": {"iou": 62.94, "f1": 76.96},
    "ablation_f1": {"BU": 74.95, "SG": 75.67, "E1": 75.78, "E2": 76.89, "full": 76.96},
    "note": "full-dataset training results; not desk-reproducible",
}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(directory, model, optimizer, config: RunConfig,
                    epoch: int, step: int, metrics: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = {"model": model.state_dict(),
               "optimizer": optimizer.state_dict() if optimizer else None}
    torch.save(payload, directory / "weights.pt")
    config_dict = config.to_dict()
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config_dict,
        "config_hash": config_hash(config_dict),
        "epoch": epoch,
        "step": step,
        "seed": config.seed,
        "metrics": metrics,
        "parameter_checksum": parameter_checksum(model),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_checkpoint(directory):
    """Return (model, run_config, payload, manifest); mismatches are hard errors."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    weights_path = directory / "weights.pt"
    if not manifest_path.is_file() or not weights_path.is_file():
        raise ValidationError(f"not a checkpoint directory: {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ConfigError(
            f"checkpoint format {manifest.get('format_version')} != {FORMAT_VERSION}")
    config = RunConfig.from_dict(manifest["config"])
    model = build_model(config.model)
    payload = torch.load(weights_path, map_location="cpu", weights_only=True)
    try:
        model.load_state_dict(payload["model"])
    except RuntimeError as exc:
        raise ConfigError(f"checkpoint/config mismatch in {directory}: {exc}") from exc
    return model, config, payload, manifest


# ---------------------------------------------------------------------------
# inference helpers
# ---------------------------------------------------------------------------

def _pad_to_multiple(image: torch.Tensor, multiple: int = 32) -> torch.Tensor:
    h, w = image.shape[-2:]
    pad_h = (multiple - h % multiple) % multiple
    pad_w = (multiple - w % multiple) % multiple
    if pad_h == 0 and pad_w == 0:
        return image
    return torch.nn.functional.pad(image, (0, pad_w, 0, pad_h), mode="replicate")


def predict_image(model, image: np.ndarray, tile_size: int | None = None,
                  tile_stride: int | None = None):
    """Road probability map (H, W) plus per-level border maps for one image.

    Whole-image mode pads to a multiple of 32 and crops the outputs back.
    Tiled mode averages overlapping road predictions; border maps are not
    defined globally there and come back empty.
    """
    model.eval()
    tensor = torch.from_numpy(np.ascontiguousarray(image)).float().unsqueeze(0)
    h, w = image.shape[-2:]
    with torch.no_grad():
        if tile_stride is None:
            padded = _pad_to_multiple(tensor)
            bundle = model(padded)
            road = bundle.road[0, :h, :w].numpy()
            borders = {}
            for level, border in bundle.borders.items():
                stride = padded.shape[-2] // border.shape[-2]
                borders[level] = border[0, :-(-h // stride), :-(-w // stride)].numpy()
            return road, borders
        tile = tile_size or 256
        if tile % 32:
            raise ValidationError(f"tile size {tile} must be divisible by 32")
        if tile > h or tile > w:
            raise ValidationError(f"tile size {tile} exceeds image dims {h}x{w}")
        acc = torch.zeros(h, w)
        count = torch.zeros(h, w)
        tops = sorted(set(list(range(0, h - tile, tile_stride)) + [h - tile]))
        lefts = sorted(set(list(range(0, w - tile, tile_stride)) + [w - tile]))
        for top in tops:
            for left in lefts:
                window = tensor[:, :, top:top + tile, left:left + tile]
                bundle = model(window)
                acc[top:top + tile, left:left + tile] += bundle.road[0]
                count[top:top + tile, left:left + tile] += 1
        return (acc / count).numpy(), {}


def save_mask_png(path, mask01: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask01) > 0).astype(np.uint8) * 255).save(path)


def save_prob_png(path, prob: np.ndarray) -> None:
    Image.fromarray(np.rint(np.clip(prob, 0, 1) * 255).astype(np.uint8)).save(path)


def write_overlay(path, image: np.ndarray, road_mask: np.ndarray,
                  border_mask: np.ndarray | None = None) -> None:
    """Prediction overlay: road in red, border (if given) in cyan."""
    rgb = np.clip(image.transpose(1, 2, 0), 0, 1) * 255
    road = np.asarray(road_mask) > 0
    rgb[road] = 0.45 * rgb[road] + 0.55 * np.array([255.0, 0.0, 0.0])
    if border_mask is not None:
        h, w = road.shape
        bh, bw = border_mask.shape
        if bh and bw and h % bh == 0 and w % bw == 0:
            border = np.kron(np.asarray(border_mask) > 0,
                             np.ones((h // bh, w // bw), dtype=bool))
            rgb[border] = 0.45 * rgb[border] + 0.55 * np.array([0.0, 255.0, 255.0])
    Image.fromarray(rgb.astype(np.uint8)).save(path)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _resume_compatible(saved: dict, requested: dict) -> bool:
    """Configs must agree except for fields that merely extend the run."""
    def reduced(d):
        train_section = {k: v for k, v in d["train"].items()
                         if k not in ("epochs", "checkpoint_dir", "eval_interval")}
        return {"train": train_section, "model": d["model"], "data": d["data"]}
    return config_hash(reduced(saved)) == config_hash(reduced(requested))


def _epoch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0xBA7C4]).permutation(count)


def _loss_columns(levels) -> list:
    columns = ["step", "epoch", "l_road"]
    columns += [f"l_border_{level}" for level in sorted(levels)]
    columns += [f"l_cons_{level}" for level in sorted(levels)]
    return columns + ["total"]


def train(config: RunConfig, resume_from=None, log_path=None) -> Path:
    """Optimize the joint loss over crops; returns the 'last' checkpoint dir.

    Fully seed-deterministic on CPU; checkpoints are written per epoch and
    a NaN loss aborts with the last good checkpoint left on disk.
    """
    config.validate()
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    model = build_model(config.model, seed=config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    checkpoint_root = Path(config.checkpoint_dir)
    last_dir = checkpoint_root / "last"
    best_dir = checkpoint_root / "best"
    start_epoch, step = 0, 0
    best_f1 = None
    if resume_from is not None:
        loaded, loaded_config, payload, manifest = load_checkpoint(resume_from)
        if not _resume_compatible(loaded_config.to_dict(), config.to_dict()):
            raise ConfigError("resume checkpoint was written with a different config")
        model.load_state_dict(loaded.state_dict())
        if payload["optimizer"] is not None:
            optimizer.load_state_dict(payload["optimizer"])
        start_epoch = manifest["epoch"] + 1
        step = manifest["step"]
        if manifest.get("metrics"):
            best_f1 = manifest["metrics"].get("f1")

    dataset = RoadDataset(config.data)
    strides = config.model.border_strides()
    levels = sorted(config.model.gnn_levels)

    log_path = Path(log_path) if log_path else checkpoint_root / "train_log.csv"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    fresh_log = resume_from is None or not log_path.exists()
    log_file = open(log_path, "w" if fresh_log else "a", newline="")
    writer = csv.writer(log_file)
    if fresh_log:
        writer.writerow(_loss_columns(levels))

    try:
        if config.epochs == 0 or start_epoch >= config.epochs:
            return save_checkpoint(last_dir, model, optimizer, config,
                                   epoch=start_epoch - 1, step=step)
        for epoch in range(start_epoch, config.epochs):
            order = _epoch_order(config.seed, epoch, len(dataset))
            batches = [order[i:i + config.batch_size]
                       for i in range(0, len(order), config.batch_size)]
            if config.max_steps_per_epoch:
                batches = batches[:config.max_steps_per_epoch]
            model.train()
            for indices in batches:
                samples = [dataset.sample_crop(int(i), epoch, strides) for i in indices]
                batch = collate(samples)
                bundle = model(batch.images)
                report = total_loss(bundle, batch, config.model.consistency_weight)
                if not torch.isfinite(report.total):
                    log_file.flush()
                    raise TrainingDivergedError(
                        f"non-finite loss at step {step}",
                        checkpoint=last_dir if last_dir.exists() else None)
                optimizer.zero_grad()
                report.total.backward()
                if config.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()
                step += 1
                row = report.as_floats()
                writer.writerow([step, epoch] + [row[c] for c in _loss_columns(levels)[2:]])
            log_file.flush()

            snapshot = None
            if config.eval_interval and (epoch + 1) % config.eval_interval == 0:
                snapshot = _validation_snapshot(model, config)
            save_checkpoint(last_dir, model, optimizer, config, epoch, step, snapshot)
            if snapshot is not None and (best_f1 is None or snapshot["f1"] > best_f1):
                best_f1 = snapshot["f1"]
                save_checkpoint(best_dir, model, optimizer, config, epoch, step, snapshot)
    finally:
        log_file.close()
    return last_dir


def _validation_snapshot(model, config: RunConfig) -> dict | None:
    if not config.data.has_split_subdirs("val"):
        return None
    report, _ = evaluate_model(model, config.data.with_split("val"))
    return report.to_json_dict()


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_model(model, spec, limit: int | None = None,
                   thresholds=BOUNDARY_THRESHOLDS, mode: str = "micro",
                   overlay_dir=None):
    """Run the model over a split and aggregate per-image metric reports."""
    dataset = RoadDataset(spec)
    count = len(dataset) if limit is None else min(limit, len(dataset))
    if count == 0:
        raise ValidationError(f"split {spec.split!r} is empty")
    if overlay_dir is not None:
        overlay_dir = Path(overlay_dir)
        overlay_dir.mkdir(parents=True, exist_ok=True)
    reports, names = [], []
    for index in range(count):
        image, mask = dataset.load_pair(index)
        road, borders = predict_image(
            model, image, tile_size=spec.crop_size, tile_stride=spec.tile_stride)
        pred = (road >= 0.5).astype(np.uint8)
        reports.append(evaluate_masks(pred, mask, thresholds))
        names.append(dataset.pairs[index][0].stem)
        if overlay_dir is not None:
            finest = max(borders, key=lambda lvl: borders[lvl].shape[-1], default=None)
            border_mask = (borders[finest] >= 0.5) if finest is not None else None
            write_overlay(overlay_dir / f"{names[-1]}_overlay.png",
                          image, pred, border_mask)
    summary = aggregate(reports, mode)
    per_image = [dict(name=name, **report.to_json_dict())
                 for name, report in zip(names, reports)]
    return summary, per_image


def evaluate(checkpoint, split: str = "test", limit: int | None = None,
             mode: str = "micro", out_dir=None, overlays: bool = False) -> MetricReport:
    """Evaluate a checkpoint on a split; optionally write report + overlays."""
    model, config, _, manifest = load_checkpoint(checkpoint)
    spec = config.data.with_split(split)
    overlay_dir = Path(out_dir) / "overlays" if (out_dir and overlays) else None
    summary, per_image = evaluate_model(model, spec, limit=limit, mode=mode,
                                        overlay_dir=overlay_dir)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report = {
            "checkpoint": str(checkpoint),
            "split": split,
            "mode": mode,
            "config_hash": manifest["config_hash"],
            **summary.to_json_dict(),
            "per_image": per_image,
            "reference": REFERENCE_SCORES,
        }
        (out_dir / "report.json").write_text(json.dumps(report, indent=2))
    return summary


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = ("BU", "SG", "E1", "E2", "full")


def ablate(base: RunConfig, variants, out_dir, smoke: bool = False,
           eval_split: str = "test", eval_limit: int | None = None) -> list:
    """Train and evaluate each variant under identical data order and seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise ValidationError(f"unknown variants {unknown}; "
                              f"expected subset of {ABLATION_VARIANTS}")
    rows = []
    failure = None
    for variant in variants:
        run = base.with_variant(variant)
        run.checkpoint_dir = str(out_dir / variant / "checkpoints")
        if smoke:
            run.epochs = 1
            run.max_steps_per_epoch = 1
            run.eval_interval = 0
            eval_limit = eval_limit or 2
        try:
            checkpoint = train(run)
            final_loss = _final_logged_total(Path(run.checkpoint_dir) / "train_log.csv")
            summary = evaluate(checkpoint, split=eval_split, limit=eval_limit)
            row = {"variant": variant, "final_total_loss": final_loss,
                   "iou": summary.iou, "precision": summary.precision,
                   "recall": summary.recall, "f1": summary.f1}
            row.update({f"boundary_f_{t}": v for t, v in sorted(summary.boundary_f.items())})
            rows.append(row)
        except Exception as exc:  # partial results are flagged, then re-raised
            failure = (variant, exc)
            break
    _write_ablation_table(out_dir, rows, failure)
    if failure is not None:
        variant, exc = failure
        raise RuntimeError(f"ablation aborted at variant {variant}: {exc}") from exc
    return rows


def _final_logged_total(log_path: Path) -> float | None:
    if not log_path.is_file():
        return None
    with open(log_path, newline="") as handle:
        rows = list(csv.DictReader(handle))
    return float(rows[-1]["total"]) if rows else None


def _write_ablation_table(out_dir: Path, rows: list, failure=None) -> None:
    reference = REFERENCE_SCORES["ablation_f1"]
    json_payload = {"rows": rows, "reference_f1": reference,
                    "note": REFERENCE_SCORES["note"]}
    if failure is not None:
        json_payload["aborted_at"] = {"variant": failure[0], "error": str(failure[1])}
    (out_dir / "ablation.json").write_text(json.dumps(json_payload, indent=2))
    csv_path = out_dir / "ablation.csv"
    with open(csv_path, "w", newline="") as handle:
        if rows:
            writer = csv.DictWriter(handle, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
        if failure is not None:
            handle.write(f"# PARTIAL: aborted at variant {failure[0]}: {failure[1]}\n")
        handle.write("# reference F1 from full-dataset training (not desk-reproducible): "
                     + ", ".join(f"{k}={v}" for k, v in reference.items()) + "\n")
