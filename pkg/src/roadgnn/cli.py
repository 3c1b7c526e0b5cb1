"""Command-line entry point: prepare, synth, train, eval, predict, ablate, make-borders.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure. Every
run writes machine-readable outputs (and a resolved-config snapshot where
a config applies) under its --output directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import RunConfig, apply_overrides, load_run_config, save_run_config
from .data import RoadDataset, extract_border, write_synth_dataset, _load_mask
from .errors import ValidationError
from .training import (ablate, evaluate, load_checkpoint, predict_image,
                    save_mask_png, save_prob_png, train, write_overlay)


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; the documented contract is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(parser, default_output):
    parser.add_argument("--config", help="run config file (flat TOML)")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="config override, applied after the file (repeatable)")
    parser.add_argument("--output", default=default_output,
                        help=f"output directory (default: {default_output})")


def _build_parser() -> _Parser:
    parser = _Parser(prog="roadgnn",
                     description="Joint road/border extraction from aerial tiles")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="validate a dataset layout and summarize it")
    _add_common(p, "runs/prepare")
    p.set_defaults(func=_cmd_prepare)

    p = sub.add_parser("synth", help="generate synthetic road tiles")
    _add_common(p, "runs/synth")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default=None, help="nest tiles under this split subdir")
    p.add_argument("--width-min", type=int, default=3)
    p.add_argument("--width-max", type=int, default=9)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a model from a run config")
    _add_common(p, "runs/train")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_common(p, "runs/eval")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--mode", choices=("micro", "macro"), default="micro")
    p.add_argument("--overlays", action="store_true")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="run a checkpoint over images")
    _add_common(p, "runs/predict")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--tile-stride", type=int, default=None)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("ablate", help="train/evaluate ablation variants")
    _add_common(p, "runs/ablate")
    p.add_argument("--variants", default="BU,SG,E1,E2,full",
                   help="comma-separated subset of BU,SG,E1,E2,full")
    p.add_argument("--smoke", action="store_true", help="one step / tiny eval per variant")
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("make-borders", help="batch border extraction from masks")
    _add_common(p, "runs/borders")
    p.add_argument("--masks", required=True, help="directory of binary mask PNGs")
    p.add_argument("--radius", type=int, default=1)
    p.set_defaults(func=_cmd_make_borders)

    return parser


def _out_dir(args) -> Path:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_prepare(args) -> int:
    out = _out_dir(args)
    config = load_run_config(args.config, args.set)
    found = [s for s in ("train", "val", "test") if config.data.has_split_subdirs(s)]
    if not found:
        found = [config.data.split]  # flat layout: validate the configured split
    summary = {}
    for split in found:
        spec = config.data.with_split(split)
        image_dir, mask_dir = spec.resolved_dirs()
        dataset = RoadDataset(spec)
        fractions = []
        for index in range(len(dataset)):
            _, mask = dataset.load_pair(index)
            fractions.append(float(mask.mean()))
        summary[split] = {
            "count": len(dataset),
            "image_dir": str(image_dir),
            "mask_dir": str(mask_dir),
            "mean_road_fraction": float(np.mean(fractions)),
        }
    if not summary:
        raise ValidationError("no split directories found under the configured dataset")
    save_run_config(out / "config.toml", config)
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))
    return 0


def _cmd_synth(args) -> int:
    out = _out_dir(args)
    summary = write_synth_dataset(out, args.count, args.size, args.seed,
                                  road_width=(args.width_min, args.width_max),
                                  split=args.split)
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"wrote {args.count} tiles under {out}")
    return 0


def _cmd_train(args) -> int:
    out = _out_dir(args)
    config = load_run_config(args.config, args.set)
    if not Path(config.checkpoint_dir).is_absolute():
        config.checkpoint_dir = str(out / config.checkpoint_dir)
    save_run_config(out / "config.toml", config)
    checkpoint = train(config, resume_from=args.resume,
                       log_path=out / "train_log.csv")
    print(f"checkpoint: {checkpoint}")
    return 0


def _cmd_eval(args) -> int:
    out = _out_dir(args)
    _, config, _, _ = load_checkpoint(args.checkpoint)
    if args.set:
        merged = config.to_dict()
        apply_overrides(merged, args.set)
        config = RunConfig.from_dict(merged)
    save_run_config(out / "config.toml", config)
    summary = evaluate(args.checkpoint, split=args.split, limit=args.limit,
                       mode=args.mode, out_dir=out, overlays=args.overlays)
    print(json.dumps(summary.to_json_dict(), indent=2))
    return 0


def _cmd_predict(args) -> int:
    out = _out_dir(args)
    model, config, _, _ = load_checkpoint(args.checkpoint)
    source = Path(args.input)
    if source.is_dir():
        paths = sorted(p for p in source.iterdir()
                       if p.suffix.lower() in (".png", ".tif", ".tiff", ".jpg", ".jpeg"))
    else:
        paths = [source]
    if not paths:
        raise ValidationError(f"no input images under {source}")
    save_run_config(out / "config.toml", config)
    for path in paths:
        with Image.open(path) as img:
            image = np.asarray(img.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
        road, borders = predict_image(model, image,
                                      tile_size=config.data.crop_size,
                                      tile_stride=args.tile_stride)
        pred = (road >= 0.5).astype(np.uint8)
        save_mask_png(out / f"{path.stem}_road.png", pred)
        for level, border in sorted(borders.items()):
            save_prob_png(out / f"{path.stem}_border_L{level}.png", border)
        finest = max(borders, key=lambda lvl: borders[lvl].shape[-1], default=None)
        border_mask = (borders[finest] >= 0.5) if finest is not None else None
        write_overlay(out / f"{path.stem}_overlay.png", image, pred, border_mask)
    print(f"wrote predictions for {len(paths)} image(s) to {out}")
    return 0


def _cmd_ablate(args) -> int:
    out = _out_dir(args)
    config = load_run_config(args.config, args.set)
    save_run_config(out / "config.toml", config)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    rows = ablate(config, variants, out, smoke=args.smoke,
                  eval_split=args.split, eval_limit=args.limit)
    print(f"wrote ablation table for {len(rows)} variant(s) to {out / 'ablation.csv'}")
    return 0


def _cmd_make_borders(args) -> int:
    out = _out_dir(args)
    mask_dir = Path(args.masks)
    if not mask_dir.is_dir():
        raise ValidationError(f"mask directory not found: {mask_dir}")
    paths = sorted(p for p in mask_dir.iterdir() if p.suffix.lower() == ".png")
    if not paths:
        raise ValidationError(f"no mask PNGs under {mask_dir}")
    for path in paths:
        border = extract_border(_load_mask(path), radius=args.radius)
        save_mask_png(out / f"{path.stem}_border.png", border)
    (out / "summary.json").write_text(json.dumps(
        {"masks": str(mask_dir), "radius": args.radius, "count": len(paths)},
        indent=2))
    print(f"wrote {len(paths)} border masks to {out}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
