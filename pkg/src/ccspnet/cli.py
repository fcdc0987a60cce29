"""``ccspnet`` command line: augment, train, eval, compare, bench, render."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .boxes import read_labels
from .data import load_dataset, load_image, save_image, to_tensor
from .degrade import ParamRanges, generate_corpus, parse_mix
from .detector import predict
from .errors import ConfigurationError, InputError
from .metrics import count_parameters, measure_fps
from .render import render_overlay
from .training import (
    Checkpoint,
    ExperimentConfig,
    build_model,
    compare_strategies,
    evaluate_checkpoint,
    inference_model,
    train,
)

DEFAULT_MIX = "fog=0.34,rain=0.33,blur=0.33"


class CliError(Exception):
    """Reported as ``error: ...`` on stderr with exit status 2."""


def _load_config(args) -> ExperimentConfig:
    path = Path(args.config)
    if not path.is_file():
        raise CliError(f"config file {path} not found")
    config = ExperimentConfig.load(path)
    overrides = {k: getattr(args, k) for k in ("strategy", "seed", "epochs") if getattr(args, k, None) is not None}
    return config.replace(**overrides) if overrides else config


def _load_checkpoint(path: str, config: ExperimentConfig | None = None) -> Checkpoint:
    if not (Path(path) / "checkpoint.pt").is_file():
        raise CliError(f"no checkpoint found at {path}")
    return Checkpoint.load(path, config)


def _default_seed(value):
    if value is not None:
        return value
    env = os.environ.get("CCSP_SEED")
    if env is None:
        raise CliError("--seed is required (or set CCSP_SEED)")
    try:
        return int(env)
    except ValueError:
        raise CliError(f"CCSP_SEED must be an integer, got {env!r}") from None


def cmd_augment(args) -> int:
    src = Path(args.input)
    if not src.is_dir():
        raise CliError(f"input directory {src} does not exist")
    ranges = None
    if args.ranges:
        try:
            ranges = ParamRanges.from_json(json.loads(Path(args.ranges).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read ranges file {args.ranges}: {exc}") from exc
    manifest = generate_corpus(src, args.out, parse_mix(args.mix), ranges, _default_seed(args.seed))
    print(Path(args.out) / "manifest.json")
    for kind, n in manifest.counts().items():
        print(f"{kind}\t{n}")
    if manifest.errors:
        print(f"skipped\t{len(manifest.errors)}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    out = Path(args.out or config.output_dir)
    ckpt = train(config, out)
    print(out)
    if ckpt.history:
        last = ckpt.history[-1]
        print(" ".join(f"{k}={last[k]:.6g}" for k in ("l1", "l2", "joint")))
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    ckpt = _load_checkpoint(args.checkpoint, config)
    data = args.data or config.data.eval
    if not data:
        raise CliError("no evaluation data given (--data or data.eval in the config)")
    report = evaluate_checkpoint(ckpt, load_dataset(data), timed=not args.no_timing)
    if args.out:
        report.save(args.out)
        print(args.out)
    else:
        sys.stdout.write(report.to_json())
    return 0


def cmd_compare(args) -> int:
    config = _load_config(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise CliError("--seeds must list at least one seed")
    report = compare_strategies(config, seeds, output_dir=args.out)
    sys.stdout.write(report.render())
    return 0


def cmd_bench(args) -> int:
    config = _load_config(args)
    detector, denoiser = build_model(config)
    model = inference_model(detector, denoiser)
    gen = torch.Generator().manual_seed(config.seed)
    images = torch.rand(args.images, config.model.in_channels, args.size, args.size, generator=gen)
    fps = measure_fps(model, images)
    print(json.dumps({"fps": fps, "parameter_count": count_parameters(model), "wall_clock": True}, sort_keys=True))
    return 0


def _image_paths(spec: str) -> list[Path]:
    path = Path(spec)
    if path.is_dir():
        paths = sorted(path.rglob("*.png"))
        if not paths:
            raise CliError(f"no PNG images under {path}")
        return paths
    if not path.is_file():
        raise CliError(f"image path {path} does not exist")
    return [path]


def cmd_render(args) -> int:
    config = _load_config(args)
    ckpt = _load_checkpoint(args.checkpoint, config)
    model = ckpt.model()
    out_dir = Path(args.out)
    root = Path(args.images) if Path(args.images).is_dir() else Path(args.images).parent
    for path in _image_paths(args.images):
        try:
            image = load_image(path)
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read image {path}: {exc}") from exc
        label_path = path.with_suffix(".txt")
        truths = read_labels(label_path.read_text(encoding="utf-8")) if label_path.is_file() else None
        dets = predict(model, to_tensor([image]), conf_threshold=args.conf, iou_threshold=config.nms_iou)[0]
        overlay = render_overlay(image, dets, truths)
        target = out_dir / path.relative_to(root)
        target.parent.mkdir(parents=True, exist_ok=True)
        save_image(target, overlay.astype(np.float64) / 255.0)
        print(f"{target}\t{len(dets)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccspnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("augment", help="synthesize a fog/rain/blur corpus from clean images")
    p.add_argument("--in", dest="input", required=True, help="clean image directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="global seed (default: $CCSP_SEED)")
    p.add_argument("--mix", default=DEFAULT_MIX, help=f"condition proportions (default: {DEFAULT_MIX})")
    p.add_argument("--ranges", default=None, help="JSON file overriding severity ranges")
    p.set_defaults(func=cmd_augment)

    def with_config(p, overrides=False):
        p.add_argument("--config", required=True, help="experiment config JSON")
        if overrides:
            p.add_argument("--strategy", choices=("direct", "end_to_end", "joint"), default=None)
            p.add_argument("--seed", type=int, default=None)
            p.add_argument("--epochs", type=int, default=None)
        return p

    p = with_config(sub.add_parser("train", help="train one strategy"), overrides=True)
    p.add_argument("--out", default=None, help="run directory (default: config output_dir)")
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("eval", help="score a checkpoint on a labeled directory"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None, help="labeled images (default: config data.eval)")
    p.add_argument("--out", default=None, help="metrics JSON path (default: stdout)")
    p.add_argument("--no-timing", action="store_true", help="skip the fps measurement")
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("compare", help="direct vs end-to-end vs joint over seeds"))
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", default=None, help="directory for runs and comparison.{json,txt}")
    p.set_defaults(func=cmd_compare)

    p = with_config(sub.add_parser("bench", help="fps and parameter count of a config's model"))
    p.add_argument("--images", type=int, default=20, help="timed single-image forwards")
    p.add_argument("--size", type=int, default=64, help="square input size")
    p.set_defaults(func=cmd_bench)

    p = with_config(sub.add_parser("render", help="draw detections onto images"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, help="PNG file or directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--conf", type=float, default=0.25, help="confidence threshold")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigurationError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
