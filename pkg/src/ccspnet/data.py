"""Image/label IO, in-memory datasets and the synthetic sign-shape corpus."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw
from scipy import ndimage

from .boxes import Box, Label, format_labels, read_labels
from .errors import InputError

__all__ = [
    "CLASS_NAMES",
    "LabeledImage",
    "load_image",
    "save_image",
    "load_dataset",
    "pair_datasets",
    "to_tensor",
    "synth_image",
    "generate_shapes_corpus",
]

CLASS_NAMES = ("prohibitory", "warning", "mandatory")

# base RGB per class; circle, triangle, octagon respectively
_CLASS_COLORS = np.array([[0.85, 0.12, 0.12], [0.95, 0.80, 0.10], [0.12, 0.30, 0.85]])


@dataclass
class LabeledImage:
    name: str
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    labels: list[Label]


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_image(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB" if arr.ndim == 3 else "L").save(path, format="PNG")


def load_dataset(root: str | Path, require_labels: bool = True) -> list[LabeledImage]:
    """Every ``*.png`` under ``root`` with its sibling ``.txt`` labels, sorted by path."""
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"dataset directory {root} does not exist")
    items = []
    for path in sorted(root.rglob("*.png")):
        label_path = path.with_suffix(".txt")
        if label_path.is_file():
            labels = read_labels(label_path.read_text(encoding="utf-8"))
        elif require_labels:
            raise InputError(f"missing label file for {path}")
        else:
            labels = []
        items.append(LabeledImage(path.relative_to(root).as_posix(), load_image(path), labels))
    if not items:
        raise InputError(f"no images found under {root}")
    return items


def pair_datasets(degraded: list[LabeledImage], clean: list[LabeledImage]) -> list[tuple[LabeledImage, LabeledImage]]:
    """Match degraded images to clean counterparts by relative path."""
    by_name = {c.name: c for c in clean}
    missing = [d.name for d in degraded if d.name not in by_name]
    if missing:
        raise InputError(f"{len(missing)} degraded images lack clean counterparts, e.g. {missing[:3]}")
    return [(d, by_name[d.name]) for d in degraded]


def to_tensor(images: list[np.ndarray], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack(images).transpose(0, 3, 1, 2).copy()).to(dtype)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.25, 0.65, size=3)
    coarse = rng.uniform(-0.15, 0.15, size=(4, 4, 3))
    low = ndimage.zoom(coarse, (size / 4, size / 4, 1), order=1)
    fine = rng.normal(0.0, 0.03, size=(size, size, 3))
    return np.clip(base + low + fine, 0.0, 1.0)


def _shape_mask(cls: int, size: int, x0: int, y0: int, d: int) -> np.ndarray:
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    x1, y1 = x0 + d - 1, y0 + d - 1
    if cls == 0:
        draw.ellipse([x0, y0, x1, y1], fill=255)
    elif cls == 1:
        draw.polygon([((x0 + x1) / 2, y0), (x1, y1), (x0, y1)], fill=255)
    else:
        cx, cy, r = (x0 + x1) / 2, (y0 + y1) / 2, (d - 1) / 2
        r = r / math.cos(math.pi / 8)
        pts = [(cx + r * math.cos(math.pi / 8 + k * math.pi / 4), cy + r * math.sin(math.pi / 8 + k * math.pi / 4)) for k in range(8)]
        pts = [(min(max(px, x0), x1), min(max(py, y0), y1)) for px, py in pts]
        draw.polygon(pts, fill=255)
    return np.asarray(canvas) > 0


def synth_image(
    rng: np.random.Generator, size: int = 64, min_objects: int = 1, max_objects: int = 3, min_px: int = 12, max_px: int = 24
) -> tuple[np.ndarray, list[Label]]:
    """Textured background with 1-3 non-overlapping circles, triangles or octagons."""
    image = _background(rng, size)
    labels: list[Label] = []
    taken: list[tuple[int, int, int, int]] = []
    want = int(rng.integers(min_objects, max_objects + 1))
    for _ in range(50 * want):
        if len(labels) == want:
            break
        d = int(rng.integers(min_px, max_px + 1))
        x0 = int(rng.integers(0, size - d + 1))
        y0 = int(rng.integers(0, size - d + 1))
        rect = (x0 - 1, y0 - 1, x0 + d + 1, y0 + d + 1)
        if any(rect[0] < t[2] and t[0] < rect[2] and rect[1] < t[3] and t[1] < rect[3] for t in taken):
            continue
        cls = int(rng.integers(0, 3))
        mask = _shape_mask(cls, size, x0, y0, d)
        color = np.clip(_CLASS_COLORS[cls] + rng.uniform(-0.08, 0.08, 3), 0, 1)
        image[mask] = color
        ys, xs = np.nonzero(mask)
        box = Box.from_xyxy(xs.min() / size, ys.min() / size, (xs.max() + 1) / size, (ys.max() + 1) / size)
        labels.append(Label(cls, box))
        taken.append(rect)
    return image, labels


def generate_shapes_corpus(out_dir: str | Path, count: int, seed: int, size: int = 64, prefix: str = "img") -> list[Path]:
    """Write ``count`` synthetic images and label files to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        image, labels = synth_image(rng, size)
        path = out_dir / f"{prefix}_{i:05d}.png"
        save_image(path, image)
        path.with_suffix(".txt").write_text(format_labels(labels), encoding="utf-8", newline="\n")
        paths.append(path)
    return paths


def _main(argv: list[str] | None = None) -> None:
    import argparse

    parser = argparse.ArgumentParser(prog="python -m ccspnet.data", description="write a synthetic clean shape corpus")
    parser.add_argument("--out", required=True)
    parser.add_argument("--count", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--prefix", default="img")
    args = parser.parse_args(argv)
    paths = generate_shapes_corpus(args.out, args.count, args.seed, args.size, args.prefix)
    print(f"{len(paths)} images written to {args.out}")


if __name__ == "__main__":
    _main()
