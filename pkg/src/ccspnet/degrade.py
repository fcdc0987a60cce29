"""Synthetic extreme-condition corruptions: fog, rain and motion blur.

Images are float arrays shaped ``(H, W, C)`` (or ``(H, W)``) with values in
``[0, 1]``.  All randomness flows from explicit integer seeds so a given
``(image, spec)`` pair always yields the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import ndimage

from .data import load_image, save_image
from .errors import ConfigurationError, InputError

__all__ = [
    "KINDS",
    "DegradationSpec",
    "ParamRanges",
    "CorpusManifest",
    "apply_fog",
    "apply_motion_blur",
    "apply_rain",
    "apply_degradation",
    "depth_proxy",
    "line_kernel",
    "derive_seed",
    "sample_spec",
    "generate_corpus",
    "load_manifest",
    "parse_mix",
]

logger = logging.getLogger(__name__)

KINDS = ("fog", "rain", "motion_blur")
_ALIASES = {"blur": "motion_blur", "haze": "fog"}


def derive_seed(global_seed: int, key: str) -> int:
    """Stable 64-bit seed from a global seed and a string key."""
    digest = hashlib.sha256(f"{int(global_seed)}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim not in (2, 3):
        raise InputError(f"expected (H, W) or (H, W, C) image, got shape {image.shape}")
    return image


def depth_proxy(height: int, width: int, seed: int) -> np.ndarray:
    """Depth falling from 1 at the top row to 0.2 at the bottom, plus smooth noise of amplitude 0.1."""
    vertical = np.linspace(1.0, 0.2, height)[:, None] * np.ones((1, width))
    coarse = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(5, 5))
    ys = np.linspace(0, 4, height)
    xs = np.linspace(0, 4, width)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    noise = ndimage.map_coordinates(coarse, [yy, xx], order=1)
    return vertical + 0.1 * noise


def apply_fog(image: np.ndarray, beta: float, airlight: float, seed: int = 0) -> np.ndarray:
    """Atmospheric scattering ``I = J t + A (1 - t)`` with ``t = exp(-beta d)``."""
    image = _check_image(image)
    if not beta >= 0:
        raise InputError(f"beta must be >= 0, got {beta}")
    if not 0 <= airlight <= 1:
        raise InputError(f"airlight must lie in [0, 1], got {airlight}")
    t = np.exp(-beta * depth_proxy(image.shape[0], image.shape[1], seed))
    if image.ndim == 3:
        t = t[..., None]
    return np.clip(image * t + airlight * (1 - t), 0.0, 1.0)


def line_kernel(length: int, angle: float) -> np.ndarray:
    """Normalized one-pixel-wide line of ``length`` taps at ``angle`` degrees (counterclockwise from +x)."""
    if int(length) != length or length < 1:
        raise InputError(f"blur length must be an integer >= 1, got {length}")
    length = int(length)
    size = length if length % 2 else length + 1
    c = size // 2
    kernel = np.zeros((size, size))
    theta = math.radians(angle)
    for i in range(length):
        t = i - (length - 1) / 2
        x = int(np.rint(c + t * math.cos(theta)))
        y = int(np.rint(c - t * math.sin(theta)))
        kernel[min(max(y, 0), size - 1), min(max(x, 0), size - 1)] += 1.0
    return kernel / kernel.sum()


def apply_motion_blur(image: np.ndarray, length: int, angle: float = 0.0) -> np.ndarray:
    """Convolve with :func:`line_kernel`, reflect-padded at the borders."""
    image = _check_image(image)
    kernel = line_kernel(length, angle)
    if kernel.shape == (1, 1):
        return image.copy()
    if image.ndim == 3:
        kernel = kernel[:, :, None]
    return ndimage.convolve(image, kernel, mode="reflect")


def _streak_layer(height: int, width: int, count: int, length: float, angle: float, brightness: float, seed: int):
    rng = np.random.default_rng(seed)
    layer = np.zeros(height * width)
    if count == 0:
        return layer.reshape(height, width)
    x0 = rng.uniform(0, width, count)
    y0 = rng.uniform(0, height, count)
    theta = np.radians(angle + rng.uniform(-10.0, 10.0, count))
    t = np.linspace(0.0, length, max(2, int(math.ceil(2 * length)) + 1))
    xs = np.rint(x0[:, None] + t[None, :] * np.cos(theta)[:, None]).astype(np.int64)
    ys = np.rint(y0[:, None] - t[None, :] * np.sin(theta)[:, None]).astype(np.int64)
    inside = (xs >= 0) & (xs < width) & (ys >= 0) & (ys < height)
    streak_id = np.broadcast_to(np.arange(count)[:, None], xs.shape)
    # each streak lights a pixel at most once
    keys = np.unique(streak_id[inside] * (height * width) + ys[inside] * width + xs[inside])
    np.add.at(layer, keys % (height * width), brightness)
    return layer.reshape(height, width)


def apply_rain(image: np.ndarray, spec: "DegradationSpec | Mapping", seed: int | None = None) -> np.ndarray:
    """Additive bright streaks, softened by a length-3 blur along the rain direction."""
    image = _check_image(image)
    params = spec.params if isinstance(spec, DegradationSpec) else dict(spec)
    if seed is None:
        seed = spec.seed if isinstance(spec, DegradationSpec) else 0
    _validate("rain", params)
    h, w = image.shape[:2]
    layer = _streak_layer(
        h, w, int(params["streak_count"]), float(params["length"]), float(params["angle"]),
        float(params["brightness"]), seed,
    )
    layer = apply_motion_blur(layer, 3, float(params["angle"]))
    if image.ndim == 3:
        layer = layer[..., None]
    return np.clip(image + layer, 0.0, 1.0)


_REQUIRED = {
    "fog": ("beta", "airlight"),
    "rain": ("streak_count", "length", "angle", "brightness"),
    "motion_blur": ("length", "angle"),
}


def _validate(kind: str, params: Mapping) -> None:
    if kind not in _REQUIRED:
        raise InputError(f"unknown degradation kind {kind!r}")
    missing = [k for k in _REQUIRED[kind] if k not in params]
    if missing:
        raise InputError(f"{kind} spec missing {missing}")
    if kind == "fog":
        if params["beta"] < 0 or not 0 <= params["airlight"] <= 1:
            raise InputError(f"invalid fog params {dict(params)}")
    elif kind == "rain":
        if params["streak_count"] < 0 or params["length"] < 0 or not 0 <= params["brightness"] <= 1:
            raise InputError(f"invalid rain params {dict(params)}")
    elif params["length"] < 1:
        raise InputError(f"invalid blur params {dict(params)}")


@dataclass(frozen=True)
class DegradationSpec:
    """One synthetic condition: ``kind`` selects which keys of ``params`` are read."""

    kind: str
    params: dict
    seed: int = 0

    def __post_init__(self):
        _validate(self.kind, self.params)

    def to_json(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "seed": self.seed}


def apply_degradation(image: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    p = spec.params
    if spec.kind == "fog":
        return apply_fog(image, p["beta"], p["airlight"], spec.seed)
    if spec.kind == "rain":
        return apply_rain(image, spec, spec.seed)
    return apply_motion_blur(image, int(p["length"]), p["angle"])


@dataclass(frozen=True)
class ParamRanges:
    """Severity ranges quoted for a ``reference_width``-wide image.

    Streak counts and pixel lengths scale linearly with the actual width;
    blur lengths never drop below 3..5 px so small images still blur.
    """

    fog_beta: tuple[float, float] = (0.5, 2.0)
    airlight: tuple[float, float] = (0.7, 1.0)
    blur_length: tuple[int, int] = (5, 15)
    blur_angle: tuple[float, float] = (0.0, 180.0)
    streak_count: tuple[int, int] = (100, 300)
    rain_length: tuple[float, float] = (40.0, 80.0)
    rain_angle: tuple[float, float] = (60.0, 120.0)
    rain_brightness: tuple[float, float] = (0.3, 0.6)
    reference_width: int = 640

    @classmethod
    def from_json(cls, data: Mapping) -> "ParamRanges":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown param range keys: {sorted(unknown)}")
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in data.items()})


def sample_spec(kind: str, ranges: ParamRanges, width: int, rng: np.random.Generator, seed: int) -> DegradationSpec:
    s = width / ranges.reference_width
    if kind == "fog":
        params = {"beta": rng.uniform(*ranges.fog_beta), "airlight": rng.uniform(*ranges.airlight)}
    elif kind == "rain":
        lo, hi = ranges.streak_count
        params = {
            "streak_count": int(rng.integers(round(lo * s), round(hi * s) + 1)),
            "length": rng.uniform(*ranges.rain_length) * s,
            "angle": rng.uniform(*ranges.rain_angle),
            "brightness": rng.uniform(*ranges.rain_brightness),
        }
    elif kind == "motion_blur":
        lo, hi = ranges.blur_length
        lo, hi = max(3, round(lo * s)), max(5, round(hi * s))
        params = {"length": int(rng.integers(lo, hi + 1)), "angle": rng.uniform(*ranges.blur_angle)}
    else:
        raise InputError(f"unknown degradation kind {kind!r}")
    return DegradationSpec(kind, params, seed)


def parse_mix(text: str) -> dict[str, float]:
    """Parse ``fog=0.34,rain=0.33,blur=0.33`` into normalized-kind proportions."""
    mix: dict[str, float] = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in part:
            raise ConfigurationError(f"bad mix entry {part!r}; expected kind=weight")
        k, v = part.split("=", 1)
        k = _ALIASES.get(k.strip(), k.strip())
        if k not in KINDS:
            raise ConfigurationError(f"unknown condition {k!r}")
        mix[k] = mix.get(k, 0.0) + float(v)
    return _check_proportions(mix)


def _check_proportions(props: Mapping[str, float]) -> dict[str, float]:
    props = {_ALIASES.get(k, k): float(v) for k, v in props.items()}
    unknown = set(props) - set(KINDS)
    if unknown:
        raise ConfigurationError(f"unknown conditions {sorted(unknown)}")
    if any(v < 0 for v in props.values()) or abs(sum(props.values()) - 1.0) > 1e-6:
        raise ConfigurationError(f"proportions must be nonnegative and sum to 1, got {props}")
    return {k: props[k] for k in KINDS if k in props}


@dataclass
class CorpusManifest:
    global_seed: int
    proportions: dict[str, float]
    entries: list[dict] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)

    def counts(self) -> dict[str, int]:
        out = {k: 0 for k in self.proportions}
        for e in self.entries:
            out[e["kind"]] = out.get(e["kind"], 0) + 1
        return out

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def verify(self, root: Path) -> list[str]:
        """Return the images whose on-disk hash no longer matches."""
        return [e["image"] for e in self.entries if _sha256(Path(root) / e["image"]) != e["sha256"]]


def load_manifest(path: str | Path) -> CorpusManifest:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return CorpusManifest(
        global_seed=data["global_seed"],
        proportions=data["proportions"],
        entries=data["entries"],
        errors=data.get("errors", []),
    )


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def generate_corpus(
    clean_dir: str | Path,
    out_dir: str | Path,
    proportions: Mapping[str, float],
    param_ranges: ParamRanges | None = None,
    global_seed: int = 0,
) -> CorpusManifest:
    """Degrade every ``*.png`` under ``clean_dir`` that has a sibling ``.txt`` label file.

    The condition and its parameters for each image depend only on
    ``(global_seed, relative path)``.  Labels are copied byte for byte.
    Writes ``out_dir/manifest.json`` and returns the manifest.
    """
    clean_dir, out_dir = Path(clean_dir), Path(out_dir)
    if not clean_dir.is_dir():
        raise InputError(f"input directory {clean_dir} does not exist")
    props = _check_proportions(proportions)
    ranges = param_ranges or ParamRanges()
    kinds = list(props)
    cdf = np.cumsum([props[k] for k in kinds])
    manifest = CorpusManifest(global_seed=int(global_seed), proportions=props)

    for path in sorted(clean_dir.rglob("*.png")):
        rel = path.relative_to(clean_dir)
        label_path = path.with_suffix(".txt")
        if not label_path.is_file():
            manifest.errors.append({"image": rel.as_posix(), "error": "missing label file"})
            continue
        try:
            image = load_image(path)
        except (OSError, ValueError) as exc:
            manifest.errors.append({"image": rel.as_posix(), "error": f"unreadable image: {exc}"})
            continue
        rng = np.random.default_rng(derive_seed(global_seed, rel.as_posix()))
        kind = kinds[min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(kinds) - 1)]
        spec = sample_spec(kind, ranges, image.shape[1], rng, derive_seed(global_seed, rel.as_posix() + "#apply"))
        degraded = apply_degradation(image, spec)

        out_image = out_dir / rel
        out_label = out_image.with_suffix(".txt")
        out_image.parent.mkdir(parents=True, exist_ok=True)
        save_image(out_image, degraded)
        shutil.copyfile(label_path, out_label)
        manifest.entries.append(
            {
                "image": rel.as_posix(),
                "label": out_label.relative_to(out_dir).as_posix(),
                "kind": kind,
                "params": {**spec.params, "seed": spec.seed},
                "sha256": _sha256(out_image),
            }
        )
    for err in manifest.errors:
        logger.warning("skipped %s: %s", err["image"], err["error"])

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(manifest.to_json(), encoding="utf-8", newline="\n")
    return manifest
