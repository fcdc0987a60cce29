"""Direct, end-to-end and joint training, checkpoints, and strategy comparison."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .boxes import Box, Label
from .data import LabeledImage, load_dataset, pair_datasets, to_tensor
from .denoiser import Denoiser, pretrain_step
from .detector import Detector, GridTarget, HeadOutput, ModelConfig, assign_targets
from .errors import ConfigurationError, InputError
from .losses import LossBreakdown, LossWeights, denoise_loss, detection_loss
from .metrics import MetricsReport, count_parameters, evaluate_model

__all__ = [
    "STRATEGIES",
    "DataPaths",
    "ExperimentConfig",
    "Pipeline",
    "Checkpoint",
    "TrainingSet",
    "build_model",
    "param_hash",
    "train",
    "train_direct",
    "train_end_to_end",
    "train_joint",
    "evaluate_checkpoint",
    "ComparisonReport",
    "compare_strategies",
]

logger = logging.getLogger(__name__)

STRATEGIES = ("direct", "end_to_end", "joint")
LOG_FIELDS = ("cls", "loc", "obj", "l1", "l2", "joint")


@dataclass
class DataPaths:
    clean: str | None = None
    degraded: str | None = None
    eval: str | None = None


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one training run; round-trips through JSON."""

    strategy: str = "joint"
    seed: int = 0
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 0.05
    momentum: float = 0.9
    grad_clip: float | None = 10.0
    denoiser_learning_rate: float | None = None
    pretrain_epochs: int = 50
    flip: bool = True
    freeze_denoiser: bool = False
    warm_start: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataPaths = field(default_factory=DataPaths)
    output_dir: str = "runs/default"
    conf_threshold: float = 0.25
    nms_iou: float = 0.45

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.epochs < 0 or self.pretrain_epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ConfigurationError("learning_rate must be >= 0 and momentum in [0, 1)")

    @property
    def denoiser_lr(self) -> float:
        return self.learning_rate if self.denoiser_learning_rate is None else self.denoiser_learning_rate

    def require_data(self) -> None:
        need = {"direct": ("degraded",), "end_to_end": ("degraded", "clean"), "joint": ("degraded", "clean")}
        missing = [k for k in need[self.strategy] if not getattr(self.data, k)]
        if missing:
            raise ConfigurationError(f"strategy {self.strategy!r} requires data paths {missing}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"]["widths"] = list(d["model"]["widths"])
        d["model"]["anchors"] = [[list(a) for a in s] for s in d["model"]["anchors"]]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def sha256(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(copy.deepcopy(self), **changes)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        bad = _unknown_keys(data, cls)
        for key, sub in (("model", ModelConfig), ("loss", LossWeights), ("data", DataPaths)):
            if isinstance(data.get(key), Mapping):
                bad += [f"{key}.{k}" for k in _unknown_keys(data[key], sub)]
        if bad:
            raise ConfigurationError(f"unknown config keys: {', '.join(sorted(bad))}")
        kwargs = dict(data)
        try:
            if "model" in kwargs:
                kwargs["model"] = ModelConfig(**kwargs["model"])
            if "loss" in kwargs:
                kwargs["loss"] = LossWeights(**kwargs["loss"])
            if "data" in kwargs:
                kwargs["data"] = DataPaths(**kwargs["data"])
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(data, Mapping):
            raise ConfigurationError(f"{path}: top level must be an object")
        return cls.from_dict(data)


def _unknown_keys(data: Mapping, cls) -> list[str]:
    return [k for k in data if k not in {f.name for f in dataclasses.fields(cls)}]


class Pipeline(nn.Module):
    """Denoiser feeding the detector; used for end-to-end and joint inference."""

    def __init__(self, denoiser: Denoiser, detector: Detector):
        super().__init__()
        self.denoiser = denoiser
        self.detector = detector

    def forward(self, images: torch.Tensor) -> HeadOutput:
        return self.detector(self.denoiser(images))


def build_model(config: ExperimentConfig) -> tuple[Detector, Denoiser | None]:
    detector = Detector(config.model, seed=config.seed)
    denoiser = None
    if config.strategy != "direct":
        denoiser = Denoiser(config.model.in_channels, config.model.denoiser_width, seed=config.seed + 1)
    return detector, denoiser


def inference_model(detector: Detector, denoiser: Denoiser | None) -> nn.Module:
    return detector if denoiser is None else Pipeline(denoiser, detector)


def param_hash(module: nn.Module | None) -> str:
    h = hashlib.sha256()
    if module is not None:
        for name, t in module.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    config: ExperimentConfig
    detector: Detector
    denoiser: Denoiser | None = None
    optimizer_state: dict = field(default_factory=dict)
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    pretrain_history: list[dict] = field(default_factory=list)

    def model(self) -> nn.Module:
        return inference_model(self.detector, self.denoiser)

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        blob = {
            "detector": self.detector.state_dict(),
            "denoiser": None if self.denoiser is None else self.denoiser.state_dict(),
            "optimizer": self.optimizer_state,
        }
        torch.save(blob, directory / "checkpoint.pt")
        meta = {
            "epoch": self.epoch,
            "config_sha256": self.config.sha256(),
            "config": self.config.to_dict(),
            "history": self.history,
            "pretrain_history": self.pretrain_history,
            "detector_sha256": param_hash(self.detector),
            "denoiser_sha256": param_hash(self.denoiser) if self.denoiser is not None else None,
        }
        (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return directory

    @classmethod
    def load(cls, directory: str | Path, config: ExperimentConfig | None = None) -> "Checkpoint":
        directory = Path(directory)
        if not (directory / "checkpoint.pt").is_file():
            raise InputError(f"no checkpoint at {directory}")
        meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
        config = config or ExperimentConfig.from_dict(meta["config"])
        blob = torch.load(directory / "checkpoint.pt", weights_only=True)
        detector, denoiser = build_model(config)
        detector.load_state_dict(blob["detector"])
        if blob["denoiser"] is not None:
            denoiser = denoiser or Denoiser(config.model.in_channels, config.model.denoiser_width)
            denoiser.load_state_dict(blob["denoiser"])
        else:
            denoiser = None
        return cls(
            config=config,
            detector=detector,
            denoiser=denoiser,
            optimizer_state=blob["optimizer"],
            epoch=meta["epoch"],
            history=meta["history"],
            pretrain_history=meta.get("pretrain_history", []),
        )


def _flip_labels(labels: Sequence[Label]) -> list[Label]:
    return [Label(l.class_id, Box(1.0 - l.box.cx, l.box.cy, l.box.w, l.box.h)) for l in labels]


class TrainingSet:
    """In-memory image tensors plus precomputed targets for plain and mirrored views."""

    def __init__(
        self,
        inputs: Sequence[LabeledImage],
        config: ModelConfig,
        clean: Sequence[LabeledImage] | None = None,
    ):
        if not inputs:
            raise InputError("training set is empty")
        self.inputs = to_tensor([x.image for x in inputs])
        self.clean = None if clean is None else to_tensor([x.image for x in clean])
        self.labels = [x.labels for x in inputs]
        h, w = self.inputs.shape[-2:]
        grids = Detector.grid_sizes(h, w)

        def targets(labels_list):
            return GridTarget.stack(
                [assign_targets(l, config.anchor_set, grids, config.num_classes) for l in labels_list]
            )

        self.targets = targets(self.labels)
        self.flipped_targets = targets([_flip_labels(l) for l in self.labels])

    def __len__(self) -> int:
        return len(self.inputs)

    def batch(self, idx: torch.Tensor, flip: torch.Tensor):
        x = self.inputs[idx]
        c = None if self.clean is None else self.clean[idx]
        if bool(flip.any()):
            x = torch.where(flip[:, None, None, None], x.flip(-1), x)
            if c is not None:
                c = torch.where(flip[:, None, None, None], c.flip(-1), c)

        def pick(a, b):
            m = flip.view(-1, *([1] * (a.dim() - 1)))
            return torch.where(m, b[idx], a[idx])

        t, f = self.targets, self.flipped_targets
        target = GridTarget(
            obj=[pick(a, b) for a, b in zip(t.obj, f.obj)],
            noobj=[pick(a, b) for a, b in zip(t.noobj, f.noobj)],
            box=[pick(a, b) for a, b in zip(t.box, f.box)],
            cls=[pick(a, b) for a, b in zip(t.cls, f.cls)],
            num_classes=t.num_classes,
        )
        return x, c, target


def _sgd(params: Iterable[nn.Parameter], lr: float, momentum: float) -> torch.optim.SGD:
    return torch.optim.SGD(list(params), lr=lr, momentum=momentum)


def _batches(n: int, batch_size: int, flip: bool, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    flips = torch.rand(n, generator=gen) < 0.5 if flip else torch.zeros(n, dtype=torch.bool)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size], flips[start : start + batch_size]


class _Logger:
    def __init__(self, path: Path | None):
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("", encoding="utf-8")

    def write(self, record: dict) -> None:
        logger.info("%s", record)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8", newline="\n") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _step_breakdown(
    detector: Detector,
    denoiser: Denoiser | None,
    x: torch.Tensor,
    clean: torch.Tensor | None,
    target: GridTarget,
    weights: LossWeights,
) -> LossBreakdown:
    """Losses for one batch in float64; the denoiser term only when a denoiser is in the graph."""
    if denoiser is None:
        return detection_loss(detector(x).to(torch.float64), target, weights)
    restored = denoiser(x)
    b = detection_loss(detector(restored).to(torch.float64), target, weights)
    b.l2 = denoise_loss(restored.to(torch.float64), clean.to(torch.float64))
    b.joint = weights.alpha * b.l1 + weights.beta * b.l2
    return b


def _fit_detector(
    config: ExperimentConfig,
    data: TrainingSet,
    detector: Detector,
    denoiser: Denoiser | None,
    log: _Logger,
    train_denoiser: bool,
) -> tuple[list[dict], dict]:
    """Shared epoch loop.  With ``denoiser`` given, inputs pass through it and the joint loss is minimized."""
    gen = torch.Generator().manual_seed(config.seed)
    groups = [{"params": list(detector.parameters()), "lr": config.learning_rate}]
    if denoiser is not None and train_denoiser:
        groups.append({"params": list(denoiser.parameters()), "lr": config.denoiser_lr})
    opt = torch.optim.SGD(groups, lr=config.learning_rate, momentum=config.momentum)
    weights = config.loss
    history = []
    for epoch in range(config.epochs):
        detector.train()
        sums = dict.fromkeys(LOG_FIELDS, 0.0)
        for idx, flip in _batches(len(data), config.batch_size, config.flip, gen):
            x, clean, target = data.batch(idx, flip)
            b = _step_breakdown(detector, denoiser, x, clean, target, weights)
            opt.zero_grad()
            (b.l1 if denoiser is None else b.joint).backward()
            if config.grad_clip:
                nn.utils.clip_grad_norm_([p for g in groups for p in g["params"]], config.grad_clip)
            opt.step()
            for k, v in b.as_dict().items():
                sums[k] += v * len(idx)
        record = {"epoch": epoch, **{k: v / len(data) for k, v in sums.items()}}
        history.append(record)
        log.write(record)
    return history, opt.state_dict()


def _load_training(config: ExperimentConfig):
    config.require_data()
    degraded = load_dataset(config.data.degraded)
    clean = load_dataset(config.data.clean) if config.data.clean else None
    return degraded, clean


def _output_paths(config: ExperimentConfig, output_dir: str | Path | None):
    out = Path(output_dir) if output_dir is not None else None
    return out, _Logger(out / "log.jsonl" if out is not None else None)


def train_direct(config: ExperimentConfig, output_dir: str | Path | None = None, data=None) -> Checkpoint:
    """Detector alone, trained on degraded images with the detection loss."""
    if config.strategy != "direct":
        config = config.replace(strategy="direct")
    degraded = data if data is not None else _load_training(config)[0]
    out, log = _output_paths(config, output_dir)
    detector, _ = build_model(config)
    ts = TrainingSet(degraded, config.model)
    history, opt_state = _fit_detector(config, ts, detector, None, log, train_denoiser=False)
    ckpt = Checkpoint(config, detector, None, opt_state, config.epochs, history)
    if out is not None:
        ckpt.save(out)
    return ckpt


def _pretrain_denoiser(config, denoiser, pairs: TrainingSet, log: _Logger) -> list[dict]:
    gen = torch.Generator().manual_seed(config.seed + 7)
    opt = _sgd(denoiser.parameters(), config.denoiser_lr, config.momentum)
    history = []
    for epoch in range(config.pretrain_epochs):
        denoiser.train()
        total = 0.0
        for idx, flip in _batches(len(pairs), config.batch_size, config.flip, gen):
            x, clean, _ = pairs.batch(idx, flip)
            total += pretrain_step(x, clean, denoiser, opt) * len(idx)
        record = {"phase": "pretrain", "epoch": epoch, "l2": total / len(pairs)}
        history.append(record)
        log.write(record)
    return history


def _load_warm_start(config: ExperimentConfig, denoiser: Denoiser) -> None:
    if config.warm_start:
        blob = torch.load(Path(config.warm_start) / "checkpoint.pt", weights_only=True)
        if blob.get("denoiser") is None:
            raise ConfigurationError(f"warm_start checkpoint {config.warm_start} has no denoiser")
        denoiser.load_state_dict(blob["denoiser"])


def train_end_to_end(config: ExperimentConfig, output_dir: str | Path | None = None, data=None) -> Checkpoint:
    """Pretrain the denoiser on (degraded, clean) pairs, then train the detector on clean images.

    The denoiser is frozen during the second phase; inference chains
    denoiser -> detector.
    """
    if config.strategy != "end_to_end":
        config = config.replace(strategy="end_to_end")
    degraded, clean = data if data is not None else _load_training(config)
    if clean is None:
        raise ConfigurationError("end-to-end training needs clean counterparts")
    pairs = pair_datasets(degraded, clean)
    out, log = _output_paths(config, output_dir)
    detector, denoiser = build_model(config)
    _load_warm_start(config, denoiser)
    pre = _pretrain_denoiser(config, denoiser, TrainingSet([d for d, _ in pairs], config.model, [c for _, c in pairs]), log)

    denoiser.requires_grad_(False)
    denoiser.eval()
    frozen = param_hash(denoiser)
    ts = TrainingSet([c for _, c in pairs], config.model)
    history, opt_state = _fit_detector(config, ts, detector, None, log, train_denoiser=False)
    if param_hash(denoiser) != frozen:
        raise RuntimeError("denoiser parameters changed while frozen")
    denoiser.requires_grad_(True)
    ckpt = Checkpoint(config, detector, denoiser, opt_state, config.epochs, history, pre)
    if out is not None:
        ckpt.save(out)
    return ckpt


def train_joint(config: ExperimentConfig, output_dir: str | Path | None = None, data=None) -> Checkpoint:
    """Denoiser and detector optimized together on ``alpha * l1 + beta * l2``.

    The detector consumes the denoiser's output, so detection gradients also
    reach the denoiser (unless ``freeze_denoiser`` is set).
    """
    if config.strategy != "joint":
        config = config.replace(strategy="joint")
    degraded, clean = data if data is not None else _load_training(config)
    if clean is None:
        raise ConfigurationError("joint training needs clean counterparts")
    pairs = pair_datasets(degraded, clean)
    out, log = _output_paths(config, output_dir)
    detector, denoiser = build_model(config)
    _load_warm_start(config, denoiser)
    if config.freeze_denoiser:
        denoiser.requires_grad_(False)
    ts = TrainingSet([d for d, _ in pairs], config.model, [c for _, c in pairs])
    history, opt_state = _fit_detector(config, ts, detector, denoiser, log, train_denoiser=not config.freeze_denoiser)
    denoiser.requires_grad_(True)
    ckpt = Checkpoint(config, detector, denoiser, opt_state, config.epochs, history)
    if out is not None:
        ckpt.save(out)
    return ckpt


_TRAINERS = {"direct": train_direct, "end_to_end": train_end_to_end, "joint": train_joint}


def train(config: ExperimentConfig, output_dir: str | Path | None = None, data=None) -> Checkpoint:
    """Dispatch on ``config.strategy``."""
    torch.set_num_threads(1)
    return _TRAINERS[config.strategy](config, output_dir, data)


def evaluate_checkpoint(ckpt: Checkpoint, dataset: Sequence[LabeledImage], timed: bool = True) -> MetricsReport:
    images = to_tensor([x.image for x in dataset])
    return evaluate_model(
        ckpt.model(),
        images,
        [x.labels for x in dataset],
        conf_threshold=ckpt.config.conf_threshold,
        nms_iou=ckpt.config.nms_iou,
        timed=timed,
    )


@dataclass
class ComparisonReport:
    rows: list[dict]
    means: dict[str, dict[str, float]]

    METRICS = ("precision", "recall", "map50", "map75")

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "means": self.means}, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ComparisonReport":
        d = json.loads(text)
        return cls(d["rows"], d["means"])

    def render(self) -> str:
        header = f"{'strategy':<12}{'seed':>6}" + "".join(f"{m:>11}" for m in self.METRICS)
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(f"{r['strategy']:<12}{r['seed']:>6}" + "".join(f"{r[m]:>11.4f}" for m in self.METRICS))
        lines.append("-" * len(header))
        for s, m in self.means.items():
            lines.append(f"{s:<12}{'mean':>6}" + "".join(f"{m[k]:>11.4f}" for k in self.METRICS))
        return "\n".join(lines) + "\n"


def compare_strategies(
    base: ExperimentConfig,
    seeds: Sequence[int],
    eval_data: Sequence[LabeledImage] | None = None,
    train_data: tuple | None = None,
    output_dir: str | Path | None = None,
    strategies: Sequence[str] = STRATEGIES,
) -> ComparisonReport:
    """Train every strategy for every seed on one corpus and score each on the held-out degraded split."""
    if eval_data is None:
        if not base.data.eval:
            raise ConfigurationError("comparison needs an eval split (data.eval)")
        eval_data = load_dataset(base.data.eval)
    if train_data is None:
        base.replace(strategy="joint").require_data()
        train_data = _load_training(base.replace(strategy="joint"))
    degraded, clean = train_data
    rows = []
    for strategy in strategies:
        for seed in seeds:
            cfg = base.replace(strategy=strategy, seed=int(seed))
            data = degraded if strategy == "direct" else (degraded, clean)
            run_dir = None if output_dir is None else Path(output_dir) / f"{strategy}_seed{seed}"
            ckpt = train(cfg, run_dir, data)
            report = evaluate_checkpoint(ckpt, eval_data, timed=False)
            rows.append({"strategy": strategy, "seed": int(seed), **{m: getattr(report, m) for m in ComparisonReport.METRICS}})
            logger.info("%s seed %s: %s", strategy, seed, rows[-1])
    means = {
        s: {m: float(np.mean([r[m] for r in rows if r["strategy"] == s])) for m in ComparisonReport.METRICS}
        for s in strategies
    }
    report = ComparisonReport(rows, means)
    if output_dir is not None:
        Path(output_dir).mkdir(parents=True, exist_ok=True)
        (Path(output_dir) / "comparison.json").write_text(report.to_json(), encoding="utf-8")
        (Path(output_dir) / "comparison.txt").write_text(report.render(), encoding="utf-8")
    return report
