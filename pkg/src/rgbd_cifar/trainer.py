"""Seeded momentum-SGD training loop, augmentation and evaluation."""
from __future__ import annotations

import csv
import json
import logging
import platform
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .cifar_io import CHANNELS, SIDE, load_rgbd_arrays, parse_channels, records_to_arrays
from .errors import DivergenceError
from .models import make_model

log = logging.getLogger(__name__)

PAD = 4
AUGMENTATIONS = ("none", "crop_flip")


@dataclass
class TrainConfig:
    channels: tuple[str, ...] = ("R", "G", "B")
    lr_schedule: tuple[tuple[int, float], ...] = ((0, 0.01),)
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 128
    total_steps: int = 1000
    eval_every: int = 100
    augmentation: str = "none"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.channels = parse_channels(self.channels)
        self.lr_schedule = tuple((int(s), float(r)) for s, r in self.lr_schedule)
        steps = [s for s, _ in self.lr_schedule]
        if not steps or steps[0] != 0:
            raise ValueError("learning-rate schedule must start at step 0")
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("learning-rate schedule steps must be strictly increasing")
        if self.batch_size < 1 or self.total_steps < 1 or self.eval_every < 1:
            raise ValueError("batch_size, total_steps and eval_every must be positive")
        if self.eval_every > self.total_steps:
            raise ValueError("eval_every cannot exceed total_steps")
        if self.augmentation not in AUGMENTATIONS:
            raise ValueError(f"augmentation must be one of {AUGMENTATIONS}")

    def lr_at(self, step: int) -> float:
        rate = self.lr_schedule[0][1]
        for s, r in self.lr_schedule:
            if s > step:
                break
            rate = r
        return rate

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = "".join(self.channels)
        d["lr_schedule"] = [list(e) for e in self.lr_schedule]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def resnet_recipe(channels, total_steps: int = 64_000, seed: int = 0, eval_every: int | None = None) -> TrainConfig:
    """Standard CIFAR ResNet schedule: lr 0.1, /10 at 50% and 75% of training."""
    return TrainConfig(
        channels=channels,
        lr_schedule=((0, 0.1), (total_steps // 2, 0.01), (total_steps * 3 // 4, 0.001)),
        momentum=0.9,
        weight_decay=1e-4,
        batch_size=128,
        total_steps=total_steps,
        eval_every=eval_every or max(1, total_steps // 32),
        augmentation="crop_flip",
        seed=seed,
    )


def mlp_recipe(channels, total_steps: int = 20_000, seed: int = 0, eval_every: int | None = None) -> TrainConfig:
    return TrainConfig(
        channels=channels,
        lr_schedule=((0, 0.01),),
        momentum=0.9,
        batch_size=128,
        total_steps=total_steps,
        eval_every=eval_every or max(1, total_steps // 40),
        seed=seed,
    )


@dataclass(eq=False)
class ImageSet:
    """Labelled images as planar uint8 ``(N, C, 32, 32)`` with channel names."""

    pixels: np.ndarray
    labels: np.ndarray
    channels: tuple[str, ...] = CHANNELS
    checksum: str = ""
    provider_id: str = ""

    def __post_init__(self):
        self.channels = parse_channels(self.channels)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.pixels.ndim != 4 or self.pixels.shape[1:] != (len(self.channels), SIDE, SIDE):
            raise ValueError(f"pixels shape {self.pixels.shape} does not match channels {self.channels}")
        if len(self.labels) != len(self.pixels):
            raise ValueError("pixels and labels differ in length")

    def __len__(self):
        return len(self.labels)

    def select(self, channels) -> "ImageSet":
        names = parse_channels(channels)
        missing = [c for c in names if c not in self.channels]
        if missing:
            raise ValueError(f"dataset has channels {self.channels}, missing {missing}")
        idx = [self.channels.index(c) for c in names]
        return replace(self, pixels=self.pixels[:, idx], channels=names)

    def subset(self, indices) -> "ImageSet":
        indices = np.asarray(indices)
        return replace(self, pixels=self.pixels[indices], labels=self.labels[indices])

    @classmethod
    def from_records(cls, records, checksum: str = "", provider_id: str = "") -> "ImageSet":
        labels, pixels, _ = records_to_arrays(records)
        return cls(pixels, labels, CHANNELS, checksum, provider_id)

    @classmethod
    def from_file(cls, path) -> "ImageSet":
        labels, pixels, _, manifest = load_rgbd_arrays(path)
        return cls(pixels, labels, CHANNELS, manifest.checksum, manifest.depth_provider_id)


def split_validation(dataset: ImageSet, val_size: int = 5000, seed: int = 0) -> tuple[ImageSet, ImageSet]:
    """Seeded hold-out split ``(train, validation)``."""
    if not 0 < val_size < len(dataset):
        raise ValueError(f"val_size {val_size} must lie strictly between 0 and {len(dataset)}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    return dataset.subset(np.sort(order[val_size:])), dataset.subset(np.sort(order[:val_size]))


# --------------------------------------------------------------------------
# normalisation


@dataclass
class NormalizationStats:
    channels: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    warnings: list[str] = field(default_factory=list)

    def apply(self, pixels: np.ndarray, dtype=np.float32) -> np.ndarray:
        x = pixels.astype(dtype)
        return (x - self.mean.astype(dtype)[None, :, None, None]) / self.std.astype(dtype)[None, :, None, None]

    def to_dict(self) -> dict:
        return {
            "channels": "".join(self.channels),
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "warnings": list(self.warnings),
        }


def compute_normalization(dataset: ImageSet, channels) -> NormalizationStats:
    """Per-channel mean/std over ``dataset``; a constant channel gets std 1."""
    if len(dataset) == 0:
        raise ValueError("cannot compute normalization on an empty dataset")
    sel = dataset.select(channels)
    k = len(sel.channels)
    count = len(sel) * SIDE * SIDE
    # two passes, chunked over images to bound memory on the full dataset
    total = np.zeros(k)
    for start in range(0, len(sel), 4096):
        total += sel.pixels[start : start + 4096].sum(axis=(0, 2, 3), dtype=np.float64)
    mean = total / count
    sq = np.zeros(k)
    for start in range(0, len(sel), 4096):
        d = sel.pixels[start : start + 4096].astype(np.float64) - mean[None, :, None, None]
        sq += (d * d).sum(axis=(0, 2, 3))
    std = np.sqrt(sq / count)
    notes = []
    for i, c in enumerate(sel.channels):
        if std[i] == 0:
            msg = f"channel {c} is constant ({mean[i]:g}); using std 1"
            log.warning(msg)
            notes.append(msg)
            std[i] = 1.0
    return NormalizationStats(sel.channels, mean, std, notes)


# --------------------------------------------------------------------------
# augmentation


def crop_flip(image: np.ndarray, top: int, left: int, flip: bool) -> np.ndarray:
    """Zero-pad by 4, crop 32x32 at ``(top, left)``, optionally mirror. Same transform on every plane."""
    if not (0 <= top <= 2 * PAD and 0 <= left <= 2 * PAD):
        raise ValueError(f"crop offset ({top}, {left}) out of range [0, {2 * PAD}]")
    padded = np.pad(image, ((0, 0), (PAD, PAD), (PAD, PAD)))
    out = padded[:, top : top + SIDE, left : left + SIDE]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def draw_transform(rng: np.random.Generator) -> tuple[int, int, bool]:
    top, left = rng.integers(0, 2 * PAD + 1, size=2)
    return int(top), int(left), bool(rng.integers(0, 2))


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return crop_flip(image, *draw_transform(rng))


def augment_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(images)
    tops = rng.integers(0, 2 * PAD + 1, size=n)
    lefts = rng.integers(0, 2 * PAD + 1, size=n)
    flips = rng.integers(0, 2, size=n).astype(bool)
    padded = np.pad(images, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)))
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, tops[i] : tops[i] + SIDE, lefts[i] : lefts[i] + SIDE]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


# --------------------------------------------------------------------------
# history


@dataclass
class HistoryEntry:
    step: int
    train_loss: float
    val_accuracy: float


@dataclass
class TrainingHistory:
    entries: list[HistoryEntry] = field(default_factory=list)
    final_test_error: float | None = None

    @property
    def final_val_accuracy(self) -> float:
        return self.entries[-1].val_accuracy

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "train_loss", "val_accuracy"])
            for e in self.entries:
                w.writerow([e.step, repr(e.train_loss), repr(e.val_accuracy)])

    @classmethod
    def from_csv(cls, path, final_test_error=None) -> "TrainingHistory":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            [HistoryEntry(int(r["step"]), float(r["train_loss"]), float(r["val_accuracy"])) for r in rows],
            final_test_error,
        )

    def to_dict(self) -> dict:
        return {"entries": [asdict(e) for e in self.entries], "final_test_error": self.final_test_error}

    @classmethod
    def from_dict(cls, d) -> "TrainingHistory":
        return cls([HistoryEntry(**e) for e in d["entries"]], d.get("final_test_error"))


@dataclass(eq=False)
class TrainResult:
    model: torch.nn.Module
    history: TrainingHistory
    normalization: NormalizationStats


# --------------------------------------------------------------------------
# evaluation and training


def predict(model, dataset: ImageSet, channels, normalization: NormalizationStats | None = None, batch_size: int = 1000) -> np.ndarray:
    """Top-1 class per example. Without ``normalization`` pixels are scaled to [0, 1]."""
    sel = dataset.select(channels)
    dtype = next(model.parameters()).dtype
    np_dtype = np.float64 if dtype == torch.float64 else np.float32
    preds = []
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for start in range(0, len(sel), batch_size):
                chunk = sel.pixels[start : start + batch_size]
                x = normalization.apply(chunk, np_dtype) if normalization else chunk.astype(np_dtype) / 255.0
                preds.append(model(torch.from_numpy(x)).argmax(dim=1).numpy())
    finally:
        model.train(was_training)
    return np.concatenate(preds) if preds else np.empty(0, dtype=np.int64)


def evaluate(model, dataset: ImageSet, channels, normalization: NormalizationStats | None = None) -> float:
    """Top-1 accuracy in percent, without augmentation."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty split")
    correct = int((predict(model, dataset, channels, normalization) == dataset.labels).sum())
    return 100.0 * correct / len(dataset)


def _batch_order(n: int, batch_size: int, total_steps: int, rng: np.random.Generator):
    """Yield index arrays from successive seeded permutations (epochs)."""
    perm, pos = rng.permutation(n), 0
    for _ in range(total_steps):
        if batch_size >= n:
            yield rng.permutation(n)
            continue
        if pos + batch_size > n:
            perm, pos = rng.permutation(n), 0
        yield perm[pos : pos + batch_size]
        pos += batch_size


def train(
    model_spec,
    train_set: ImageSet,
    eval_set: ImageSet,
    config: TrainConfig,
    test_set: ImageSet | None = None,
    on_eval: Callable[[HistoryEntry], None] | None = None,
) -> TrainResult:
    """Train ``model_spec`` on ``config.channels`` of ``train_set``.

    Evaluates on ``eval_set`` every ``config.eval_every`` steps and after the
    last step; if ``test_set`` is given its top-1 error is stored as
    ``history.final_test_error``.
    """
    channels = config.channels
    for ds in (train_set, eval_set, test_set):
        if ds is not None:
            missing = [c for c in channels if c not in ds.channels]
            if missing:
                raise ValueError(f"dataset lacks channels {missing}")
    if model_spec.input_channels != len(channels):
        raise ValueError(f"model expects {model_spec.input_channels} channels, config selects {len(channels)}")
    if len(train_set) == 0:
        raise ValueError("empty training set")

    dtype = getattr(torch, config.dtype)
    np_dtype = np.float64 if dtype == torch.float64 else np.float32
    stats = compute_normalization(train_set, channels)
    pixels = train_set.select(channels).pixels
    labels = torch.from_numpy(train_set.labels)

    torch.manual_seed(config.seed)
    model = make_model(model_spec, config.seed, dtype)
    model.train()
    opt = torch.optim.SGD(
        model.parameters(),
        lr=config.lr_at(0),
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    order = _batch_order(len(pixels), config.batch_size, config.total_steps, np.random.default_rng(config.seed))
    history = TrainingHistory()
    running, count = 0.0, 0
    for step, idx in enumerate(order):
        lr = config.lr_at(step)
        for group in opt.param_groups:
            group["lr"] = lr
        batch = pixels[idx]
        if config.augmentation == "crop_flip":
            batch = augment_batch(batch, np.random.default_rng([config.seed, step]))
        x = torch.from_numpy(stats.apply(batch, np_dtype))
        loss = F.cross_entropy(model(x), labels[idx])
        value = float(loss.detach())
        if not np.isfinite(value):
            raise DivergenceError(step, value)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        running += value
        count += 1
        done = step + 1
        if done % config.eval_every == 0 or done == config.total_steps:
            entry = HistoryEntry(done, running / count, evaluate(model, eval_set, channels, stats))
            history.entries.append(entry)
            running, count = 0.0, 0
            if on_eval is not None:
                on_eval(entry)
    if test_set is not None:
        history.final_test_error = 100.0 - evaluate(model, test_set, channels, stats)
    return TrainResult(model, history, stats)


def environment_description() -> dict:
    return {
        "python": platform.python_version(),
        "platform": platform.platform(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "torch_threads": torch.get_num_threads(),
    }


def run_metadata(model_spec, config: TrainConfig, result: TrainResult, dataset_checksum: str) -> dict:
    family = type(model_spec).__name__
    return {
        "model": {"family": family, **asdict(model_spec)},
        "config": config.to_dict(),
        "seed": config.seed,
        "normalization": result.normalization.to_dict(),
        "dataset_checksum": dataset_checksum,
        "initialization": "he_normal(fan_in) hidden, normal(1/fan_in) classifier, zero bias",
        "final_val_accuracy": result.history.final_val_accuracy,
        "final_test_error": result.history.final_test_error,
        "environment": environment_description(),
    }


def write_run_metadata(path, metadata: dict) -> None:
    Path(path).write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_run_metadata(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
