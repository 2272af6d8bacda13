"""Depth providers and the RGB -> RGBD construction pipeline.

Per image: bilinear upsample to the provider's input size, estimate depth,
area-average the depth back to 32x32, quantize it per image to 8 bits and
append it to the RGB planes as the D plane.
"""
from __future__ import annotations

import logging
import shlex
import subprocess
import threading
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .cifar_io import (
    SIDE,
    DatasetManifest,
    LabeledImage,
    RGBDRecord,
    digest,
    encode_rgbd,
)
from .errors import ProviderError, ProviderPending, ValidationError
from .resample import area_resize, bilinear_resize

log = logging.getLogger(__name__)

DEFAULT_INPUT_SIZE = (400, 400)
UPSAMPLE_KERNEL = "bilinear_align_corners"
DOWNSAMPLE_KERNEL = "area"


@dataclass(eq=False)
class DepthMap:
    """A single-channel depth field; larger means farther unless a provider says otherwise."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] == 0 or values.shape[1] == 0:
            raise ValidationError(f"depth map must be a non-empty 2-D array, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("depth map contains non-finite values")
        self.values = values

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


class DepthProvider(ABC):
    """Something that turns an ``(H, W, 3)`` float image in [0, 255] into an ``(H, W)`` depth array.

    ``serial`` providers are never called from two threads at once.
    ``batched`` providers implement :meth:`estimate_batch` natively and are
    fed chunks rather than single images.
    """

    provider_id: str = "abstract"
    expected_input_size: tuple[int, int] = DEFAULT_INPUT_SIZE
    deterministic: bool = True
    serial: bool = False
    batched: bool = False

    @abstractmethod
    def estimate(self, image: np.ndarray, *, index: int, label: int | None = None) -> np.ndarray:
        ...

    def estimate_batch(self, images, indices, labels) -> list:
        """Return one depth array (or a :class:`ProviderError`) per input."""
        out = []
        for image, index, label in zip(images, indices, labels):
            try:
                out.append(self.estimate(image, index=index, label=label))
            except ProviderError as exc:
                out.append(exc)
        return out


class SyntheticDepthProvider(DepthProvider):
    """Test double for a real estimator.

    ``class_coded`` depends only on ``(label, seed)``: a coarse random
    ``pattern_cells x pattern_cells`` field per class. ``iid_noise`` depends
    only on ``(index, seed)``. The other two kinds ignore everything but the
    output size.
    """

    KINDS = ("vertical_gradient", "radial", "class_coded", "iid_noise")

    def __init__(self, kind: str, seed: int = 0, expected_input_size=DEFAULT_INPUT_SIZE, pattern_cells: int = 8):
        if kind not in self.KINDS:
            raise ValueError(f"unknown synthetic depth kind {kind!r}; choose from {self.KINDS}")
        self.kind = kind
        self.seed = int(seed)
        self.expected_input_size = tuple(expected_input_size)
        self.pattern_cells = pattern_cells
        self.provider_id = f"synthetic:{kind}:{self.seed}"

    def estimate(self, image, *, index, label=None):
        h, w = image.shape[:2]
        if self.kind == "vertical_gradient":
            return np.repeat((np.arange(h) / max(h - 1, 1))[:, None], w, axis=1)
        if self.kind == "radial":
            yy, xx = np.mgrid[0:h, 0:w]
            r = np.hypot(yy - (h - 1) / 2, xx - (w - 1) / 2)
            return r / max(r.max(), 1e-12)
        if self.kind == "class_coded":
            if label is None:
                raise ProviderError("class_coded depth needs the image label", index)
            coarse = np.random.default_rng([self.seed, int(label)]).random((self.pattern_cells,) * 2)
            rows = np.arange(h) * self.pattern_cells // h
            cols = np.arange(w) * self.pattern_cells // w
            return coarse[np.ix_(rows, cols)]
        return np.random.default_rng([self.seed, int(index)]).random((h, w))


class LuminanceDepthProvider(DepthProvider):
    """"Depth" equal to Rec. 601 luminance: carries no information beyond RGB."""

    provider_id = "luminance"

    def __init__(self, expected_input_size=DEFAULT_INPUT_SIZE):
        self.expected_input_size = tuple(expected_input_size)

    def estimate(self, image, *, index, label=None):
        return image @ np.array([0.299, 0.587, 0.114])


class ExternalDirectoryProvider(DepthProvider):
    """File-exchange adapter for an out-of-process depth estimator.

    Layout under ``root``::

        index.txt            one line per pending input: "<name> <height> <width>"
        inputs/<name>.rgb    uint8 planar R, G, B planes, each H x W row-major
        outputs/<name>.f32   little-endian float32 H x W depth, row-major

    ``<name>`` is the zero-padded dataset index (``%06d``). With ``command``
    set, the command is run as ``command <root>`` once per chunk. Without
    it, missing outputs cause the inputs to be exported and
    :class:`ProviderPending` to be raised, so the estimator can be run offline
    and the build repeated.
    """

    serial = True
    batched = True

    def __init__(
        self,
        root,
        command: str | None = None,
        expected_input_size=DEFAULT_INPUT_SIZE,
        provider_id: str | None = None,
        keep_inputs: bool = False,
        timeout: float | None = None,
    ):
        self.root = Path(root)
        self.command = command
        self.expected_input_size = tuple(expected_input_size)
        self.provider_id = provider_id or f"external:{self.root.name or self.root}"
        self.keep_inputs = keep_inputs
        self.timeout = timeout

    @staticmethod
    def name_for(index: int) -> str:
        return f"{index:06d}"

    @property
    def input_dir(self) -> Path:
        return self.root / "inputs"

    @property
    def output_dir(self) -> Path:
        return self.root / "outputs"

    def export_inputs(self, images, indices) -> list[Path]:
        self.input_dir.mkdir(parents=True, exist_ok=True)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        paths, lines = [], []
        for image, index in zip(images, indices):
            name = self.name_for(index)
            h, w = image.shape[:2]
            planar = np.clip(np.rint(image), 0, 255).astype(np.uint8).transpose(2, 0, 1)
            path = self.input_dir / f"{name}.rgb"
            path.write_bytes(planar.tobytes())
            paths.append(path)
            lines.append(f"{name} {h} {w}")
        (self.root / "index.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        return paths

    def read_output(self, index: int, shape) -> np.ndarray:
        path = self.output_dir / f"{self.name_for(index)}.f32"
        if not path.is_file():
            raise ProviderError(f"missing depth output {path}", index)
        raw = path.read_bytes()
        expected = shape[0] * shape[1] * 4
        if len(raw) != expected:
            raise ProviderError(f"depth output {path} is {len(raw)} bytes, expected {expected}", index)
        return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)

    def _have_output(self, index) -> bool:
        return (self.output_dir / f"{self.name_for(index)}.f32").is_file()

    def estimate(self, image, *, index, label=None):
        result = self.estimate_batch([image], [index], [label])[0]
        if isinstance(result, ProviderError):
            raise result
        return result

    def estimate_batch(self, images, indices, labels):
        indices = [int(i) for i in indices]
        if not indices:
            return []
        pending = [k for k, i in enumerate(indices) if not self._have_output(i)]
        if pending and self.command is None:
            self.export_inputs([images[k] for k in pending], [indices[k] for k in pending])
            raise ProviderPending(
                f"{len(pending)} inputs exported to {self.input_dir}; run the depth estimator "
                f"to fill {self.output_dir} and rebuild",
                indices[pending[0]],
            )
        if pending:
            inputs = self.export_inputs([images[k] for k in pending], [indices[k] for k in pending])
            argv = [*shlex.split(self.command), str(self.root)]
            try:
                proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise ProviderError(f"could not run depth provider {argv!r}: {exc}", indices[pending[0]]) from exc
            if proc.returncode != 0:
                raise ProviderError(
                    f"depth provider exited with code {proc.returncode}: {proc.stderr.strip()[-500:]}",
                    indices[pending[0]],
                )
            if not self.keep_inputs:
                for p in inputs:
                    p.unlink(missing_ok=True)
        out = []
        for image, index in zip(images, indices):
            try:
                out.append(self.read_output(index, image.shape[:2]))
            except ProviderError as exc:
                out.append(exc)
        return out


def provider_from_spec(spec: str, *, input_size=DEFAULT_INPUT_SIZE, command: str | None = None) -> DepthProvider:
    """Parse ``synthetic:<kind>:<seed>``, ``external:<dir>`` or ``luminance``."""
    kind, _, rest = spec.partition(":")
    if kind == "synthetic":
        name, _, seed = rest.partition(":")
        return SyntheticDepthProvider(name, int(seed or 0), expected_input_size=input_size)
    if kind == "external":
        if not rest:
            raise ValueError("external provider needs a directory: external:<dir>")
        return ExternalDirectoryProvider(rest, command=command, expected_input_size=input_size)
    if kind == "luminance":
        return LuminanceDepthProvider(expected_input_size=input_size)
    raise ValueError(f"unrecognised depth provider {spec!r}")


# --------------------------------------------------------------------------
# the four pipeline steps


def upsample_image(image: np.ndarray, target: tuple[int, int] = DEFAULT_INPUT_SIZE) -> np.ndarray:
    """Bilinear upsample of an ``(h, w, 3)`` image to ``target``; returns float64 in [0, 255]."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"expected an (h, w, c) image, got shape {image.shape}")
    if target[0] < image.shape[0] or target[1] < image.shape[1]:
        raise ValueError(f"target {target} is smaller than source {image.shape[:2]}; use downsample")
    return np.clip(bilinear_resize(image, target), 0.0, 255.0)


def estimate_depth(provider: DepthProvider, image: np.ndarray, *, index: int = 0, label: int | None = None) -> DepthMap:
    if tuple(image.shape[:2]) != tuple(provider.expected_input_size):
        raise ValueError(
            f"image is {image.shape[:2]}, provider {provider.provider_id} expects {provider.expected_input_size}"
        )
    try:
        raw = provider.estimate(image, index=index, label=label)
    except ProviderError:
        raise
    except Exception as exc:
        raise ProviderError(f"{provider.provider_id} failed: {exc}", index) from exc
    return _validated(raw, image.shape[:2], index)


def _validated(raw, shape, index) -> DepthMap:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != tuple(shape):
        raise ProviderError(f"provider returned shape {raw.shape}, expected {tuple(shape)}", index)
    if not np.all(np.isfinite(raw)):
        raise ValidationError(f"provider output for image {index} contains non-finite values")
    return DepthMap(raw)


def downsample_depth(depth: DepthMap, target: tuple[int, int] = (SIDE, SIDE)) -> DepthMap:
    if target[0] > depth.height or target[1] > depth.width:
        raise ValueError(f"target {target} is larger than source {(depth.height, depth.width)}")
    return DepthMap(area_resize(depth.values, target))


def quantize_depth(depth: DepthMap) -> tuple[np.ndarray, tuple[float, float]]:
    """Per-image min-max quantization to uint8 with round-half-up.

    A map whose range collapses at float32 precision quantizes to all zeros
    and reports ``min == max``.
    """
    v = np.asarray(depth.values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValidationError("cannot quantize non-finite depth")
    lo, hi = float(v.min()), float(v.max())
    if np.float32(lo) == np.float32(hi):
        return np.zeros(v.shape, dtype=np.uint8), (lo, lo)
    q = np.floor((v - lo) / (hi - lo) * 255.0 + 0.5)
    return np.clip(q, 0, 255).astype(np.uint8), (lo, hi)


def dequantize_depth(plane: np.ndarray, depth_meta: tuple[float, float]) -> np.ndarray:
    lo, hi = depth_meta
    return lo + plane.astype(np.float64) / 255.0 * (hi - lo)


def build_rgbd(image: LabeledImage, d_plane: np.ndarray, depth_meta: tuple[float, float]) -> RGBDRecord:
    d_plane = np.asarray(d_plane)
    if d_plane.shape != (SIDE, SIDE) or d_plane.dtype != np.uint8:
        raise ValueError(f"D plane must be uint8 {SIDE}x{SIDE}, got {d_plane.dtype} {d_plane.shape}")
    pixels = np.concatenate([image.pixels, d_plane[None]], axis=0)
    return RGBDRecord(image.label, pixels, depth_meta)


# --------------------------------------------------------------------------
# whole-dataset build


def dataset_manifest(records: Sequence[RGBDRecord], provider_id: str, extra: dict[str, str] | None = None) -> DatasetManifest:
    payload, meta = encode_rgbd(records)
    return DatasetManifest(
        record_count=len(records),
        depth_provider_id=provider_id,
        checksum=digest(payload),
        extra={"depth_meta_checksum": digest(meta), **(extra or {})},
    )


def _finish(image: LabeledImage, depth: DepthMap) -> RGBDRecord:
    plane, meta = quantize_depth(downsample_depth(depth, (SIDE, SIDE)))
    return build_rgbd(image, plane, meta)


def build_dataset(
    images: Sequence[LabeledImage],
    provider: DepthProvider,
    worker_count: int = 1,
    *,
    skip_failures: bool = False,
    chunk_size: int = 64,
    index_offset: int = 0,
) -> tuple[list[RGBDRecord], DatasetManifest]:
    """Run the pipeline over ``images``; output order always equals input order.

    Provider indices are ``index_offset + position`` so that train and test
    splits can share one external exchange directory. Any per-image failure
    aborts with the failing index unless ``skip_failures``, in which case
    failed indices are listed in the manifest under ``failed_indices``.
    """
    if worker_count < 1:
        raise ValueError("worker_count must be >= 1")
    if not provider.provider_id:
        raise ValueError("provider has no provider_id; datasets require provenance")
    size = tuple(provider.expected_input_size)
    lock = threading.Lock() if provider.serial else None
    failed: list[int] = []
    records: list[RGBDRecord | None] = [None] * len(images)

    def one(pos: int):
        index = index_offset + pos
        image = images[pos]
        try:
            up = upsample_image(image.hwc(), size)
            if lock is None:
                depth = estimate_depth(provider, up, index=index, label=image.label)
            else:
                with lock:
                    depth = estimate_depth(provider, up, index=index, label=image.label)
            return _finish(image, depth)
        except (ProviderError, ValidationError) as exc:
            if skip_failures and not isinstance(exc, ProviderPending):
                return exc
            raise

    def chunk(positions: list[int], pool):
        ups = list(pool.map(lambda p: upsample_image(images[p].hwc(), size), positions))
        results = provider.estimate_batch(
            ups, [index_offset + p for p in positions], [images[p].label for p in positions]
        )
        del ups

        def fin(k):
            res = results[k]
            pos = positions[k]
            try:
                if isinstance(res, Exception):
                    raise res
                return _finish(images[pos], _validated(res, size, index_offset + pos))
            except (ProviderError, ValidationError) as exc:
                if skip_failures:
                    return exc
                raise

        return list(pool.map(fin, range(len(positions))))

    with ThreadPoolExecutor(max_workers=worker_count) as pool:
        if provider.batched:
            outputs = []
            for start in range(0, len(images), chunk_size):
                outputs.extend(chunk(list(range(start, min(start + chunk_size, len(images)))), pool))
        else:
            outputs = list(pool.map(one, range(len(images))))

    for pos, out in enumerate(outputs):
        if isinstance(out, Exception):
            log.warning("skipping image %d: %s", index_offset + pos, out)
            failed.append(index_offset + pos)
        else:
            records[pos] = out
    kept = [r for r in records if r is not None]
    extra = {
        "upsample": UPSAMPLE_KERNEL,
        "upsample_size": f"{size[0]}x{size[1]}",
        "downsample": DOWNSAMPLE_KERNEL,
    }
    if skip_failures:
        extra["failed_indices"] = ",".join(map(str, failed))
    return kept, dataset_manifest(kept, provider.provider_id, extra)
