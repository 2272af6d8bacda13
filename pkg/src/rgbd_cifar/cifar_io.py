"""CIFAR-10 binary parsing and the RGBD-CIFAR record format.

RGBD-CIFAR is the CIFAR-10 binary layout with a fourth plane appended:

    [label: 1 byte][R: 1024][G: 1024][B: 1024][D: 1024]   (4097 bytes/record)

Planes are row-major 32x32. Two sidecar files accompany a record file:

* ``<name>.manifest`` -- UTF-8 ``key=value`` lines (see :class:`DatasetManifest`).
* ``<name>.depthmeta`` -- ``record_count`` pairs of little-endian float32
  ``(min_depth, max_depth)`` in record order, used to map D back to provider
  units.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .errors import CorruptRecordError, IntegrityError, MalformedFileError

CHANNELS = ("R", "G", "B", "D")
NUM_CLASSES = 10
SIDE = 32
PLANE_SIZE = SIDE * SIDE
CIFAR_RECORD_SIZE = 1 + 3 * PLANE_SIZE
RGBD_RECORD_SIZE = 1 + 4 * PLANE_SIZE
CHECKSUM_ALGORITHM = "sha256"
QUANTIZATION_MODES = ("per_image_minmax",)
MANIFEST_HEADER = "# rgbd-cifar manifest v1"

CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"

_DEPTH_META_DTYPE = np.dtype("<f4")


def _as_pixels(pixels, planes: int) -> np.ndarray:
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        raise ValueError(f"pixels must be uint8, got {arr.dtype}")
    if arr.size != planes * PLANE_SIZE:
        raise ValueError(f"expected {planes * PLANE_SIZE} pixel bytes, got {arr.size}")
    return arr.reshape(planes, SIDE, SIDE)


def _check_label(label) -> int:
    label = int(label)
    if not 0 <= label < NUM_CLASSES:
        raise ValueError(f"label {label} outside [0, {NUM_CLASSES - 1}]")
    return label


@dataclass(eq=False)
class LabeledImage:
    """One CIFAR-10 image: ``pixels`` is planar ``(3, 32, 32)`` uint8 (R, G, B)."""

    label: int
    pixels: np.ndarray

    def __post_init__(self):
        self.label = _check_label(self.label)
        self.pixels = _as_pixels(self.pixels, 3)

    def hwc(self) -> np.ndarray:
        return np.ascontiguousarray(self.pixels.transpose(1, 2, 0))

    def __eq__(self, other):
        if not isinstance(other, LabeledImage):
            return NotImplemented
        return self.label == other.label and np.array_equal(self.pixels, other.pixels)


@dataclass(eq=False)
class RGBDRecord:
    """Label, planar ``(4, 32, 32)`` uint8 pixels and the depth quantization range.

    ``depth_meta`` is held at float32 precision because that is what the
    sidecar stores; this keeps write/read round trips exact.
    """

    label: int
    pixels: np.ndarray
    depth_meta: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        self.label = _check_label(self.label)
        self.pixels = _as_pixels(self.pixels, 4)
        lo, hi = (float(np.float32(v)) for v in self.depth_meta)
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise ValueError(f"depth_meta must be finite, got {self.depth_meta}")
        if lo > hi:
            raise ValueError(f"depth_meta min {lo} > max {hi}")
        self.depth_meta = (lo, hi)

    def __eq__(self, other):
        if not isinstance(other, RGBDRecord):
            return NotImplemented
        return (
            self.label == other.label
            and self.depth_meta == other.depth_meta
            and np.array_equal(self.pixels, other.pixels)
        )


@dataclass(eq=False)
class ChannelImage:
    """A label with a selection of planes, in the order requested."""

    label: int
    channels: tuple[str, ...]
    planes: np.ndarray


@dataclass
class DatasetManifest:
    record_count: int
    channel_layout: tuple[str, ...] = CHANNELS
    depth_provider_id: str = ""
    quantization_mode: str = "per_image_minmax"
    checksum: str = ""
    checksum_algorithm: str = CHECKSUM_ALGORITHM
    extra: dict[str, str] = field(default_factory=dict)

    _CORE_KEYS = (
        "record_count",
        "channel_layout",
        "depth_provider_id",
        "quantization_mode",
        "checksum",
        "checksum_algorithm",
    )

    @property
    def record_size(self) -> int:
        return 1 + len(self.channel_layout) * PLANE_SIZE

    def dumps(self) -> str:
        lines = [
            MANIFEST_HEADER,
            f"record_count={self.record_count}",
            f"channel_layout={','.join(self.channel_layout)}",
            f"depth_provider_id={self.depth_provider_id}",
            f"quantization_mode={self.quantization_mode}",
            f"checksum={self.checksum}",
            f"checksum_algorithm={self.checksum_algorithm}",
        ]
        for key in sorted(self.extra):
            lines.append(f"{key}={self.extra[key]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "DatasetManifest":
        values: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise MalformedFileError(f"manifest line {lineno} is not key=value: {line!r}")
            values[key.strip()] = value.strip()
        missing = [k for k in cls._CORE_KEYS if k not in values]
        if missing:
            raise MalformedFileError(f"manifest missing keys: {', '.join(missing)}")
        try:
            record_count = int(values.pop("record_count"))
        except ValueError as exc:
            raise MalformedFileError(f"bad record_count: {exc}") from None
        layout = tuple(c for c in values.pop("channel_layout").split(",") if c)
        return cls(
            record_count=record_count,
            channel_layout=layout,
            depth_provider_id=values.pop("depth_provider_id"),
            quantization_mode=values.pop("quantization_mode"),
            checksum=values.pop("checksum"),
            checksum_algorithm=values.pop("checksum_algorithm"),
            extra=values,
        )

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def sidecar_paths(record_path) -> tuple[Path, Path]:
    """Return ``(manifest_path, depth_meta_path)`` for a record file."""
    p = Path(record_path)
    return p.with_suffix(".manifest"), p.with_suffix(".depthmeta")


def digest(data, algorithm: str = CHECKSUM_ALGORITHM) -> str:
    try:
        h = hashlib.new(algorithm)
    except ValueError:
        raise IntegrityError(f"unsupported checksum algorithm {algorithm!r}") from None
    h.update(data)
    return h.hexdigest()


# --------------------------------------------------------------------------
# CIFAR-10 input


def decode_cifar(raw) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised parse of CIFAR-10 binary bytes into ``(labels, pixels)``.

    ``pixels`` has shape ``(N, 3, 32, 32)``. Raises on a length that is not a
    positive multiple of 3073 and on any label byte above 9.
    """
    buf = np.frombuffer(raw, dtype=np.uint8)
    n, rem = divmod(buf.size, CIFAR_RECORD_SIZE)
    if buf.size == 0:
        raise MalformedFileError("empty CIFAR batch", offset=0)
    if rem:
        offset = n * CIFAR_RECORD_SIZE
        raise MalformedFileError(
            f"CIFAR batch length {buf.size} is not a multiple of {CIFAR_RECORD_SIZE}; "
            f"trailing partial record at byte offset {offset}",
            offset=offset,
        )
    table = buf.reshape(n, CIFAR_RECORD_SIZE)
    labels = table[:, 0]
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        i = int(bad[0])
        raise CorruptRecordError(f"record {i} has label byte {labels[i]} > 9", record_index=i)
    return labels.astype(np.int64), table[:, 1:].reshape(n, 3, SIDE, SIDE).copy()


def parse_cifar_batch(raw_bytes) -> list[LabeledImage]:
    labels, pixels = decode_cifar(raw_bytes)
    return [LabeledImage(int(y), x) for y, x in zip(labels, pixels)]


def find_cifar_dir(path) -> Path:
    """Accept either the extracted ``cifar-10-batches-bin`` dir or its parent."""
    p = Path(path)
    for candidate in (p, p / "cifar-10-batches-bin"):
        if (candidate / CIFAR_TEST_FILE).is_file():
            return candidate
    raise FileNotFoundError(f"no CIFAR-10 binary batches under {p}")


def load_cifar_dir(path) -> tuple[list[LabeledImage], list[LabeledImage]]:
    """Read the five training batches and the test batch."""
    root = find_cifar_dir(path)
    train: list[LabeledImage] = []
    for name in CIFAR_TRAIN_FILES:
        train.extend(parse_cifar_batch((root / name).read_bytes()))
    test = parse_cifar_batch((root / CIFAR_TEST_FILE).read_bytes())
    return train, test


def encode_cifar(images: Iterable[LabeledImage]) -> bytes:
    out = bytearray()
    for im in images:
        out.append(im.label)
        out += im.pixels.tobytes()
    return bytes(out)


# --------------------------------------------------------------------------
# RGBD-CIFAR output


def encode_rgbd(records: Sequence[RGBDRecord]) -> tuple[bytes, bytes]:
    """Serialise records to ``(record_bytes, depth_meta_bytes)``."""
    n = len(records)
    table = np.empty((n, RGBD_RECORD_SIZE), dtype=np.uint8)
    meta = np.empty((n, 2), dtype=_DEPTH_META_DTYPE)
    for i, rec in enumerate(records):
        table[i, 0] = rec.label
        table[i, 1:] = rec.pixels.reshape(-1)
        meta[i] = rec.depth_meta
    return table.tobytes(), meta.tobytes()


def decode_rgbd(raw, depth_meta_raw, record_count: int | None = None):
    """Parse record bytes and depth-meta bytes into arrays.

    Returns ``(labels (N,), pixels (N, 4, 32, 32), depth_meta (N, 2))``.
    """
    buf = np.frombuffer(raw, dtype=np.uint8)
    n, rem = divmod(buf.size, RGBD_RECORD_SIZE)
    if rem:
        offset = n * RGBD_RECORD_SIZE
        raise MalformedFileError(
            f"RGBD file length {buf.size} is not a multiple of {RGBD_RECORD_SIZE}; "
            f"truncated record at byte offset {offset}",
            offset=offset,
        )
    if record_count is not None and n != record_count:
        raise MalformedFileError(
            f"RGBD file holds {n} records but manifest declares {record_count}",
            offset=buf.size,
        )
    meta = np.frombuffer(depth_meta_raw, dtype=_DEPTH_META_DTYPE)
    if meta.size != 2 * n:
        raise MalformedFileError(
            f"depth-meta sidecar holds {meta.size // 2} pairs, expected {n}", offset=meta.nbytes
        )
    table = buf.reshape(n, RGBD_RECORD_SIZE)
    labels = table[:, 0]
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        i = int(bad[0])
        raise CorruptRecordError(f"record {i} has label byte {labels[i]} > 9", record_index=i)
    return (
        labels.astype(np.int64),
        table[:, 1:].reshape(n, 4, SIDE, SIDE).copy(),
        meta.reshape(n, 2).astype(np.float64),
    )


def _open_sink(target, stack):
    if isinstance(target, (str, os.PathLike)):
        fh = open(target, "wb")
        stack.append(fh)
        return fh
    return target


def write_rgbd_batch(
    records: Sequence[RGBDRecord],
    destination,
    *,
    depth_provider_id: str,
    extra: dict[str, str] | None = None,
    manifest_sink=None,
    depth_meta_sink=None,
) -> DatasetManifest:
    """Write records and their sidecars; return the manifest.

    ``destination`` is either a path (sidecars go next to it, see
    :func:`sidecar_paths`) or a binary file object, in which case the
    sidecars are only written to ``manifest_sink`` / ``depth_meta_sink`` when
    given.
    """
    if not depth_provider_id:
        raise ValueError("depth_provider_id is required (dataset provenance)")
    payload, meta = encode_rgbd(records)
    manifest = DatasetManifest(
        record_count=len(records),
        depth_provider_id=depth_provider_id,
        checksum=digest(payload),
        extra={"depth_meta_checksum": digest(meta), **(extra or {})},
    )
    if isinstance(destination, (str, os.PathLike)):
        manifest_path, meta_path = sidecar_paths(destination)
        manifest_sink = manifest_sink if manifest_sink is not None else manifest_path
        depth_meta_sink = depth_meta_sink if depth_meta_sink is not None else meta_path
    opened: list[BinaryIO] = []
    try:
        _open_sink(destination, opened).write(payload)
        if depth_meta_sink is not None:
            _open_sink(depth_meta_sink, opened).write(meta)
        if manifest_sink is not None:
            _open_sink(manifest_sink, opened).write(manifest.dumps().encode("utf-8"))
    finally:
        for fh in opened:
            fh.close()
    return manifest


def _read_source(source) -> bytes:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    if isinstance(source, (str, os.PathLike)):
        return Path(source).read_bytes()
    return source.read()


def load_rgbd_arrays(source, manifest: DatasetManifest | None = None, depth_meta_source=None):
    """Verify and decode a record file into arrays.

    Returns ``(labels, pixels, depth_meta, manifest)``. ``manifest`` and
    ``depth_meta_source`` default to the sidecars next to a path ``source``.
    """
    if isinstance(source, (str, os.PathLike)):
        manifest_path, meta_path = sidecar_paths(source)
        if manifest is None:
            manifest = DatasetManifest.load(manifest_path)
        if depth_meta_source is None:
            depth_meta_source = meta_path
    if manifest is None or depth_meta_source is None:
        raise ValueError("manifest and depth_meta_source are required for non-path sources")
    if tuple(manifest.channel_layout) != CHANNELS:
        raise MalformedFileError(f"unsupported channel layout {manifest.channel_layout}")

    raw = _read_source(source)
    meta_raw = _read_source(depth_meta_source)
    expected = manifest.record_count * RGBD_RECORD_SIZE
    if len(raw) != expected:
        raise MalformedFileError(
            f"record file is {len(raw)} bytes, manifest implies {expected}", offset=len(raw)
        )
    if digest(raw, manifest.checksum_algorithm) != manifest.checksum:
        raise IntegrityError("record file checksum does not match manifest")
    meta_sum = manifest.extra.get("depth_meta_checksum")
    if meta_sum is not None and digest(meta_raw, manifest.checksum_algorithm) != meta_sum:
        raise IntegrityError("depth-meta sidecar checksum does not match manifest")
    labels, pixels, depth_meta = decode_rgbd(raw, meta_raw, manifest.record_count)
    return labels, pixels, depth_meta, manifest


def read_rgbd_batch(source, manifest: DatasetManifest | None = None, depth_meta_source=None) -> list[RGBDRecord]:
    labels, pixels, depth_meta, _ = load_rgbd_arrays(source, manifest, depth_meta_source)
    return [
        RGBDRecord(int(y), x, (float(m[0]), float(m[1])))
        for y, x, m in zip(labels, pixels, depth_meta)
    ]


# --------------------------------------------------------------------------
# Channels


def parse_channels(channels) -> tuple[str, ...]:
    """Normalise ``"DR"`` / ``["D", "R"]`` / ``"R,G,B"`` to a validated tuple."""
    if isinstance(channels, str):
        channels = [c for c in channels.replace(",", "") if not c.isspace()]
    names = tuple(str(c).upper() for c in channels)
    if not names:
        raise ValueError("channel list is empty")
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate channels in {names}")
    unknown = [c for c in names if c not in CHANNELS]
    if unknown:
        raise ValueError(f"unknown channels {unknown}; expected a subset of {CHANNELS}")
    return names


def channel_indices(channels) -> list[int]:
    return [CHANNELS.index(c) for c in parse_channels(channels)]


def extract_channels(record, channels) -> ChannelImage:
    """Project a record onto ``channels``; the source is never modified."""
    names = parse_channels(channels)
    available = CHANNELS[: record.pixels.shape[0]]
    missing = [c for c in names if c not in available]
    if missing:
        raise ValueError(f"record has no {missing} plane(s)")
    planes = record.pixels[[CHANNELS.index(c) for c in names]].copy()
    return ChannelImage(record.label, names, planes)


def records_to_arrays(records: Sequence[RGBDRecord]):
    """Stack records into ``(labels, pixels, depth_meta)`` arrays."""
    n = len(records)
    pixels = np.empty((n, 4, SIDE, SIDE), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    meta = np.empty((n, 2), dtype=np.float64)
    for i, rec in enumerate(records):
        pixels[i] = rec.pixels
        labels[i] = rec.label
        meta[i] = rec.depth_meta
    return labels, pixels, meta


__all__ = [
    "CHANNELS",
    "ChannelImage",
    "DatasetManifest",
    "LabeledImage",
    "RGBDRecord",
    "channel_indices",
    "decode_cifar",
    "decode_rgbd",
    "encode_cifar",
    "encode_rgbd",
    "extract_channels",
    "load_cifar_dir",
    "load_rgbd_arrays",
    "parse_cifar_batch",
    "parse_channels",
    "read_rgbd_batch",
    "records_to_arrays",
    "sidecar_paths",
    "write_rgbd_batch",
]
