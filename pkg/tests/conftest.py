import numpy as np
import pytest

from rgbd_cifar.cifar_io import LabeledImage, RGBDRecord


def random_records(n, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    pixels = rng.integers(0, 256, size=(n, 4, 32, 32), dtype=np.uint8)
    lo = rng.normal(size=n) * 10
    span = rng.exponential(size=n) * 5
    return [RGBDRecord(int(labels[i]), pixels[i], (lo[i], lo[i] + span[i])) for i in range(n)]


def random_images(n, seed=0):
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(n, 3, 32, 32), dtype=np.uint8)
    return [LabeledImage(i % 10, pixels[i]) for i in range(n)]


def cifar_bytes(images):
    out = bytearray()
    for im in images:
        out.append(im.label)
        out += im.pixels.tobytes()
    return bytes(out)


@pytest.fixture
def records():
    return random_records(3, seed=1)


@pytest.fixture
def fake_cifar_dir(tmp_path):
    """A miniature CIFAR-10 binary distribution: 5 x 20 train, 20 test."""
    root = tmp_path / "cifar-10-batches-bin"
    root.mkdir()
    for i in range(1, 6):
        (root / f"data_batch_{i}.bin").write_bytes(cifar_bytes(random_images(20, seed=i)))
    (root / "test_batch.bin").write_bytes(cifar_bytes(random_images(20, seed=99)))
    return root


def tinted_images(n, seed=0, strength=40):
    """Noise images whose mean colour depends weakly on the label."""
    rng = np.random.default_rng(seed)
    tints = np.random.default_rng(1234).uniform(-1, 1, size=(10, 3))
    out = []
    for i in range(n):
        label = i % 10
        base = rng.normal(128, 60, size=(3, 32, 32)) + strength * tints[label][:, None, None]
        out.append(LabeledImage(label, np.clip(base, 0, 255).astype(np.uint8)))
    return out


def rgbd_image_set(images, provider, workers=1):
    from rgbd_cifar.depth import build_dataset
    from rgbd_cifar.trainer import ImageSet

    records, manifest = build_dataset(images, provider, workers)
    return ImageSet.from_records(records, manifest.checksum, manifest.depth_provider_id)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
