import sys
import textwrap

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rgbd_cifar.cifar_io import LabeledImage, extract_channels
from rgbd_cifar.depth import (
    DepthMap,
    DepthProvider,
    ExternalDirectoryProvider,
    LuminanceDepthProvider,
    SyntheticDepthProvider,
    build_dataset,
    build_rgbd,
    dequantize_depth,
    downsample_depth,
    estimate_depth,
    provider_from_spec,
    quantize_depth,
    upsample_image,
)
from rgbd_cifar.errors import ProviderError, ProviderPending, ValidationError

from conftest import random_images


# ---------------------------------------------------------------- upsample


def test_upsample_constant_and_shape():
    img = np.full((32, 32, 3), 128, np.uint8)
    up = upsample_image(img, (400, 400))
    assert up.shape == (400, 400, 3)
    np.testing.assert_allclose(up, 128.0, atol=1e-9)


def test_upsample_checkerboard_hand_stencil():
    # corner-aligned 2x2 -> 3x3: the new centre sample sits equidistant from all four corners
    board = np.array([[0, 255], [255, 0]], np.uint8)[:, :, None]
    up = upsample_image(board, (3, 3))[:, :, 0]
    expected = np.array(
        [
            [0.0, 127.5, 255.0],
            [127.5, 127.5, 127.5],
            [255.0, 127.5, 0.0],
        ]
    )
    np.testing.assert_allclose(up, expected, atol=1e-12)
    assert up[1, 1] == pytest.approx(board.mean())


def test_upsample_preserves_corners_and_range():
    img = random_images(1, seed=4)[0].hwc()
    up = upsample_image(img, (400, 400))
    assert np.array_equal(up[[0, 0, -1, -1], [0, -1, 0, -1]], img[[0, 0, -1, -1], [0, -1, 0, -1]].astype(float))
    assert up.min() >= 0 and up.max() <= 255


def test_upsample_rejects_shrinking():
    with pytest.raises(ValueError):
        upsample_image(np.zeros((32, 32, 3), np.uint8), (16, 16))


# ---------------------------------------------------------------- downsample


def test_downsample_constant_and_shape():
    out = downsample_depth(DepthMap(np.full((400, 400), 5.0)), (32, 32))
    assert (out.height, out.width) == (32, 32)
    np.testing.assert_allclose(out.values, 5.0, rtol=0, atol=1e-12)


def test_downsample_integer_ratio_block_mean_oracle():
    rng = np.random.default_rng(0)
    src = rng.normal(size=(64, 64))
    expected = np.empty((32, 32))
    for i in range(32):
        for j in range(32):
            expected[i, j] = sum(src[2 * i + a, 2 * j + b] for a in range(2) for b in range(2)) / 4
    np.testing.assert_allclose(downsample_depth(DepthMap(src), (32, 32)).values, expected, atol=1e-12)


def test_downsample_fractional_ratio_supersample_oracle():
    # 400 -> 32 is a 12.5x ratio; doubling every pixel makes it an exact 25x25 block mean
    rng = np.random.default_rng(1)
    src = rng.random((400, 400))
    doubled = np.repeat(np.repeat(src, 2, axis=0), 2, axis=1)
    expected = doubled.reshape(32, 25, 32, 25).mean(axis=(1, 3))
    np.testing.assert_allclose(downsample_depth(DepthMap(src), (32, 32)).values, expected, atol=1e-12)


def test_downsample_rejects_growing():
    with pytest.raises(ValueError):
        downsample_depth(DepthMap(np.zeros((16, 16))), (32, 32))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (40, 52), elements=st.floats(-1e6, 1e6)))
def test_downsample_stays_within_source_range(src):
    out = downsample_depth(DepthMap(src), (32, 32)).values
    span = max(1.0, abs(src).max()) * 1e-12
    assert out.min() >= src.min() - span
    assert out.max() <= src.max() + span


# ---------------------------------------------------------------- quantize


def test_quantize_constant_map_is_zero_plane():
    plane, meta = quantize_depth(DepthMap(np.full((32, 32), 3.7)))
    assert plane.dtype == np.uint8 and not plane.any()
    assert meta == (3.7, 3.7)


def test_quantize_half_rounds_up():
    v = np.zeros((32, 32))
    v[0, 1] = 1.0
    v[5, 5] = 0.5
    plane, meta = quantize_depth(DepthMap(v))
    assert meta == (0.0, 1.0)
    assert plane[5, 5] == 128
    assert plane[0, 1] == 255 and plane[0, 0] == 0


def test_quantize_rejects_non_finite():
    class Raw:
        values = np.array([[np.nan, 1.0]])

    with pytest.raises(ValidationError):
        quantize_depth(Raw())
    with pytest.raises(ValidationError):
        DepthMap(np.array([[np.inf]]))


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (32, 32), elements=st.floats(-1e3, 1e3)),
)
def test_quantize_monotone_and_reconstruction_bound(v):
    plane, meta = quantize_depth(DepthMap(v))
    order = np.argsort(v, axis=None, kind="stable")
    assert np.all(np.diff(plane.reshape(-1)[order].astype(int)) >= 0)
    lo, hi = v.min(), v.max()
    recon = dequantize_depth(plane, meta)
    if np.float32(lo) != np.float32(hi):
        assert np.abs(recon - v).max() <= (hi - lo) / 255
    else:
        assert not plane.any()


# ---------------------------------------------------------------- providers


def test_vertical_gradient_definition():
    p = SyntheticDepthProvider("vertical_gradient", 0)
    d = estimate_depth(p, np.zeros((400, 400, 3)))
    r = np.arange(400)
    np.testing.assert_allclose(d.values, np.repeat((r / 399)[:, None], 400, axis=1))


def test_class_coded_depends_only_on_label_and_seed():
    p = SyntheticDepthProvider("class_coded", 3)
    a = estimate_depth(p, np.zeros((400, 400, 3)), index=0, label=4).values
    b = estimate_depth(p, np.full((400, 400, 3), 200.0), index=9, label=4).values
    c = estimate_depth(p, np.zeros((400, 400, 3)), index=0, label=5).values
    d = estimate_depth(SyntheticDepthProvider("class_coded", 4), np.zeros((400, 400, 3)), index=0, label=4).values
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_iid_noise_depends_only_on_index_and_seed():
    p = SyntheticDepthProvider("iid_noise", 1, expected_input_size=(64, 64))
    a = estimate_depth(p, np.zeros((64, 64, 3)), index=2, label=0).values
    b = estimate_depth(p, np.ones((64, 64, 3)), index=2, label=7).values
    c = estimate_depth(p, np.zeros((64, 64, 3)), index=3, label=0).values
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_provider_input_size_is_checked():
    with pytest.raises(ValueError):
        estimate_depth(SyntheticDepthProvider("radial"), np.zeros((300, 300, 3)))


class _Exploding(DepthProvider):
    provider_id = "boom"

    def __init__(self, bad_index, nan=False):
        self.bad_index = bad_index
        self.nan = nan

    def estimate(self, image, *, index, label=None):
        if index == self.bad_index:
            if self.nan:
                return np.full(image.shape[:2], np.nan)
            raise RuntimeError("estimator crashed")
        return np.zeros(image.shape[:2])


def test_provider_crash_carries_index():
    with pytest.raises(ProviderError) as err:
        estimate_depth(_Exploding(5), np.zeros((400, 400, 3)), index=5)
    assert err.value.index == 5


def test_provider_nan_is_validation_error():
    with pytest.raises(ValidationError):
        estimate_depth(_Exploding(0, nan=True), np.zeros((400, 400, 3)), index=0)


def test_provider_from_spec():
    p = provider_from_spec("synthetic:class_coded:7")
    assert p.provider_id == "synthetic:class_coded:7"
    assert isinstance(provider_from_spec("luminance"), LuminanceDepthProvider)
    assert isinstance(provider_from_spec("external:/tmp/x"), ExternalDirectoryProvider)
    with pytest.raises(ValueError):
        provider_from_spec("magic")


# ---------------------------------------------------------------- external protocol

_MEAN_DEPTH = textwrap.dedent(
    """
    import sys, pathlib
    import numpy as np
    root = pathlib.Path(sys.argv[1])
    for line in (root / "index.txt").read_text().split("\\n"):
        if not line.strip():
            continue
        name, h, w = line.split()
        h, w = int(h), int(w)
        rgb = np.fromfile(root / "inputs" / (name + ".rgb"), dtype=np.uint8).reshape(3, h, w)
        depth = rgb.astype("<f4").mean(axis=0).astype("<f4")
        depth.tofile(root / "outputs" / (name + ".f32"))
    """
)


@pytest.fixture
def mean_depth_script(tmp_path):
    path = tmp_path / "mean_depth.py"
    path.write_text(_MEAN_DEPTH)
    return f"{sys.executable} {path}"


def test_external_provider_roundtrip(tmp_path, mean_depth_script):
    root = tmp_path / "exchange"
    provider = ExternalDirectoryProvider(root, command=mean_depth_script, expected_input_size=(64, 64), keep_inputs=True)
    images = [upsample_image(im.hwc(), (64, 64)) for im in random_images(3, seed=2)]
    out = provider.estimate_batch(images, [0, 1, 2], [None] * 3)
    assert len(list((root / "outputs").glob("*.f32"))) == 3
    for image, depth in zip(images, out):
        assert depth.shape == (64, 64)
        expected = np.clip(np.rint(image), 0, 255).astype(np.uint8).astype(np.float32).mean(axis=2)
        np.testing.assert_allclose(depth, expected, rtol=1e-6)
    # planar raw layout
    raw = np.fromfile(root / "inputs" / "000001.rgb", dtype=np.uint8).reshape(3, 64, 64)
    assert np.array_equal(raw, np.clip(np.rint(images[1]), 0, 255).astype(np.uint8).transpose(2, 0, 1))


def test_external_provider_crash(tmp_path):
    provider = ExternalDirectoryProvider(tmp_path / "x", command=f"{sys.executable} -c 'raise SystemExit(3)'",
                                         expected_input_size=(32, 32))
    with pytest.raises(ProviderError) as err:
        provider.estimate_batch([np.zeros((32, 32, 3))], [11], [None])
    assert err.value.index == 11


def test_external_provider_malformed_output(tmp_path):
    root = tmp_path / "x"
    provider = ExternalDirectoryProvider(root, expected_input_size=(32, 32))
    (root / "outputs").mkdir(parents=True)
    (root / "outputs" / "000004.f32").write_bytes(b"\0" * 10)
    (out,) = provider.estimate_batch([np.zeros((32, 32, 3))], [4], [None])
    assert isinstance(out, ProviderError) and out.index == 4


def test_external_provider_offline_two_phase(tmp_path, mean_depth_script):
    import subprocess

    root = tmp_path / "offline"
    images = random_images(4, seed=8)
    provider = ExternalDirectoryProvider(root, expected_input_size=(32, 32))
    with pytest.raises(ProviderPending):
        build_dataset(images, provider, 1)
    assert len(list((root / "inputs").glob("*.rgb"))) == 4
    subprocess.run([*mean_depth_script.split(), str(root)], check=True)
    records, manifest = build_dataset(images, provider, 1)
    assert manifest.record_count == 4
    assert all(np.array_equal(r.pixels[:3], im.pixels) for r, im in zip(records, images))


# ---------------------------------------------------------------- assembly


def test_build_rgbd_projection():
    im = random_images(1, seed=6)[0]
    d = np.arange(1024, dtype=np.uint16).reshape(32, 32).astype(np.uint8)
    rec = build_rgbd(im, d, (0.0, 1.0))
    assert np.array_equal(extract_channels(rec, "RGB").planes, im.pixels)
    assert np.array_equal(extract_channels(rec, "D").planes[0], d)
    with pytest.raises(ValueError):
        build_rgbd(im, np.zeros((16, 16), np.uint8), (0.0, 1.0))


def test_pipeline_identity_for_constant_image():
    im = LabeledImage(2, np.full((3, 32, 32), 90, np.uint8))
    provider = SyntheticDepthProvider("vertical_gradient", 0)
    (rec,), manifest = build_dataset([im], provider, 1)
    r = np.arange(400) / 399
    direct, _ = quantize_depth(downsample_depth(DepthMap(np.repeat(r[:, None], 400, axis=1)), (32, 32)))
    assert np.array_equal(rec.pixels[3], direct)
    assert manifest.channel_layout == ("R", "G", "B", "D")
    assert manifest.depth_provider_id == provider.provider_id


def test_build_dataset_worker_independence():
    images = random_images(100, seed=0)
    provider = SyntheticDepthProvider("iid_noise", 5)
    a, ma = build_dataset(images, provider, 1)
    b, mb = build_dataset(images, provider, 8)
    assert ma.checksum == mb.checksum
    assert a == b


def test_build_dataset_empty():
    records, manifest = build_dataset([], SyntheticDepthProvider("radial"), 2)
    assert records == [] and manifest.record_count == 0


def test_build_dataset_fail_fast_and_skip():
    images = random_images(6, seed=1)
    with pytest.raises(ProviderError) as err:
        build_dataset(images, _Exploding(3), 2)
    assert err.value.index == 3
    records, manifest = build_dataset(images, _Exploding(3), 2, skip_failures=True)
    assert len(records) == 5
    assert manifest.extra["failed_indices"] == "3"
    assert [r.label for r in records] == [im.label for i, im in enumerate(images) if i != 3]


def test_build_dataset_serial_provider_is_serialised():
    class Serial(DepthProvider):
        provider_id = "serial"
        serial = True
        expected_input_size = (32, 32)

        def __init__(self):
            self.active = 0
            self.max_active = 0

        def estimate(self, image, *, index, label=None):
            import time

            self.active += 1
            self.max_active = max(self.max_active, self.active)
            time.sleep(0.001)
            self.active -= 1
            return np.zeros(image.shape[:2])

    p = Serial()
    build_dataset(random_images(20), p, 8)
    assert p.max_active == 1


def test_luminance_provider_matches_weighted_sum():
    p = LuminanceDepthProvider(expected_input_size=(32, 32))
    img = random_images(1, seed=3)[0].hwc().astype(float)
    d = estimate_depth(p, img).values
    np.testing.assert_allclose(d, 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2])
