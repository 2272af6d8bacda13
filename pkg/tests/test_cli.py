import json

import pytest

from rgbd_cifar.cifar_io import read_rgbd_batch, sidecar_paths
from rgbd_cifar.cli import main


@pytest.fixture
def built(tmp_path, fake_cifar_dir):
    out = tmp_path / "rgbd"
    code = main(["build-dataset", "--cifar-dir", str(fake_cifar_dir), "--depth-provider", "synthetic:class_coded:0",
                 "--upsample", "64x64", "--out", str(out), "--workers", "2"])
    assert code == 0
    return out


def test_build_dataset_writes_both_splits(built):
    train = read_rgbd_batch(built / "train.bin")
    test = read_rgbd_batch(built / "test.bin")
    assert len(train) == 100 and len(test) == 20
    text = sidecar_paths(built / "train.bin")[0].read_text()
    assert "depth_provider_id=synthetic:class_coded:0" in text
    assert "split=train" in text and "upsample_size=64x64" in text


def test_build_dataset_limit(tmp_path, fake_cifar_dir):
    out = tmp_path / "small"
    assert main(["build-dataset", "--cifar-dir", str(fake_cifar_dir), "--depth-provider", "synthetic:radial:1",
                 "--upsample", "40x40", "--out", str(out), "--limit", "7"]) == 0
    assert (out / "train.bin").stat().st_size == 7 * 4097
    assert (out / "test.bin").stat().st_size == 7 * 4097


def test_full_command_chain(tmp_path, built, capsys):
    res = tmp_path / "res"
    assert main(["ablate", "--dataset", str(built), "--hidden", "8", "--epochs", "2", "--batch-size", "16",
                 "--val-size", "20", "--out", str(res)]) == 0
    assert "D:" in capsys.readouterr().out
    assert main(["compare", "--dataset", str(built), "--model", "mlp", "--seeds", "0,1", "--steps", "6",
                 "--hidden", "8", "--val-size", "20", "--out", str(res)]) == 0
    assert "two-layers" in capsys.readouterr().out
    assert main(["metric", "--ablation", str(res / "ablation.json"), "--comparison", str(res / "comparison_mlp.json"),
                 "--out", str(res / "metric.json")]) == 0
    metric = json.loads((res / "metric.json").read_text())
    assert metric["depth_provider_id"] == "synthetic:class_coded:0"
    assert set(metric) >= {"d_only_accuracy", "rgbd_minus_rgb_delta"}

    rendered = tmp_path / "rendered"
    assert main(["report", "--in", str(res), "--out", str(rendered)]) == 0
    assert (rendered / "summary.csv").read_text() == (res / "summary.csv").read_text()
    assert (rendered / "ablation.csv").exists()


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["build-dataset", "--out", "x"],
                                  ["compare", "--dataset", "d", "--out", "o", "--seeds", "a,b"]])
def test_usage_errors_exit_1(argv):
    with pytest.raises(SystemExit) as err:
        main(argv)
    assert err.value.code == 1


def test_unknown_provider_is_usage_error(tmp_path, fake_cifar_dir):
    assert main(["build-dataset", "--cifar-dir", str(fake_cifar_dir), "--depth-provider", "magic",
                 "--out", str(tmp_path / "o")]) == 1


def test_corrupted_dataset_exits_2(built, tmp_path, capsys):
    path = built / "train.bin"
    data = bytearray(path.read_bytes())
    data[100] ^= 0xFF
    path.write_bytes(bytes(data))
    code = main(["ablate", "--dataset", str(built), "--hidden", "8", "--epochs", "1", "--val-size", "20",
                 "--out", str(tmp_path / "r")])
    assert code == 2
    assert "checksum" in capsys.readouterr().err.lower()


def test_missing_cifar_dir_exits_2(tmp_path):
    assert main(["build-dataset", "--cifar-dir", str(tmp_path / "nope"), "--depth-provider", "synthetic:radial:0",
                 "--out", str(tmp_path / "o")]) == 2


def test_divergence_exits_3(built, tmp_path, capsys):
    code = main(["compare", "--dataset", str(built), "--seeds", "0", "--steps", "20", "--hidden", "8",
                 "--val-size", "20", "--lr", "1e12", "--out", str(tmp_path / "r")])
    assert code == 3
    assert "diverged" in capsys.readouterr().err
