"""Command-line entry point: ``rgbd-cifar <subcommand>``.

Exit codes: 0 success, 1 usage error, 2 data/integrity error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from . import cifar_io
from .depth import build_dataset, provider_from_spec
from .errors import (
    CorruptRecordError,
    DivergenceError,
    IntegrityError,
    MalformedFileError,
    ProviderError,
    ValidationError,
)
from .experiments import (
    AblationResult,
    ComparisonResult,
    compute_transfer_metric,
    default_config,
    emit_report,
    load_result,
    run_channel_ablation,
    run_comparison,
    save_result,
)
from .models import HIDDEN_SWEEP
from .trainer import ImageSet, mlp_recipe, split_validation

log = logging.getLogger("rgbd_cifar")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def load_splits(path, limit: int | None = None):
    """A dataset directory (``train.bin`` [+ ``test.bin``]) or a single record file."""
    p = Path(path)
    if p.is_dir():
        train = ImageSet.from_file(p / "train.bin")
        test = ImageSet.from_file(p / "test.bin") if (p / "test.bin").exists() else None
    else:
        train, test = ImageSet.from_file(p), None
    if limit:
        train = train.subset(range(min(limit, len(train))))
    return train, test


def _steps(epochs: float, n_train: int, batch_size: int) -> int:
    return max(1, math.ceil(epochs * n_train / batch_size))


def cmd_build_dataset(args) -> int:
    provider = provider_from_spec(args.depth_provider, input_size=args.upsample, command=args.provider_command)
    train, test = cifar_io.load_cifar_dir(args.cifar_dir)
    if args.limit:
        train, test = train[: args.limit], test[: args.limit]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, images, offset in (("train", train, 0), ("test", test, len(train))):
        records, manifest = build_dataset(
            images, provider, args.workers, skip_failures=args.skip_failures, index_offset=offset
        )
        extra = {k: v for k, v in manifest.extra.items() if k != "depth_meta_checksum"}
        extra["split"] = name
        written = cifar_io.write_rgbd_batch(
            records, out / f"{name}.bin", depth_provider_id=manifest.depth_provider_id, extra=extra
        )
        print(f"{name}: {written.record_count} records, sha256 {written.checksum}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    data, _ = load_splits(args.dataset, args.limit)
    train, val = split_validation(data, args.val_size, args.seed)
    steps = _steps(args.epochs, len(train), args.batch_size)
    cfg = replace(mlp_recipe(("R",), steps, args.seed), batch_size=args.batch_size)
    result = run_channel_ablation(train, val, cfg, args.hidden)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_result(result, out / "ablation.json")
    emit_report([result], out, plot=args.plot)
    for e in result.entries:
        print(f"{e.channel}: {e.final_accuracy:.2f}% (hidden {e.best_hidden_units})")
    return EXIT_OK


def cmd_compare(args) -> int:
    data, test = load_splits(args.dataset, args.limit)
    train, val = split_validation(data, args.val_size, 0)
    if args.steps:
        steps = args.steps
    else:
        epochs = args.epochs if args.epochs is not None else (50 if args.model == "mlp" else 182)
        steps = _steps(epochs, len(train), 128)
    cfg = default_config(args.model, ("R", "G", "B"), 0, steps)
    if args.lr is not None:
        scale = args.lr / cfg.lr_schedule[0][1]
        cfg = replace(cfg, lr_schedule=tuple((s, r * scale) for s, r in cfg.lr_schedule))
    result = run_comparison(
        train, val, args.model, cfg, args.seeds, test_set=None if args.model == "mlp" else test, hidden_units=args.hidden
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_result(result, out / f"comparison_{args.model}.json")
    emit_report([result], out, plot=args.plot)
    print((out / "summary.txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def _single_result(path: Path, kind):
    p = Path(path)
    files = sorted(p.glob("*.json")) if p.is_dir() else [p]
    for f in files:
        try:
            res = load_result(f)
        except (ValueError, KeyError, json.JSONDecodeError):
            continue
        if isinstance(res, kind):
            return res
    raise FileNotFoundError(f"no {kind.__name__} found in {p}")


def cmd_metric(args) -> int:
    ablation = _single_result(args.ablation, AblationResult)
    comparison = _single_result(args.comparison, ComparisonResult)
    report = compute_transfer_metric(ablation, comparison)
    Path(args.out).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"provider {report.depth_provider_id}: D-only accuracy {report.d_only_accuracy:.2f}%, "
          f"RGBD-RGB error reduction {report.rgbd_minus_rgb_delta:+.2f} points")
    return EXIT_OK


def cmd_report(args) -> int:
    results = []
    for f in sorted(Path(args.inp).glob("*.json")):
        try:
            results.append(load_result(f))
        except (ValueError, KeyError, json.JSONDecodeError):
            continue
    emit_report(results, args.out, plot=args.plot)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rgbd-cifar", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-dataset", help="build RGBD-CIFAR from CIFAR-10 binaries")
    p.add_argument("--cifar-dir", required=True)
    p.add_argument("--depth-provider", required=True,
                   help="synthetic:<kind>:<seed> | external:<dir> | luminance")
    p.add_argument("--provider-command", help="command run as '<cmd> <dir>' for external providers")
    p.add_argument("--upsample", type=_size, default=(400, 400))
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--skip-failures", action="store_true")
    p.add_argument("--limit", type=int, help="only the first N images of each split")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("ablate", help="single-channel MLP ablation (R, G, B, D)")
    p.add_argument("--dataset", required=True)
    p.add_argument("--hidden", type=_int_list, default=list(HIDDEN_SWEEP))
    p.add_argument("--epochs", type=float, default=20)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-size", type=int, default=5000)
    p.add_argument("--limit", type=int)
    p.add_argument("--plot", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("compare", help="RGB vs RGBD with paired seeds")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", choices=("mlp", "resnet20", "resnet56"), default="mlp")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--epochs", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--lr", type=float, help="base learning rate; later schedule steps keep their ratios")
    p.add_argument("--val-size", type=int, default=5000)
    p.add_argument("--limit", type=int)
    p.add_argument("--plot", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("metric", help="transfer-accuracy metric from an ablation and a comparison")
    p.add_argument("--ablation", required=True)
    p.add_argument("--comparison", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metric)

    p = sub.add_parser("report", help="re-render tables/curves from saved results")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (MalformedFileError, CorruptRecordError, IntegrityError, ProviderError, ValidationError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
