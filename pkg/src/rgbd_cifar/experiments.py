"""Channel ablation, RGB-vs-RGBD comparison and the transfer-accuracy metric."""
from __future__ import annotations

import csv
import json
import logging
import statistics
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .cifar_io import CHANNELS, LabeledImage
from .models import HIDDEN_SWEEP, MlpSpec, spec_for
from .trainer import (
    ImageSet,
    TrainConfig,
    TrainingHistory,
    mlp_recipe,
    resnet_recipe,
    run_metadata,
    train,
)

log = logging.getLogger(__name__)

RGB = ("R", "G", "B")
RGBD = ("R", "G", "B", "D")

# Published errors (%) per network: (RGB, RGBD). The two-layer row is
# 100 - validation accuracy; the ResNet rows are test error.
PUBLISHED_ERRORS = {
    "mlp": (48.0, 44.0),
    "resnet20": (8.75, 8.20),
    "resnet56": (6.97, 6.44),
}
PUBLISHED_BANDS = {"mlp": 3.0, "resnet20": 0.5, "resnet56": 0.5}
TABLE_NAMES = {"mlp": "two-layers", "resnet20": "ResNet-20", "resnet56": "ResNet-56"}


def _require_channels(dataset: ImageSet, channels=CHANNELS):
    missing = [c for c in channels if c not in dataset.channels]
    if missing:
        raise ValueError(f"dataset is missing channels {missing}")


# --------------------------------------------------------------------------
# ablation


@dataclass
class AblationEntry:
    channel: str
    best_hidden_units: int
    validation_accuracy_curve: list[tuple[int, float]]
    final_accuracy: float
    sweep: dict[int, float] = field(default_factory=dict)


@dataclass
class AblationResult:
    entries: list[AblationEntry]
    dataset_checksum: str = ""
    depth_provider_id: str = ""
    seed: int = 0

    def accuracy(self, channel: str) -> float:
        for e in self.entries:
            if e.channel == channel:
                return e.final_accuracy
        raise KeyError(channel)

    def ranking(self) -> list[str]:
        """Channels from best to worst final accuracy."""
        return [e.channel for e in sorted(self.entries, key=lambda e: -e.final_accuracy)]

    def to_dict(self) -> dict:
        return {
            "kind": "ablation",
            "dataset_checksum": self.dataset_checksum,
            "depth_provider_id": self.depth_provider_id,
            "seed": self.seed,
            "entries": [
                {**asdict(e), "sweep": {str(k): v for k, v in e.sweep.items()}} for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, d) -> "AblationResult":
        entries = [
            AblationEntry(
                e["channel"],
                e["best_hidden_units"],
                [tuple(p) for p in e["validation_accuracy_curve"]],
                e["final_accuracy"],
                {int(k): v for k, v in e.get("sweep", {}).items()},
            )
            for e in d["entries"]
        ]
        return cls(entries, d.get("dataset_checksum", ""), d.get("depth_provider_id", ""), d.get("seed", 0))


def run_channel_ablation(
    train_set: ImageSet,
    val_set: ImageSet,
    config: TrainConfig,
    hidden_sweep: Sequence[int] = HIDDEN_SWEEP,
    channels: Sequence[str] = CHANNELS,
) -> AblationResult:
    """Train an MLP on each single channel, sweeping the hidden width.

    Every run shares ``config`` (budget, schedule, seed); the best width per
    channel is chosen by final validation accuracy, ties going to the
    narrower network.
    """
    _require_channels(train_set)
    _require_channels(val_set)
    entries = []
    for channel in channels:
        best = None
        sweep = {}
        for hidden in hidden_sweep:
            cfg = replace(config, channels=(channel,))
            result = train(MlpSpec(1, hidden), train_set, val_set, cfg)
            acc = result.history.final_val_accuracy
            sweep[int(hidden)] = acc
            log.info("ablation channel=%s hidden=%d acc=%.2f", channel, hidden, acc)
            if best is None or acc > best[1]:
                best = (hidden, acc, result.history)
        hidden, acc, history = best
        curve = [(e.step, e.val_accuracy) for e in history.entries]
        entries.append(AblationEntry(channel, int(hidden), curve, acc, sweep))
    return AblationResult(entries, train_set.checksum, train_set.provider_id, config.seed)


# --------------------------------------------------------------------------
# comparison


@dataclass
class RunRecord:
    channel_set: str
    model: str
    seed: int
    final_error_percent: float
    history: TrainingHistory
    metadata: dict

    @property
    def name(self) -> str:
        return f"{self.model}_{self.channel_set}_seed{self.seed}"


@dataclass
class ComparisonResult:
    model: str
    runs: list[RunRecord]
    dataset_checksum: str = ""
    depth_provider_id: str = ""

    def errors(self, channel_set: str) -> list[float]:
        return [r.final_error_percent for r in self.runs if r.channel_set == channel_set]

    def mean_error(self, channel_set: str) -> float:
        return statistics.fmean(self.errors(channel_set))

    @property
    def delta(self) -> float:
        """Mean RGB error minus mean RGBD error; positive means depth helped."""
        return self.mean_error("RGB") - self.mean_error("RGBD")

    def paired_deltas(self) -> list[float]:
        by_seed = {}
        for r in self.runs:
            by_seed.setdefault(r.seed, {})[r.channel_set] = r.final_error_percent
        return [v["RGB"] - v["RGBD"] for _, v in sorted(by_seed.items())]

    def seed_spread(self) -> float:
        """Pooled within-arm standard deviation of final error across seeds."""
        arms = [self.errors("RGB"), self.errors("RGBD")]
        if min(len(a) for a in arms) < 2:
            return 0.0
        return float(np.sqrt(statistics.fmean(statistics.variance(a) for a in arms)))

    def to_dict(self) -> dict:
        return {
            "kind": "comparison",
            "model": self.model,
            "dataset_checksum": self.dataset_checksum,
            "depth_provider_id": self.depth_provider_id,
            "runs": [
                {
                    "channel_set": r.channel_set,
                    "model": r.model,
                    "seed": r.seed,
                    "final_error_percent": r.final_error_percent,
                    "history": r.history.to_dict(),
                    "metadata": r.metadata,
                }
                for r in self.runs
            ],
        }

    @classmethod
    def from_dict(cls, d) -> "ComparisonResult":
        runs = [
            RunRecord(
                r["channel_set"],
                r["model"],
                r["seed"],
                r["final_error_percent"],
                TrainingHistory.from_dict(r["history"]),
                r["metadata"],
            )
            for r in d["runs"]
        ]
        return cls(d["model"], runs, d.get("dataset_checksum", ""), d.get("depth_provider_id", ""))


def check_pairing(meta_rgb: dict, meta_rgbd: dict) -> None:
    """Refuse pairs whose metadata differ in anything but channels and stem width."""

    def strip(meta):
        m = json.loads(json.dumps(meta))
        m["config"].pop("channels", None)
        m["model"].pop("input_channels", None)
        for key in ("normalization", "final_val_accuracy", "final_test_error", "environment"):
            m.pop(key, None)
        return m

    a, b = strip(meta_rgb), strip(meta_rgbd)
    if a != b:
        diff = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
        raise ValueError(f"RGB/RGBD runs are not paired; metadata differ in {diff}")


def default_config(model: str, channels, seed: int = 0, total_steps: int | None = None) -> TrainConfig:
    if model == "mlp":
        return mlp_recipe(channels, total_steps or 20_000, seed)
    return resnet_recipe(channels, total_steps or 64_000, seed)


def run_comparison(
    train_set: ImageSet,
    val_set: ImageSet,
    model: str = "mlp",
    config: TrainConfig | None = None,
    seeds: Sequence[int] = (0, 1, 2),
    test_set: ImageSet | None = None,
    hidden_units: int = 256,
) -> ComparisonResult:
    """Train RGB and RGBD variants with paired seeds and identical schedules.

    ``final_error_percent`` is test error when ``test_set`` is given and
    100 minus final validation accuracy otherwise.
    """
    _require_channels(train_set)
    _require_channels(val_set)
    template = config or default_config(model, RGB)
    runs = []
    for seed in seeds:
        pair = {}
        for name, chans in (("RGB", RGB), ("RGBD", RGBD)):
            cfg = replace(template, channels=chans, seed=int(seed))
            spec = spec_for(model, len(chans), hidden_units)
            result = train(spec, train_set, val_set, cfg, test_set=test_set)
            hist = result.history
            err = hist.final_test_error if hist.final_test_error is not None else 100.0 - hist.final_val_accuracy
            meta = run_metadata(spec, cfg, result, train_set.checksum)
            pair[name] = meta
            runs.append(RunRecord(name, model, int(seed), err, hist, meta))
            log.info("compare model=%s %s seed=%d error=%.2f", model, name, seed, err)
        check_pairing(pair["RGB"], pair["RGBD"])
    return ComparisonResult(model, runs, train_set.checksum, train_set.provider_id)


# --------------------------------------------------------------------------
# transfer-accuracy metric


@dataclass
class TransferAccuracyReport:
    depth_provider_id: str
    d_only_accuracy: float
    rgbd_minus_rgb_delta: float
    ablation: AblationResult
    comparison: ComparisonResult

    def recompute(self) -> tuple[float, float]:
        return self.ablation.accuracy("D"), self.comparison.delta

    def to_dict(self) -> dict:
        return {
            "depth_provider_id": self.depth_provider_id,
            "d_only_accuracy": self.d_only_accuracy,
            "rgbd_minus_rgb_delta": self.rgbd_minus_rgb_delta,
            "ablation": self.ablation.to_dict(),
            "comparison": self.comparison.to_dict(),
        }

    @classmethod
    def from_dict(cls, d) -> "TransferAccuracyReport":
        return cls(
            d["depth_provider_id"],
            d["d_only_accuracy"],
            d["rgbd_minus_rgb_delta"],
            AblationResult.from_dict(d["ablation"]),
            ComparisonResult.from_dict(d["comparison"]),
        )


def compute_transfer_metric(ablation: AblationResult, comparison: ComparisonResult) -> TransferAccuracyReport:
    """Score a depth provider by (D-only accuracy, RGBD-minus-RGB error reduction).

    Higher is better on both axes. Both inputs must come from the same dataset.
    """
    if ablation.dataset_checksum != comparison.dataset_checksum:
        raise ValueError(
            "ablation and comparison were run on different datasets "
            f"({ablation.dataset_checksum[:12]} vs {comparison.dataset_checksum[:12]})"
        )
    provider = ablation.depth_provider_id or comparison.depth_provider_id
    return TransferAccuracyReport(provider, ablation.accuracy("D"), comparison.delta, ablation, comparison)


# --------------------------------------------------------------------------
# published-number checks


@dataclass
class TargetCheck:
    cell: str
    target: float
    observed: float
    band: float
    status: str


def check_published_targets(comparison: ComparisonResult) -> list[TargetCheck]:
    """Compare mean errors with the published table; status is PASS or FLAG, never an exception."""
    if comparison.model not in PUBLISHED_ERRORS:
        return []
    band = PUBLISHED_BANDS[comparison.model]
    name = TABLE_NAMES[comparison.model]
    checks = []
    for target, arm in zip(PUBLISHED_ERRORS[comparison.model], ("RGB", "RGBD")):
        observed = comparison.mean_error(arm)
        ok = abs(observed - target) <= band
        checks.append(TargetCheck(f"{name}/{arm}", target, observed, band, "PASS" if ok else "FLAG"))
    if comparison.model != "mlp":
        spread = comparison.seed_spread()
        worse_by = -comparison.delta
        checks.append(
            TargetCheck(f"{name}/RGBD-not-worse", 0.0, worse_by, spread, "PASS" if worse_by <= spread else "FLAG")
        )
    return checks


# --------------------------------------------------------------------------
# reports


def _fmt(v: float | None) -> str:
    # display rule: two decimals; full precision lives in summary.json and run metadata
    return "" if v is None else f"{v:.2f}"


def emit_report(results: Sequence, out_dir, plot: bool = False) -> list[Path]:
    """Write per-run histories, a summary table (Network, RGB, RGBD) and optional curve plots.

    ``results`` may mix :class:`ComparisonResult` and :class:`AblationResult`.
    Output is deterministic for fixed inputs.
    """
    results = list(results)
    if not results:
        raise ValueError("no results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    comparisons = [r for r in results if isinstance(r, ComparisonResult)]
    ablations = [r for r in results if isinstance(r, AblationResult)]
    if len(comparisons) + len(ablations) != len(results):
        raise TypeError("results must be ComparisonResult or AblationResult objects")

    for comp in comparisons:
        for run in comp.runs:
            path = out / f"{run.name}.csv"
            run.history.to_csv(path)
            meta = out / f"{run.name}.json"
            meta.write_text(json.dumps(run.metadata, indent=2, sort_keys=True) + "\n", encoding="utf-8")
            written += [path, meta]

    if comparisons:
        rows = [(TABLE_NAMES.get(c.model, c.model), c.mean_error("RGB"), c.mean_error("RGBD"), c) for c in comparisons]
        path = out / "summary.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["Network", "RGB", "RGBD"])
            for name, rgb, rgbd, _ in rows:
                w.writerow([name, _fmt(rgb), _fmt(rgbd)])
        written.append(path)

        lines = [f"{'Network':<12}{'RGB':>8}{'RGBD':>8}{'delta':>8}{'spread':>8}{'seeds':>7}"]
        for name, rgb, rgbd, c in rows:
            seeds = len(c.errors("RGB"))
            lines.append(f"{name:<12}{_fmt(rgb):>8}{_fmt(rgbd):>8}{_fmt(c.delta):>8}{_fmt(c.seed_spread()):>8}{seeds:>7}")
        lines.append("")
        lines.append("Top-1 error (%), mean over seeds. delta = RGB - RGBD.")
        checks = [chk for c in comparisons for chk in check_published_targets(c)]
        if checks:
            lines.append("")
            lines.append("Published-number checks (reported, not gating):")
            for chk in checks:
                lines.append(
                    f"  {chk.status:<5}{chk.cell:<28}observed {chk.observed:.2f}  target {chk.target:.2f} +/- {chk.band:.2f}"
                )
        path = out / "summary.txt"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(path)

        path = out / "summary.json"
        payload = [
            {"network": name, "rgb_error": rgb, "rgbd_error": rgbd, "delta": c.delta, "seed_spread": c.seed_spread()}
            for name, rgb, rgbd, c in rows
        ]
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        written.append(path)

    for k, abl in enumerate(ablations):
        suffix = "" if len(ablations) == 1 else f"_{k}"
        path = out / f"ablation{suffix}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["channel", "best_hidden_units", "final_accuracy"])
            for e in abl.entries:
                w.writerow([e.channel, e.best_hidden_units, _fmt(e.final_accuracy)])
        written.append(path)
        for e in abl.entries:
            path = out / f"ablation{suffix}_{e.channel}_curve.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["step", "val_accuracy"])
                w.writerows([[s, repr(a)] for s, a in e.validation_accuracy_curve])
            written.append(path)

    if plot:
        written += _plot_curves(comparisons, ablations, out)
    return written


def _plot_curves(comparisons, ablations, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    for abl in ablations:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for e in abl.entries:
            steps, accs = zip(*e.validation_accuracy_curve)
            ax.plot(steps, accs, label=f"{e.channel} (h={e.best_hidden_units})")
        ax.set_xlabel("step")
        ax.set_ylabel("validation accuracy (%)")
        ax.legend()
        path = out / "ablation_curves.png"
        fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    for comp in comparisons:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for run in comp.runs:
            steps = [e.step for e in run.history.entries]
            accs = [e.val_accuracy for e in run.history.entries]
            ax.plot(steps, accs, color="tab:blue" if run.channel_set == "RGBD" else "tab:red", alpha=0.7,
                    label=f"{run.channel_set} seed {run.seed}")
        ax.set_xlabel("step")
        ax.set_ylabel("validation accuracy (%)")
        ax.legend(fontsize="small")
        path = out / f"{comp.model}_curves.png"
        fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths


def load_result(path):
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    kind = d.get("kind") if isinstance(d, dict) else None
    if kind == "ablation":
        return AblationResult.from_dict(d)
    if kind == "comparison":
        return ComparisonResult.from_dict(d)
    raise ValueError(f"{path} is not an ablation or comparison result")


def save_result(result, path) -> None:
    Path(path).write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# constructed datasets


def noise_images(n: int, seed: int = 0) -> list[LabeledImage]:
    """Balanced labels (``i % 10``) with iid uniform-noise RGB."""
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(n, 3, 32, 32), dtype=np.uint8)
    return [LabeledImage(i % 10, pixels[i]) for i in range(n)]
