"""Metrics, evaluation reports, and the experiment harnesses.

Two headline metrics: tolerance accuracy (fraction of predictions within a
fixed angular threshold of ground truth, 5 degrees by default, boundary
inclusive) and the population standard deviation of the predictions. A
small SD on long-tail data usually means the model collapsed onto
near-zero angles, so SD is reported alongside accuracy everywhere.

Three harnesses reproduce the experiment families at desk scale: loss
comparison (MAE / MSE / the two cost-sensitive losses), input comparison
(RGB vs RGB plus orientation channels), and the fusion ablation (maps
appended after each conv layer). Each harness trains every variant from
the same seed and split, so rows differ only in the variable under study.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import os
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data_pipeline import LoadedDrive, WindowDataset
from .errors import ConfigMismatchError, ValidationError
from .losses import LossConfig
from .network import InjectPoint, SteeringModel
from .synthetic_track import steering_histogram
from .training import TrainConfig, load_checkpoint, train

DEFAULT_TOL_DEG = 5.0
DEFAULT_HIST_BINS = 41


def tolerance_accuracy(preds, truths, tol_deg: float = DEFAULT_TOL_DEG) -> float:
    """Fraction of samples with ``|pred - truth| <= tol_deg`` (in degrees)."""
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if preds.size == 0 or preds.size != truths.size:
        raise ValidationError(
            f"need equal nonzero lengths, got {preds.size} and {truths.size}"
        )
    if tol_deg <= 0:
        raise ValidationError(f"tolerance must be > 0 degrees, got {tol_deg}")
    return float(np.mean(np.abs(preds - truths) <= tol_deg * np.pi / 180.0))


def prediction_sd(preds) -> float:
    """Population standard deviation of the predictions.

    Accumulates with exactly-rounded summation (``math.fsum``) so the
    result is independent of summation order and reproducible bit-for-bit
    against a plain per-element loop.
    """
    preds = np.asarray(preds, dtype=np.float64)
    if preds.size == 0:
        raise ValidationError("prediction SD of an empty set is undefined")
    n = preds.size
    mean = math.fsum(preds) / n
    dev = preds - mean
    return math.sqrt(math.fsum(dev * dev) / n)


@dataclass
class EvalReport:
    accuracy: float
    sd: float
    n: int
    tolerance_deg: float
    timestamps: np.ndarray
    truths: np.ndarray
    predictions: np.ndarray
    histogram_edges: np.ndarray
    histogram_counts: np.ndarray


def evaluate(
    model: SteeringModel,
    dataset: WindowDataset,
    tol_deg: float = DEFAULT_TOL_DEG,
    batch_size: int = 16,
    n_bins: int = DEFAULT_HIST_BINS,
) -> EvalReport:
    """Run the model over every window; deterministic and read-only.

    The trace is ordered by drive and then timestamp (the dataset's
    iteration order).
    """
    if dataset.channels != model.config.in_channels:
        raise ConfigMismatchError(
            f"dataset provides {dataset.channels}-channel windows but the model "
            f"expects {model.config.in_channels}"
        )
    if dataset.seq_len != model.config.seq_len:
        raise ConfigMismatchError(
            f"dataset seq_len {dataset.seq_len} != model seq_len {model.config.seq_len}"
        )
    if len(dataset) == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    maps = dataset.shared_maps() if model.config.inject_at.conv_index is not None else None

    n = len(dataset)
    preds = np.empty(n, dtype=np.float64)
    truths = np.empty(n, dtype=np.float64)
    timestamps = np.empty(n, dtype=np.float64)
    for start in range(0, n, batch_size):
        idx = list(range(start, min(start + batch_size, n)))
        frames, targets = dataset.batch(idx)
        preds[idx] = model.predict_batch(frames, maps)
        truths[idx] = targets
        for pos, i in enumerate(idx):
            timestamps[i] = dataset.window_end_timestamp(i)
    edges, counts = steering_histogram(preds, n_bins)
    return EvalReport(
        accuracy=tolerance_accuracy(preds, truths, tol_deg),
        sd=prediction_sd(preds),
        n=n,
        tolerance_deg=tol_deg,
        timestamps=timestamps,
        truths=truths,
        predictions=preds,
        histogram_edges=edges,
        histogram_counts=counts,
    )


def plot_trace_arrays(truths, predictions, png_path) -> None:
    fig, ax = plt.subplots(figsize=(10, 4))
    ax.plot(truths, label="ground truth", lw=1.2)
    ax.plot(predictions, label="prediction", lw=1.0)
    ax.set_xlabel("window")
    ax.set_ylabel("steering angle [rad]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=110)
    plt.close(fig)


def export_trace(report: EvalReport, path) -> None:
    """Write the per-window trace as delimited text plus a line plot.

    The text file is the contract (round-trips exactly); the plot next to
    it (same name, ``.png``) is cosmetic.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("timestamp,truth,prediction\n")
        for t, y, p in zip(report.timestamps, report.truths, report.predictions):
            fh.write(f"{float(t)!r},{float(y)!r},{float(p)!r}\n")
    plot_trace_arrays(report.truths, report.predictions, os.path.splitext(path)[0] + ".png")


def read_trace(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Parse a trace file back into (timestamps, truths, predictions)."""
    data = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=np.float64)
    data = np.atleast_2d(data)
    return data[:, 0], data[:, 1], data[:, 2]


def write_histogram_file(edges, counts, path, plot: bool = True) -> None:
    """Write histogram data (``bin_left,bin_right,count``) plus a bar plot."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("bin_left,bin_right,count\n")
        for left, right, count in zip(edges[:-1], edges[1:], counts):
            fh.write(f"{float(left)!r},{float(right)!r},{int(count)}\n")
    if plot:
        centers = 0.5 * (edges[:-1] + edges[1:])
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.bar(centers, counts, width=(edges[1] - edges[0]) * 0.9)
        ax.set_xlabel("steering angle [rad]")
        ax.set_ylabel("count")
        fig.tight_layout()
        fig.savefig(os.path.splitext(path)[0] + ".png", dpi=110)
        plt.close(fig)


def read_histogram_file(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse a histogram file back into (edges, counts)."""
    data = np.atleast_2d(np.genfromtxt(path, delimiter=",", skip_header=1, dtype=np.float64))
    edges = np.concatenate([data[:, 0], data[-1:, 1]])
    return edges, data[:, 2].astype(np.int64)


def export_histogram(report: EvalReport, path) -> None:
    """Write the prediction histogram data plus a bar plot alongside."""
    write_histogram_file(report.histogram_edges, report.histogram_counts, path)


# ---------------------------------------------------------------------------
# Experiment harnesses


@dataclass
class ExperimentData:
    """Drive-level train/val/test split shared by every harness row."""

    train: list[LoadedDrive]
    val: list[LoadedDrive]
    test: list[LoadedDrive]
    seq_len: int = 8
    stride: int = 1

    def windows(self, channels: int) -> tuple[WindowDataset, WindowDataset, WindowDataset]:
        return (
            WindowDataset(self.train, self.seq_len, self.stride, channels),
            WindowDataset(self.val, self.seq_len, self.stride, channels),
            WindowDataset(self.test, self.seq_len, self.stride, channels),
        )

    def fingerprint(self) -> str:
        """Hash of the drive ids per split; identical rows share it."""
        text = "|".join(
            ",".join(drive.drive_id for drive in split)
            for split in (self.train, self.val, self.test)
        )
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    accuracy: float
    sd: float
    n: int
    split_fingerprint: str


@dataclass
class ComparisonTable:
    title: str
    tolerance_deg: float
    rows: list[ComparisonRow] = field(default_factory=list)

    def to_text(self) -> str:
        width = max([len("variant")] + [len(row.label) for row in self.rows])
        lines = [
            f"{self.title} (tolerance {self.tolerance_deg:g} deg)",
            f"{'variant'.ljust(width)}  accuracy      sd       n  split",
        ]
        for row in self.rows:
            lines.append(
                f"{row.label.ljust(width)}  {row.accuracy:7.1%}  {row.sd:7.4f}  "
                f"{row.n:6d}  {row.split_fingerprint}"
            )
        return "\n".join(lines) + "\n"

    def save(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
            fh.write(self.to_text())
        with open(os.path.join(out_dir, "report.csv"), "w", encoding="utf-8") as fh:
            fh.write("variant,accuracy,sd,n,split_fingerprint\n")
            for row in self.rows:
                fh.write(
                    f"{row.label},{row.accuracy!r},{row.sd!r},{row.n},"
                    f"{row.split_fingerprint}\n"
                )


def _slug(label: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in label.lower())


def _run_variant(
    label: str,
    cfg: TrainConfig,
    data: ExperimentData,
    tol_deg: float,
) -> tuple[ComparisonRow, EvalReport]:
    train_ds, val_ds, test_ds = data.windows(cfg.model.in_channels)
    result = train(cfg, train_ds, val_ds)
    best = load_checkpoint(result.best_checkpoint)
    report = evaluate(best, test_ds, tol_deg=tol_deg)
    row = ComparisonRow(
        label=label,
        accuracy=report.accuracy,
        sd=report.sd,
        n=report.n,
        split_fingerprint=data.fingerprint(),
    )
    return row, report


def _variant_cfg(base: TrainConfig, label: str, **changes) -> TrainConfig:
    out_dir = os.path.join(base.output_dir, _slug(label))
    return dataclasses.replace(base, output_dir=out_dir, **changes)


def run_loss_comparison(
    base_cfg: TrainConfig,
    families: list[LossConfig],
    data: ExperimentData,
    tol_deg: float = DEFAULT_TOL_DEG,
) -> ComparisonTable:
    """Train one model per loss family from the same seed and split."""
    if not families:
        raise ValidationError("need at least one loss family to compare")
    table = ComparisonTable("loss comparison", tol_deg)
    for loss_cfg in families:
        label = loss_cfg.family.value
        cfg = _variant_cfg(base_cfg, label, loss=loss_cfg)
        row, _ = _run_variant(label, cfg, data, tol_deg)
        table.rows.append(row)
    return table


def run_input_comparison(
    base_cfg: TrainConfig, data: ExperimentData, tol_deg: float = DEFAULT_TOL_DEG
) -> ComparisonTable:
    """RGB-only vs RGB + orientation channels, all else seed-matched."""
    table = ComparisonTable("input comparison", tol_deg)
    variants = [
        ("RGB", dataclasses.replace(base_cfg.model, in_channels=3, inject_at=InjectPoint.NONE)),
        (
            "RGB+HA+VA",
            dataclasses.replace(base_cfg.model, in_channels=5, inject_at=InjectPoint.INPUT),
        ),
    ]
    for label, model_cfg in variants:
        cfg = _variant_cfg(base_cfg, label, model=model_cfg)
        row, _ = _run_variant(label, cfg, data, tol_deg)
        table.rows.append(row)
    return table


def run_fusion_ablation(
    base_cfg: TrainConfig, data: ExperimentData, tol_deg: float = DEFAULT_TOL_DEG
) -> ComparisonTable:
    """Inject orientation maps at the input and after each conv layer."""
    table = ComparisonTable("fusion ablation", tol_deg)
    points = [
        InjectPoint.INPUT,
        InjectPoint.CONV1,
        InjectPoint.CONV2,
        InjectPoint.CONV3,
        InjectPoint.CONV4,
        InjectPoint.CONV5,
    ]
    for point in points:
        in_channels = 5 if point is InjectPoint.INPUT else 3
        model_cfg = dataclasses.replace(
            base_cfg.model, in_channels=in_channels, inject_at=point
        )
        cfg = _variant_cfg(base_cfg, point.value, model=model_cfg)
        row, _ = _run_variant(point.value, cfg, data, tol_deg)
        table.rows.append(row)
    return table
