"""Command-line entry point.

Subcommands: ``gen-maps``, ``dataset synth``, ``dataset analyze``,
``train``, ``eval``, ``ablate``, ``plot-trace``. Every value can come from
a ``--config`` file of dotted ``key=value`` lines; explicit flags override
file values, which override built-in defaults (the resolved config is
printed at startup, each key tagged with its source). ``ORIENTSTEER_SEED``
serves as a last-resort seed default. Every run writes a ``run.lock`` with
the fully resolved config, and rerunning with ``--config run.lock``
reproduces the run.

Exit codes: 0 success, 1 usage or validation error, 2 internal error.
"""

from __future__ import annotations

import argparse
import difflib
import os
import sys
import traceback

import numpy as np

from . import __version__
from .camera_geometry import CropRect, load_intrinsics, orientation_maps, write_maps
from .config import load_kv_file, write_run_lock
from .data_pipeline import (
    WindowDataset,
    load_drive,
    load_manifest,
    normalize_angle,
    split_dataset,
)
from .errors import OrientSteerError, ValidationError
from .evaluation import (
    ExperimentData,
    evaluate,
    export_histogram,
    export_trace,
    plot_trace_arrays,
    read_trace,
    run_fusion_ablation,
    run_input_comparison,
    run_loss_comparison,
    write_histogram_file,
)
from .losses import LossConfig, LossFamily
from .synthetic_track import TrackParams, generate_dataset, steering_histogram
from .training import (
    TrainConfig,
    load_checkpoint,
    train,
    train_config_from_mapping,
    train_config_to_mapping,
)

_COMMANDS = ("gen-maps", "dataset", "train", "eval", "ablate", "plot-trace")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 instead of argparse's exit 2
        raise _UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Config resolution


def _resolve(defaults, args, flag_keys, seed_keys=()):
    """Merge defaults < env seed < config file < flags; track provenance."""
    resolved = dict(defaults)
    source = {key: "default" for key in defaults}
    env_seed = os.environ.get("ORIENTSTEER_SEED")
    if env_seed is not None:
        for key in seed_keys:
            resolved[key] = env_seed
            source[key] = "env"
    if args.config:
        for key, value in load_kv_file(args.config).items():
            if key.startswith("run."):
                continue
            resolved[key] = value
            source[key] = "file"
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            resolved[key] = str(value)
            source[key] = "flag"
    for pair in getattr(args, "set", None) or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ValidationError(f"--set needs key=value, got {pair!r}")
        resolved[key.strip()] = value.strip()
        source[key.strip()] = "flag"
    for key in sorted(resolved):
        print(f"config {key}={resolved[key]} [{source[key]}]")
    return resolved


def _require(mapping, key):
    value = mapping.get(key, "")
    if not value:
        raise ValidationError(f"missing required config key {key} (or its flag)")
    return value


def _parse_crop(text: str) -> CropRect | None:
    if text in ("", "full"):
        return None
    parts = text.split(",")
    if len(parts) != 4:
        raise ValidationError(f"crop must be left,top,width,height or 'full', got {text!r}")
    left, top, width, height = (int(p) for p in parts)
    return CropRect(left=left, top=top, width=width, height=height)


def _parse_split(text: str) -> list[float]:
    try:
        return [float(p) for p in text.split(",") if p != ""]
    except ValueError as exc:
        raise ValidationError(f"bad split ratios {text!r}") from exc


# ---------------------------------------------------------------------------
# Subcommand implementations


def _cmd_gen_maps(args) -> int:
    defaults = {"genmaps.intrinsics": "", "genmaps.out": ""}
    resolved = _resolve(
        defaults, args, {"intrinsics": "genmaps.intrinsics", "out": "genmaps.out"}
    )
    k = load_intrinsics(_require(resolved, "genmaps.intrinsics"))
    out = _require(resolved, "genmaps.out")
    maps = orientation_maps(k)
    write_maps(maps, out)
    write_run_lock(out, "gen-maps", resolved, __version__)
    print(f"wrote {k.width}x{k.height} orientation maps to {out}")
    return 0


def _cmd_synth(args) -> int:
    defaults = {
        "synth.out": "",
        "synth.drives": "20",
        "synth.frames": "200",
        "synth.seed": "0",
        "synth.tail_alpha": "3.0",
        "synth.max_angle": "0.5",
        "synth.noise_std": "0.02",
        "synth.curve_scale": "1.0",
        "synth.image_size": "180x320",
    }
    flag_keys = {
        "out": "synth.out",
        "drives": "synth.drives",
        "frames": "synth.frames",
        "seed": "synth.seed",
        "tail_alpha": "synth.tail_alpha",
        "max_angle": "synth.max_angle",
        "noise_std": "synth.noise_std",
        "curve_scale": "synth.curve_scale",
        "image_size": "synth.image_size",
    }
    resolved = _resolve(defaults, args, flag_keys, seed_keys=("synth.seed",))
    out = _require(resolved, "synth.out")
    size = resolved["synth.image_size"].lower().split("x")
    if len(size) != 2:
        raise ValidationError(f"image_size must be HxW, got {resolved['synth.image_size']!r}")
    params = TrackParams(
        tail_alpha=float(resolved["synth.tail_alpha"]),
        max_angle=float(resolved["synth.max_angle"]),
        frames_per_drive=int(resolved["synth.frames"]),
        image_size=(int(size[0]), int(size[1])),
        noise_std=float(resolved["synth.noise_std"]),
        curve_scale=float(resolved["synth.curve_scale"]),
        seed=int(resolved["synth.seed"]),
    )
    manifest = generate_dataset(params, int(resolved["synth.drives"]), out)
    write_run_lock(out, "dataset synth", resolved, __version__)
    print(f"wrote manifest {manifest}")
    return 0


def _cmd_analyze(args) -> int:
    defaults = {"analyze.manifest": "", "analyze.bins": "41", "analyze.out": ""}
    resolved = _resolve(
        defaults,
        args,
        {"manifest": "analyze.manifest", "bins": "analyze.bins", "out": "analyze.out"},
    )
    manifest = _require(resolved, "analyze.manifest")
    out = resolved["analyze.out"] or (os.path.dirname(os.path.abspath(manifest)) or ".")
    drives = load_manifest(manifest)
    labels = np.array(
        [normalize_angle(rec.raw_steering) for drive in drives for rec in drive.records]
    )
    print(f"drives={len(drives)}")
    if labels.size == 0:
        print("labels: count=0")
        write_run_lock(out, "dataset analyze", resolved, __version__)
        return 0
    print(
        f"labels: count={labels.size} min={labels.min():.6g} max={labels.max():.6g} "
        f"mean={labels.mean():.6g} sd={labels.std():.6g}"
    )
    edges, counts = steering_histogram(labels, int(resolved["analyze.bins"]))
    os.makedirs(out, exist_ok=True)
    write_histogram_file(edges, counts, os.path.join(out, "label_histogram.csv"))
    write_run_lock(out, "dataset analyze", resolved, __version__)
    print(f"histogram written to {os.path.join(out, 'label_histogram.csv')}")
    return 0


_DATA_DEFAULTS = {
    "data.manifest": "",
    "data.crop": "full",
    "data.stride": "1",
    "data.split": "0.8,0.1,0.1",
    "data.seed": "",
    "data.seq_len": "",
}


def _load_experiment_data(resolved, fallback_seed: int):
    manifest = _require(resolved, "data.manifest")
    crop = _parse_crop(resolved["data.crop"])
    stride = int(resolved["data.stride"])
    split = _parse_split(resolved["data.split"])
    data_seed = int(resolved["data.seed"]) if resolved["data.seed"] else fallback_seed
    manifest_dir = os.path.dirname(os.path.abspath(manifest))
    drives = load_manifest(manifest)
    loaded = [load_drive(d, manifest_dir, crop) for d in drives]
    return split_dataset(loaded, split, data_seed), stride


def _check_seq_len(resolved, cfg: TrainConfig) -> None:
    if resolved["data.seq_len"] and int(resolved["data.seq_len"]) != cfg.model.seq_len:
        raise ValidationError(
            f"data.seq_len={resolved['data.seq_len']} != model.seq_len={cfg.model.seq_len}"
        )


def _cmd_train(args) -> int:
    defaults = dict(train_config_to_mapping(TrainConfig()))
    defaults.update(_DATA_DEFAULTS)
    defaults["train.threads"] = "1"  # CLI runs single-threaded unless asked
    flag_keys = {
        "manifest": "data.manifest",
        "crop": "data.crop",
        "seed": "train.seed",
        "out": "train.output_dir",
        "steps": "train.max_steps",
        "workers": "train.threads",
    }
    resolved = _resolve(defaults, args, flag_keys, seed_keys=("train.seed",))
    cfg = train_config_from_mapping(resolved)
    _check_seq_len(resolved, cfg)
    (train_drives, val_drives, _), stride = _load_experiment_data(resolved, cfg.seed)
    channels = cfg.model.in_channels
    train_ds = WindowDataset(train_drives, cfg.model.seq_len, stride, channels)
    val_ds = WindowDataset(val_drives, cfg.model.seq_len, stride, channels)
    result = train(cfg, train_ds, val_ds)
    write_run_lock(cfg.output_dir, "train", resolved, __version__)
    print(
        f"trained {cfg.max_steps} steps: best val accuracy {result.best_val_accuracy:.1%} "
        f"(loss {result.best_val_loss:.6g})"
    )
    print(f"checkpoints: {result.best_checkpoint} {result.final_checkpoint}")
    return 0


def _cmd_eval(args) -> int:
    defaults = {
        "eval.checkpoint": "",
        "eval.manifest": "",
        "eval.crop": "full",
        "eval.stride": "1",
        "eval.tol_deg": "5.0",
        "eval.out": "",
    }
    flag_keys = {
        "checkpoint": "eval.checkpoint",
        "manifest": "eval.manifest",
        "crop": "eval.crop",
        "stride": "eval.stride",
        "tol_deg": "eval.tol_deg",
        "out": "eval.out",
    }
    resolved = _resolve(defaults, args, flag_keys)
    model = load_checkpoint(_require(resolved, "eval.checkpoint"))
    manifest = _require(resolved, "eval.manifest")
    out = _require(resolved, "eval.out")
    crop = _parse_crop(resolved["eval.crop"])
    manifest_dir = os.path.dirname(os.path.abspath(manifest))
    drives = load_manifest(manifest)
    loaded = [load_drive(d, manifest_dir, crop) for d in drives]
    dataset = WindowDataset(
        loaded,
        model.config.seq_len,
        int(resolved["eval.stride"]),
        model.config.in_channels,
    )
    report = evaluate(model, dataset, tol_deg=float(resolved["eval.tol_deg"]))
    os.makedirs(out, exist_ok=True)
    export_trace(report, os.path.join(out, "trace.csv"))
    export_histogram(report, os.path.join(out, "prediction_histogram.csv"))
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"n: {report.n}\n")
        fh.write(f"tolerance_deg: {report.tolerance_deg:g}\n")
        fh.write(f"accuracy: {report.accuracy!r}\n")
        fh.write(f"sd: {report.sd!r}\n")
    with open(os.path.join(out, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write("n,tolerance_deg,accuracy,sd\n")
        fh.write(f"{report.n},{report.tolerance_deg!r},{report.accuracy!r},{report.sd!r}\n")
    write_run_lock(out, "eval", resolved, __version__)
    print(f"accuracy={report.accuracy:.4f} sd={report.sd:.6f} n={report.n}")
    return 0


def _cmd_ablate(args) -> int:
    defaults = dict(train_config_to_mapping(TrainConfig()))
    defaults.update(_DATA_DEFAULTS)
    defaults["train.threads"] = "1"
    defaults["ablate.mode"] = ""
    flag_keys = {
        "mode": "ablate.mode",
        "manifest": "data.manifest",
        "crop": "data.crop",
        "seed": "train.seed",
        "out": "train.output_dir",
        "steps": "train.max_steps",
        "workers": "train.threads",
    }
    resolved = _resolve(defaults, args, flag_keys, seed_keys=("train.seed",))
    mode = _require(resolved, "ablate.mode")
    if mode not in ("loss", "input", "fusion"):
        raise ValidationError(f"ablate mode must be loss, input, or fusion, got {mode!r}")
    cfg = train_config_from_mapping(resolved)
    _check_seq_len(resolved, cfg)
    (train_drives, val_drives, test_drives), stride = _load_experiment_data(resolved, cfg.seed)
    data = ExperimentData(
        train_drives, val_drives, test_drives, seq_len=cfg.model.seq_len, stride=stride
    )
    if mode == "loss":
        families = [
            LossConfig(LossFamily.MAE),
            LossConfig(LossFamily.MSE),
            LossConfig(LossFamily.STEERING_LOSS, cfg.loss.alpha, cfg.loss.gamma, 1.0),
            LossConfig(LossFamily.STEERING_LOSS2, cfg.loss.alpha, cfg.loss.gamma),
        ]
        table = run_loss_comparison(cfg, families, data)
    elif mode == "input":
        table = run_input_comparison(cfg, data)
    else:
        table = run_fusion_ablation(cfg, data)
    table.save(cfg.output_dir)
    write_run_lock(cfg.output_dir, "ablate", resolved, __version__)
    print(table.to_text(), end="")
    return 0


def _cmd_plot_trace(args) -> int:
    defaults = {"plot.trace": "", "plot.out": ""}
    resolved = _resolve(defaults, args, {"trace": "plot.trace", "out": "plot.out"})
    trace_path = _require(resolved, "plot.trace")
    out = resolved["plot.out"] or os.path.splitext(trace_path)[0] + ".png"
    _, truths, preds = read_trace(trace_path)
    plot_trace_arrays(truths, preds, out)
    write_run_lock(os.path.dirname(os.path.abspath(out)) or ".", "plot-trace", resolved, __version__)
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser assembly and dispatch


def build_parser() -> _Parser:
    parser = _Parser(prog="orientsteer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"orientsteer {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen-maps", parents=[], help="write orientation map grids")
    p.add_argument("--config")
    p.add_argument("--intrinsics")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_gen_maps)

    p_dataset = sub.add_parser("dataset", help="dataset generation and analysis")
    dsub = p_dataset.add_subparsers(dest="dataset_command", metavar="subcommand")
    p = dsub.add_parser("synth", help="render a synthetic driving dataset")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--drives", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tail-alpha", dest="tail_alpha", type=float)
    p.add_argument("--max-angle", dest="max_angle", type=float)
    p.add_argument("--noise-std", dest="noise_std", type=float)
    p.add_argument("--curve-scale", dest="curve_scale", type=float)
    p.add_argument("--image-size", dest="image_size")
    p.set_defaults(func=_cmd_synth)
    p = dsub.add_parser("analyze", help="label statistics and histogram")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--bins", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("train", help="train a steering model")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--crop")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--workers", type=int, help="compute threads (default 1, reproducible)")
    p.add_argument("--out")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--crop")
    p.add_argument("--stride", type=int)
    p.add_argument("--tol-deg", dest="tol_deg", type=float)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run a comparison experiment family")
    p.add_argument("--config")
    p.add_argument("--mode", choices=("loss", "input", "fusion"))
    p.add_argument("--manifest")
    p.add_argument("--crop")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--workers", type=int, help="compute threads (default 1, reproducible)")
    p.add_argument("--out")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("plot-trace", help="re-render a trace plot from its data file")
    p.add_argument("--config")
    p.add_argument("--trace")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_plot_trace)

    return parser


def dispatch(argv) -> int:
    """Parse and run one CLI invocation; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        first = next((a for a in argv if not a.startswith("-")), None)
        if first and first not in _COMMANDS:
            close = difflib.get_close_matches(first, _COMMANDS, n=1)
            if close:
                print(f"did you mean: {close[0]}?", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help/--version print and exit 0
        return int(exc.code or 0)
    func = getattr(args, "func", None)
    if func is None:
        parser.print_help()
        return 1
    try:
        return int(func(args) or 0)
    except OrientSteerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
