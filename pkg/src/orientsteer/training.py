"""Deterministic training loop binding data, model, and loss.

Given the same config and seed, two runs produce identical histories and
bit-identical checkpoints: model init is seeded, the mini-batch order is a
pure function of (seed, epoch), and no other randomness enters the loop.
Set ``threads=1`` for the strict single-threaded mode used by
reproducibility tests.

Checkpoints are a small versioned binary container: a magic tag and
format version, the model config as a key=value text block, then named
parameter arrays (row-major little-endian float32). The loader rebuilds
the model from the embedded config and rejects any version, name, or
shape mismatch.
"""

from __future__ import annotations

import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .data_pipeline import WindowDataset
from .errors import ConfigMismatchError, FormatError, TrainingDivergedError, ValidationError
from .losses import LossConfig, LossFamily
from .network import InjectPoint, ModelConfig, SteeringModel, build_model

EVAL_TOL_DEG = 5.0  # tolerance threshold used for the best-checkpoint metric

CHECKPOINT_MAGIC = b"OSTRCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adam"
    learning_rate: float = 1e-4
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.name not in ("adam", "sgd"):
            raise ValidationError(f"unknown optimizer {self.name!r} (use adam or sgd)")
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValidationError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=lambda: LossConfig(LossFamily.STEERING_LOSS2))
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 16
    max_steps: int = 1000
    eval_every: int = 50
    grad_clip_norm: float = 1.0
    seed: int = 0
    output_dir: str = "runs/default"
    threads: int = 0  # 0 = library default; 1 = strict single-threaded mode

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps < 1:
            raise ValidationError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.eval_every < 1:
            raise ValidationError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.grad_clip_norm <= 0:
            raise ValidationError(f"grad_clip_norm must be > 0, got {self.grad_clip_norm}")
        if self.threads < 0:
            raise ValidationError(f"threads must be >= 0, got {self.threads}")


@dataclass(frozen=True)
class HistoryRecord:
    step: int
    split: str
    metric: str
    value: float


@dataclass
class TrainHistory:
    records: list[HistoryRecord] = field(default_factory=list)

    def add(self, step: int, split: str, metric: str, value: float) -> None:
        self.records.append(HistoryRecord(step, split, metric, float(value)))

    def series(self, split: str, metric: str) -> tuple[list[int], list[float]]:
        steps, values = [], []
        for rec in self.records:
            if rec.split == split and rec.metric == metric:
                steps.append(rec.step)
                values.append(rec.value)
        return steps, values

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,split,metric,value\n")
            for rec in self.records:
                fh.write(f"{rec.step},{rec.split},{rec.metric},{rec.value!r}\n")

    @staticmethod
    def load(path) -> "TrainHistory":
        history = TrainHistory()
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != "step,split,metric,value":
                raise FormatError(f"{path}: unexpected history header {header!r}")
            for lineno, line in enumerate(fh, start=2):
                parts = line.strip().split(",")
                if len(parts) != 4:
                    raise FormatError(f"{path}: line {lineno}: expected 4 fields")
                history.add(int(parts[0]), parts[1], parts[2], float(parts[3]))
        return history


# ---------------------------------------------------------------------------
# Loss on tensors (training-time mirror of losses.loss_value)


def torch_loss(preds: torch.Tensor, truths: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    family = cfg.family
    if family is LossFamily.MAE:
        return (truths - preds).abs().mean()
    if family is LossFamily.MSE:
        return ((truths - preds) ** 2).mean()
    weight = 1.0 + cfg.alpha * truths.abs() ** cfg.gamma
    if family is LossFamily.STEERING_LOSS:
        weight = weight ** cfg.effective_delta()
        return 0.5 * (weight * (truths - preds) ** 2).mean()
    if family is LossFamily.STEERING_LOSS2:
        per_sample = torch.nn.functional.smooth_l1_loss(preds, truths, reduction="none")
        return (weight * per_sample).mean()
    raise ValidationError(f"unknown loss family {family!r}")


def clip_gradients(model: torch.nn.Module, max_norm: float) -> float:
    """Clip the global gradient norm in place; returns the post-clip norm."""
    torch.nn.utils.clip_grad_norm_(model.parameters(), max_norm)
    total = 0.0
    for param in model.parameters():
        if param.grad is not None:
            total += float(param.grad.pow(2).sum())
    return total**0.5


def _make_optimizer(model: torch.nn.Module, cfg: OptimizerConfig) -> torch.optim.Optimizer:
    if cfg.name == "adam":
        return torch.optim.Adam(
            model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
        )
    return torch.optim.SGD(
        model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )


# ---------------------------------------------------------------------------
# Checkpoint container


def _model_config_mapping(cfg: ModelConfig) -> dict[str, str]:
    return {
        "model.in_channels": str(cfg.in_channels),
        "model.seq_len": str(cfg.seq_len),
        "model.lstm_hidden": str(cfg.lstm_hidden),
        "model.lstm_layers": str(cfg.lstm_layers),
        "model.inject_at": cfg.inject_at.value,
        "model.fc_dim": str(cfg.fc_dim),
    }


def model_config_from_mapping(mapping: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for key, cast in (
        ("in_channels", int),
        ("seq_len", int),
        ("lstm_hidden", int),
        ("lstm_layers", int),
        ("fc_dim", int),
    ):
        raw = mapping.get(f"model.{key}")
        if raw is not None:
            kwargs[key] = cast(raw)
    inject = mapping.get("model.inject_at")
    if inject is not None:
        kwargs["inject_at"] = InjectPoint(inject)
    return ModelConfig(**kwargs)


def loss_config_from_mapping(mapping: dict[str, str]) -> LossConfig:
    family = mapping.get("loss.family", LossFamily.STEERING_LOSS2.value)
    kwargs = {}
    for key in ("alpha", "gamma"):
        raw = mapping.get(f"loss.{key}")
        if raw is not None:
            kwargs[key] = float(raw)
    delta = mapping.get("loss.delta")
    if delta not in (None, "", "none"):
        kwargs["delta"] = float(delta)
    try:
        return LossConfig(LossFamily(family), **kwargs)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc


_TRAIN_KEYS = {
    "train.batch_size": ("batch_size", int),
    "train.max_steps": ("max_steps", int),
    "train.eval_every": ("eval_every", int),
    "train.grad_clip_norm": ("grad_clip_norm", float),
    "train.seed": ("seed", int),
    "train.output_dir": ("output_dir", str),
    "train.threads": ("threads", int),
}

_OPT_KEYS = {
    "optimizer.name": ("name", str),
    "optimizer.learning_rate": ("learning_rate", float),
    "optimizer.weight_decay": ("weight_decay", float),
}

_MODEL_KEYS = {
    "model.in_channels",
    "model.seq_len",
    "model.lstm_hidden",
    "model.lstm_layers",
    "model.inject_at",
    "model.fc_dim",
}

_LOSS_KEYS = {"loss.family", "loss.alpha", "loss.gamma", "loss.delta"}


def train_config_from_mapping(mapping: dict[str, str]) -> TrainConfig:
    """Build a TrainConfig from dotted config keys; unknown keys are errors.

    ``data.*`` keys are the data pipeline's business and are ignored here.
    """
    known = _MODEL_KEYS | _LOSS_KEYS | set(_TRAIN_KEYS) | set(_OPT_KEYS)
    foreign = ("data.", "run.", "ablate.")
    unknown = [
        key
        for key in mapping
        if key not in known and not any(key.startswith(prefix) for prefix in foreign)
    ]
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    try:
        model = model_config_from_mapping(mapping)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    loss = loss_config_from_mapping(mapping)
    opt_kwargs = {}
    for key, (name, cast) in _OPT_KEYS.items():
        if key in mapping:
            opt_kwargs[name] = cast(mapping[key])
    train_kwargs = {}
    for key, (name, cast) in _TRAIN_KEYS.items():
        if key in mapping:
            train_kwargs[name] = cast(mapping[key])
    return TrainConfig(
        model=model, loss=loss, optimizer=OptimizerConfig(**opt_kwargs), **train_kwargs
    )


def train_config_to_mapping(cfg: TrainConfig) -> dict[str, str]:
    """Fully resolved dotted key=value view of a TrainConfig."""
    mapping = dict(_model_config_mapping(cfg.model))
    mapping["loss.family"] = cfg.loss.family.value
    mapping["loss.alpha"] = repr(cfg.loss.alpha)
    mapping["loss.gamma"] = repr(cfg.loss.gamma)
    if cfg.loss.delta is not None:
        mapping["loss.delta"] = repr(cfg.loss.delta)
    mapping["optimizer.name"] = cfg.optimizer.name
    mapping["optimizer.learning_rate"] = repr(cfg.optimizer.learning_rate)
    mapping["optimizer.weight_decay"] = repr(cfg.optimizer.weight_decay)
    mapping["train.batch_size"] = str(cfg.batch_size)
    mapping["train.max_steps"] = str(cfg.max_steps)
    mapping["train.eval_every"] = str(cfg.eval_every)
    mapping["train.grad_clip_norm"] = repr(cfg.grad_clip_norm)
    mapping["train.seed"] = str(cfg.seed)
    mapping["train.output_dir"] = cfg.output_dir
    mapping["train.threads"] = str(cfg.threads)
    return mapping


def save_checkpoint(model: SteeringModel, path) -> None:
    """Write the model's config and parameters to a versioned binary file."""
    config_text = "".join(
        f"{key}={value}\n" for key, value in _model_config_mapping(model.config).items()
    )
    config_bytes = config_text.encode("utf-8")
    state = model.state_dict()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(config_bytes)))
        fh.write(config_bytes)
        fh.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            name_bytes = name.encode("utf-8")
            array = tensor.detach().numpy().astype("<f4")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<I", array.ndim))
            for dim in array.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(array.tobytes(order="C"))


def load_checkpoint(path) -> SteeringModel:
    """Load a checkpoint; raises ``FormatError`` on any mismatch."""

    def read_exact(fh, count: int) -> bytes:
        data = fh.read(count)
        if len(data) != count:
            raise FormatError(f"{path}: truncated checkpoint")
        return data

    with open(path, "rb") as fh:
        if read_exact(fh, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not an orientsteer checkpoint")
        (version,) = struct.unpack("<I", read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise FormatError(
                f"{path}: unsupported checkpoint version {version} "
                f"(expected {CHECKPOINT_VERSION})"
            )
        (config_len,) = struct.unpack("<I", read_exact(fh, 4))
        mapping = {}
        for line in read_exact(fh, config_len).decode("utf-8").splitlines():
            if line:
                key, _, value = line.partition("=")
                mapping[key] = value
        try:
            config = model_config_from_mapping(mapping)
        except (ValueError, KeyError) as exc:
            raise FormatError(f"{path}: bad embedded config: {exc}") from exc
        model = build_model(config, seed=0)
        state = model.state_dict()
        (n_arrays,) = struct.unpack("<I", read_exact(fh, 4))
        if n_arrays != len(state):
            raise FormatError(
                f"{path}: has {n_arrays} arrays, model expects {len(state)}"
            )
        loaded = {}
        for _ in range(n_arrays):
            (name_len,) = struct.unpack("<I", read_exact(fh, 4))
            name = read_exact(fh, name_len).decode("utf-8")
            if name not in state:
                raise FormatError(f"{path}: unknown parameter {name!r}")
            (ndim,) = struct.unpack("<I", read_exact(fh, 4))
            shape = tuple(
                struct.unpack("<I", read_exact(fh, 4))[0] for _ in range(ndim)
            )
            expected = tuple(state[name].shape)
            if shape != expected:
                raise FormatError(
                    f"{path}: parameter {name!r} has shape {shape}, expected {expected}"
                )
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            data = np.frombuffer(read_exact(fh, 4 * count), dtype="<f4")
            loaded[name] = torch.from_numpy(data.reshape(shape).copy())
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after parameter data")
    model.load_state_dict(loaded)
    return model


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainResult:
    model: SteeringModel
    history: TrainHistory
    best_checkpoint: str
    final_checkpoint: str
    best_val_accuracy: float
    best_val_loss: float


def _dataset_loss_and_preds(
    model: SteeringModel, dataset: WindowDataset, loss_cfg: LossConfig, maps, batch_size: int
) -> tuple[float, np.ndarray, np.ndarray]:
    """Full-dataset loss plus (predictions, targets), without gradients."""
    preds = np.empty(len(dataset), dtype=np.float64)
    targets = np.empty(len(dataset), dtype=np.float64)
    total = 0.0
    with torch.inference_mode():
        for start in range(0, len(dataset), batch_size):
            idx = range(start, min(start + batch_size, len(dataset)))
            frames, batch_targets = dataset.batch(idx)
            x = torch.from_numpy(frames)
            t = torch.from_numpy(batch_targets.astype(np.float32))
            p = model(x, maps)
            total += float(torch_loss(p, t, loss_cfg)) * len(batch_targets)
            preds[idx.start : idx.stop] = p.numpy()
            targets[idx.start : idx.stop] = batch_targets
    return total / len(dataset), preds, targets


def _tolerance_accuracy(preds: np.ndarray, truths: np.ndarray, tol_deg: float) -> float:
    return float(np.mean(np.abs(preds - truths) <= tol_deg * np.pi / 180.0))


def train(
    cfg: TrainConfig,
    train_set: WindowDataset,
    val_set: WindowDataset,
    early_stop_train_loss: float | None = None,
) -> TrainResult:
    """Train a fresh model; returns the model, history, and checkpoint paths.

    Saves ``best.ckpt`` (highest validation tolerance accuracy, ties broken
    by lower validation loss) and ``final.ckpt`` under ``cfg.output_dir``,
    plus ``history.csv``. ``early_stop_train_loss`` stops the run once the
    full-training-set loss (measured at the eval cadence) drops below it.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValidationError("train and validation sets must be nonempty")
    for name, dataset in (("train", train_set), ("val", val_set)):
        if dataset.channels != cfg.model.in_channels:
            raise ConfigMismatchError(
                f"{name} set has {dataset.channels} channels, model wants "
                f"{cfg.model.in_channels}"
            )
        if dataset.seq_len != cfg.model.seq_len:
            raise ConfigMismatchError(
                f"{name} set has seq_len {dataset.seq_len}, model wants {cfg.model.seq_len}"
            )
    if cfg.threads > 0:
        torch.set_num_threads(cfg.threads)
    os.makedirs(cfg.output_dir, exist_ok=True)

    maps = None
    if cfg.model.inject_at.conv_index is not None:
        maps = train_set.shared_maps()

    model = build_model(cfg.model, cfg.seed)
    optimizer = _make_optimizer(model, cfg.optimizer)
    history = TrainHistory()
    best_path = os.path.join(cfg.output_dir, "best.ckpt")
    final_path = os.path.join(cfg.output_dir, "final.ckpt")
    history_path = os.path.join(cfg.output_dir, "history.csv")
    best_key: tuple[float, float] | None = None  # (accuracy, -val_loss)
    best_acc, best_loss = float("nan"), float("nan")

    step = 0
    epoch = 0
    stop = False
    while not stop:
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        for start in range(0, len(order), cfg.batch_size):
            step += 1
            t0 = time.perf_counter()
            indices = order[start : start + cfg.batch_size]
            frames, targets = train_set.batch(indices)
            x = torch.from_numpy(frames)
            t = torch.from_numpy(targets.astype(np.float32))
            optimizer.zero_grad(set_to_none=True)
            loss = torch_loss(model(x, maps), t, cfg.loss)
            loss_value = float(loss.detach())
            if not np.isfinite(loss_value):
                history.save(history_path)
                raise TrainingDivergedError(step, indices.tolist(), loss_value)
            loss.backward()
            clip_gradients(model, cfg.grad_clip_norm)
            optimizer.step()
            history.add(step, "train", "loss", loss_value)
            history.add(step, "train", "step_seconds", time.perf_counter() - t0)

            if step % cfg.eval_every == 0 or step == cfg.max_steps:
                val_loss, val_preds, val_targets = _dataset_loss_and_preds(
                    model, val_set, cfg.loss, maps, cfg.batch_size
                )
                accuracy = _tolerance_accuracy(val_preds, val_targets, EVAL_TOL_DEG)
                sd = float(np.std(val_preds))
                history.add(step, "val", "loss", val_loss)
                history.add(step, "val", "accuracy", accuracy)
                history.add(step, "val", "sd", sd)
                key = (accuracy, -val_loss)
                if best_key is None or key > best_key:
                    best_key = key
                    best_acc, best_loss = accuracy, val_loss
                    save_checkpoint(model, best_path)
                if early_stop_train_loss is not None:
                    full_loss, _, _ = _dataset_loss_and_preds(
                        model, train_set, cfg.loss, maps, cfg.batch_size
                    )
                    history.add(step, "train_full", "loss", full_loss)
                    if full_loss < early_stop_train_loss:
                        stop = True
            if step >= cfg.max_steps:
                stop = True
            if stop:
                break
        epoch += 1

    save_checkpoint(model, final_path)
    if best_key is None:  # eval cadence never hit (max_steps < eval_every)
        save_checkpoint(model, best_path)
    history.save(history_path)
    return TrainResult(model, history, best_path, final_path, best_acc, best_loss)
