"""Dataset ingestion and preprocessing.

A dataset is described by a line-oriented manifest. A header line starts
each drive section and every following record line names one frame:

    drive=<drive_id> intrinsics=<relative path to intrinsics file>
    <image path>,<timestamp seconds>,<raw steering>

Paths are relative to the manifest's directory. The same drive id may
appear in several sections; records are grouped by id in file order.
Raw steering values live in [-1000*pi, 1000*pi] and are scaled by 1/1000
into real angles in [-pi, pi] (left turns negative).

Preprocessing follows the model's input contract: crop away sky/hood,
bilinear-resize to 200x66, and keep the camera intrinsics consistent with
both operations so orientation maps can be recomputed for the processed
frames. Sequence windows never span drive boundaries and their target is
the angle of the last (most recent) frame.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import cv2
import numpy as np

from .camera_geometry import (
    CameraIntrinsics,
    CropRect,
    OrientationMaps,
    adjust_intrinsics,
    full_frame,
    load_intrinsics,
    orientation_maps,
)
from .errors import FormatError, ValidationError
from .network import FRAME_HEIGHT, FRAME_WIDTH

RAW_STEERING_LIMIT = 1000.0 * math.pi


@dataclass(frozen=True)
class DriveRecord:
    image_path: str
    timestamp: float
    raw_steering: float
    drive_id: str


@dataclass
class Drive:
    """One contiguous recording: ordered records plus its camera file."""

    drive_id: str
    intrinsics_path: str
    records: list[DriveRecord] = field(default_factory=list)


@dataclass(frozen=True)
class SequenceWindow:
    """``seq_len`` consecutive preprocessed frames plus the last frame's angle."""

    frames: np.ndarray  # [T, C, FRAME_HEIGHT, FRAME_WIDTH] float32
    target: float  # radians, in [-pi, pi]
    drive_id: str
    end_timestamp: float


def normalize_angle(raw: float) -> float:
    """Scale a raw steering value into radians: ``raw / 1000``."""
    if not math.isfinite(raw) or abs(raw) > RAW_STEERING_LIMIT:
        raise ValidationError(
            f"raw steering {raw!r} outside [-1000*pi, 1000*pi]"
        )
    return raw / 1000.0


def load_manifest(path) -> list[Drive]:
    """Parse a manifest into drives, grouped by id and validated."""
    drives: dict[str, Drive] = {}
    current: Drive | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw_line in enumerate(fh, start=1):
            line = raw_line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("drive="):
                tokens = line.split()
                header = {}
                for token in tokens:
                    key, sep, value = token.partition("=")
                    if not sep or not value:
                        raise FormatError(f"{path}: line {lineno}: bad header token {token!r}")
                    header[key] = value
                if "drive" not in header or "intrinsics" not in header:
                    raise FormatError(
                        f"{path}: line {lineno}: header needs drive= and intrinsics="
                    )
                drive_id = header["drive"]
                existing = drives.get(drive_id)
                if existing is None:
                    current = Drive(drive_id, header["intrinsics"])
                    drives[drive_id] = current
                elif existing.intrinsics_path != header["intrinsics"]:
                    raise FormatError(
                        f"{path}: line {lineno}: drive {drive_id!r} re-declared with a "
                        f"different intrinsics file"
                    )
                else:
                    current = existing
                continue
            if current is None:
                raise FormatError(f"{path}: line {lineno}: record before any drive= header")
            fields = line.split(",")
            if len(fields) != 3:
                raise FormatError(
                    f"{path}: line {lineno}: expected image,timestamp,steering, got {line!r}"
                )
            try:
                timestamp = float(fields[1])
                steering = float(fields[2])
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: bad number in {line!r}") from exc
            current.records.append(
                DriveRecord(fields[0].strip(), timestamp, steering, current.drive_id)
            )

    problems = []
    for drive in drives.values():
        for rec in drive.records:
            if not math.isfinite(rec.raw_steering) or abs(rec.raw_steering) > RAW_STEERING_LIMIT:
                problems.append(
                    f"drive {drive.drive_id}: {rec.image_path}: raw steering "
                    f"{rec.raw_steering} outside [-1000*pi, 1000*pi]"
                )
        times = [rec.timestamp for rec in drive.records]
        for a, b, rec in zip(times, times[1:], drive.records[1:]):
            if not b > a:
                problems.append(
                    f"drive {drive.drive_id}: {rec.image_path}: timestamp {b} "
                    f"not increasing (previous {a})"
                )
    if problems:
        raise ValidationError("manifest invariant violations:\n  " + "\n  ".join(problems))
    return list(drives.values())


def write_manifest(path, drives: list[Drive]) -> None:
    """Write drives back out in the manifest format parsed above."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# orientsteer manifest\n")
        for drive in drives:
            fh.write(f"drive={drive.drive_id} intrinsics={drive.intrinsics_path}\n")
            for rec in drive.records:
                fh.write(
                    f"{rec.image_path},{float(rec.timestamp)!r},"
                    f"{float(rec.raw_steering)!r}\n"
                )


def preprocess_frame(
    image: np.ndarray, crop: CropRect, k: CameraIntrinsics
) -> tuple[np.ndarray, CameraIntrinsics]:
    """Crop, bilinear-resize to 200x66, and adjust the intrinsics to match.

    ``image`` is HxWx3, either uint8 or float in [0, 1]. Returns
    (frame [3, 66, 200] float32 in [0, 1], adjusted intrinsics).
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
    if image.shape[0] != k.height or image.shape[1] != k.width:
        raise ValueError(
            f"image is {image.shape[1]}x{image.shape[0]} but intrinsics say "
            f"{k.width}x{k.height}"
        )
    if crop.left + crop.width > k.width or crop.top + crop.height > k.height:
        raise ValueError(f"crop {crop} outside the {k.width}x{k.height} frame")
    if image.dtype == np.uint8:
        image = image.astype(np.float32) / 255.0
    else:
        image = image.astype(np.float32, copy=False)
    sub = image[crop.top : crop.top + crop.height, crop.left : crop.left + crop.width]
    if (crop.width, crop.height) == (FRAME_WIDTH, FRAME_HEIGHT):
        resized = sub.copy()  # already at target size; skip the resampler
    else:
        resized = cv2.resize(sub, (FRAME_WIDTH, FRAME_HEIGHT), interpolation=cv2.INTER_LINEAR)
    scale = (FRAME_WIDTH / crop.width, FRAME_HEIGHT / crop.height)
    adjusted = adjust_intrinsics(k, crop, scale)
    return np.ascontiguousarray(resized.transpose(2, 0, 1)), adjusted


def attach_orientation_channels(image: np.ndarray, maps: OrientationMaps) -> np.ndarray:
    """Append normalized HA/VA channels: [3, 66, 200] -> [5, 66, 200].

    Channel order is R, G, B, HA, VA with the angle channels scaled by
    2/pi into (-1, 1).
    """
    image = np.asarray(image, dtype=np.float32)
    if image.shape != (3, FRAME_HEIGHT, FRAME_WIDTH):
        raise ValueError(f"expected image [3, {FRAME_HEIGHT}, {FRAME_WIDTH}], got {image.shape}")
    if maps.shape != (FRAME_HEIGHT, FRAME_WIDTH):
        raise ValueError(f"expected maps at {FRAME_HEIGHT}x{FRAME_WIDTH}, got {maps.shape}")
    return np.concatenate([image, maps.normalized()], axis=0)


@dataclass
class LoadedDrive:
    """A drive's frames after preprocessing, ready for windowing."""

    drive_id: str
    frames: np.ndarray  # [N, 3, 66, 200] float32
    angles: np.ndarray  # [N] float64 radians
    timestamps: np.ndarray  # [N] float64
    intrinsics: CameraIntrinsics  # adjusted to the processed frames
    maps: OrientationMaps  # at 66x200

    def __len__(self) -> int:
        return len(self.angles)


def load_drive(drive: Drive, manifest_dir, crop: CropRect | None = None) -> LoadedDrive:
    """Read and preprocess every frame of ``drive``.

    ``crop=None`` uses the full frame. Image and intrinsics paths are
    resolved relative to ``manifest_dir``.
    """
    k = load_intrinsics(os.path.join(manifest_dir, drive.intrinsics_path))
    crop = crop or full_frame(k)
    frames = []
    adjusted = None
    for rec in drive.records:
        img_path = os.path.join(manifest_dir, rec.image_path)
        bgr = cv2.imread(img_path, cv2.IMREAD_COLOR)
        if bgr is None:
            raise FormatError(f"cannot read image {img_path}")
        frame, adjusted = preprocess_frame(bgr[:, :, ::-1], crop, k)
        frames.append(frame)
    if adjusted is None:
        adjusted = adjust_intrinsics(
            k, crop, (FRAME_WIDTH / crop.width, FRAME_HEIGHT / crop.height)
        )
    angles = np.array([normalize_angle(rec.raw_steering) for rec in drive.records])
    timestamps = np.array([rec.timestamp for rec in drive.records], dtype=np.float64)
    stacked = (
        np.stack(frames)
        if frames
        else np.empty((0, 3, FRAME_HEIGHT, FRAME_WIDTH), dtype=np.float32)
    )
    return LoadedDrive(
        drive_id=drive.drive_id,
        frames=stacked,
        angles=angles,
        timestamps=timestamps,
        intrinsics=adjusted,
        maps=orientation_maps(adjusted),
    )


def load_drive_arrays(
    drive_id: str,
    images: np.ndarray,
    angles: np.ndarray,
    timestamps: np.ndarray,
    k: CameraIntrinsics,
    crop: CropRect | None = None,
) -> LoadedDrive:
    """Preprocess an in-memory drive: images [N, H, W, 3], angles in radians.

    Same pipeline as :func:`load_drive` minus the file round trip; used for
    synthetic drives that never touch disk.
    """
    crop = crop or full_frame(k)
    frames = []
    adjusted = adjust_intrinsics(k, crop, (FRAME_WIDTH / crop.width, FRAME_HEIGHT / crop.height))
    for image in images:
        frame, adjusted = preprocess_frame(image, crop, k)
        frames.append(frame)
    stacked = (
        np.stack(frames)
        if frames
        else np.empty((0, 3, FRAME_HEIGHT, FRAME_WIDTH), dtype=np.float32)
    )
    angles = np.asarray(angles, dtype=np.float64)
    if np.any(np.abs(angles) > np.pi):
        raise ValidationError("angles must already be normalized to [-pi, pi]")
    return LoadedDrive(
        drive_id=drive_id,
        frames=stacked,
        angles=angles,
        timestamps=np.asarray(timestamps, dtype=np.float64),
        intrinsics=adjusted,
        maps=orientation_maps(adjusted),
    )


class WindowDataset:
    """Sliding windows over loaded drives, assembled lazily.

    ``channels=5`` appends each drive's orientation channels to its
    frames; ``channels=3`` leaves frames as RGB. Windows never cross a
    drive boundary and short drives simply contribute none.
    """

    def __init__(
        self,
        drives: list[LoadedDrive],
        seq_len: int,
        stride: int = 1,
        channels: int = 3,
    ):
        if seq_len < 1 or stride < 1:
            raise ValueError(f"seq_len and stride must be >= 1, got {seq_len}, {stride}")
        if channels not in (3, 5):
            raise ValueError(f"channels must be 3 or 5, got {channels}")
        self.drives = drives
        self.seq_len = seq_len
        self.stride = stride
        self.channels = channels
        self._index: list[tuple[int, int]] = []
        for di, drive in enumerate(drives):
            for start in range(0, len(drive) - seq_len + 1, stride):
                self._index.append((di, start))
        self._orient_cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._index)

    def _orient_channels(self, di: int) -> np.ndarray:
        cached = self._orient_cache.get(di)
        if cached is None:
            cached = self.drives[di].maps.normalized()
            self._orient_cache[di] = cached
        return cached

    def frames_target(self, i: int) -> tuple[np.ndarray, float]:
        """Window tensor [T, C, H, W] float32 plus its target angle."""
        di, start = self._index[i]
        drive = self.drives[di]
        rgb = drive.frames[start : start + self.seq_len]
        if self.channels == 5:
            orient = np.broadcast_to(
                self._orient_channels(di), (self.seq_len, 2, FRAME_HEIGHT, FRAME_WIDTH)
            )
            frames = np.concatenate([rgb, orient], axis=1)
        else:
            frames = rgb
        return frames, float(drive.angles[start + self.seq_len - 1])

    def window(self, i: int) -> SequenceWindow:
        di, start = self._index[i]
        drive = self.drives[di]
        frames, target = self.frames_target(i)
        return SequenceWindow(
            frames=np.ascontiguousarray(frames),
            target=target,
            drive_id=drive.drive_id,
            end_timestamp=float(drive.timestamps[start + self.seq_len - 1]),
        )

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        """Stacked frames [B, T, C, H, W] and targets [B] for ``indices``."""
        pairs = [self.frames_target(i) for i in indices]
        return (
            np.stack([frames for frames, _ in pairs]),
            np.array([target for _, target in pairs], dtype=np.float64),
        )

    def targets(self) -> np.ndarray:
        out = np.empty(len(self._index), dtype=np.float64)
        for pos, (di, start) in enumerate(self._index):
            out[pos] = self.drives[di].angles[start + self.seq_len - 1]
        return out

    def window_end_timestamp(self, i: int) -> float:
        di, start = self._index[i]
        return float(self.drives[di].timestamps[start + self.seq_len - 1])

    def window_drive_id(self, i: int) -> str:
        di, _ = self._index[i]
        return self.drives[di].drive_id

    def shared_maps(self) -> OrientationMaps:
        """The single orientation map set shared by every drive.

        Feature-level injection resizes one map set per layer, which only
        makes sense when all drives share a camera; mixed intrinsics raise
        ``ValidationError``.
        """
        if not self.drives:
            raise ValidationError("empty dataset has no orientation maps")
        first = self.drives[0]
        for drive in self.drives[1:]:
            if drive.intrinsics != first.intrinsics:
                raise ValidationError(
                    "drives have differing intrinsics; feature-level injection "
                    "requires a single shared camera"
                )
        return first.maps


def window_sequences(
    drives: list[LoadedDrive], seq_len: int, stride: int = 1, channels: int = 3
) -> list[SequenceWindow]:
    """Materialize every sliding window of every drive."""
    ds = WindowDataset(drives, seq_len, stride=stride, channels=channels)
    return [ds.window(i) for i in range(len(ds))]


def split_dataset(drives: list, ratios, seed: int) -> tuple[list, list, list]:
    """Split a drive list into (train, val, test) at drive granularity.

    ``ratios`` holds 1 to 3 values summing to 1; missing entries count as
    0. Counts follow largest-remainder apportionment, with every
    nonzero-ratio split guaranteed at least one drive. Deterministic in
    ``seed``.
    """
    ratios = list(ratios)
    if not 1 <= len(ratios) <= 3:
        raise ValidationError(f"expected 1 to 3 split ratios, got {len(ratios)}")
    ratios = ratios + [0.0] * (3 - len(ratios))
    if any(r < 0 for r in ratios):
        raise ValidationError(f"split ratios must be non-negative, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"split ratios must sum to 1, got {sum(ratios)}")
    n = len(drives)
    nonzero = sum(1 for r in ratios if r > 0)
    if n < nonzero:
        raise ValidationError(f"{n} drives cannot fill {nonzero} nonzero splits")

    quotas = [n * r for r in ratios]
    counts = [int(math.floor(q)) for q in quotas]
    remainders = [q - c for q, c in zip(quotas, counts)]
    for idx in sorted(range(3), key=lambda i: (-remainders[i], i))[: n - sum(counts)]:
        counts[idx] += 1
    # Largest remainder can starve a small nonzero split; top it up from
    # the most populated one.
    for idx in range(3):
        while ratios[idx] > 0 and counts[idx] == 0:
            donor = max(range(3), key=lambda i: counts[i])
            counts[donor] -= 1
            counts[idx] += 1

    order = np.random.default_rng(seed).permutation(n)
    shuffled = [drives[i] for i in order]
    train = shuffled[: counts[0]]
    val = shuffled[counts[0] : counts[0] + counts[1]]
    test = shuffled[counts[0] + counts[1] :]
    return train, val, test
