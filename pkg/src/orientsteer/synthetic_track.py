"""Deterministic synthetic driving scenes with a long-tail steering
distribution.

Each drive is a smoothly curving road rendered from a ground-plane
projection: the road's curvature follows a piecewise-linear random walk
whose segment amplitudes are drawn from a power law, so most of the time
the road is nearly straight and sharp turns are rare. The steering label
at frame ``t`` is a closed-form function of the walk,

    label[t] = clip(STEER_GAIN * (heading[t + LOOKAHEAD] - heading[t]))

with ``heading`` the prefix sum of curvature; tests recompute it
independently. Rendering uses only arithmetic that is exactly odd under
negation (sums, products, absolute values), so negating the curvature
sequence yields bitwise horizontally-mirrored frames and exactly negated
labels.

All randomness comes from a splitmix64 generator (64-bit integer state;
``state += 0x9E3779B97F4A7C15`` then two xor-shift-multiply finalizer
rounds), so identical seeds reproduce identical datasets on any platform.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import cv2
import numpy as np

from .camera_geometry import CameraIntrinsics, CropRect, save_intrinsics
from .data_pipeline import Drive, DriveRecord, write_manifest
from .errors import ValidationError

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# Label definition: steering is STEER_GAIN times the road's heading offset
# LOOKAHEAD frames (= distance units) ahead of the camera.
STEER_GAIN = 2.0
LOOKAHEAD = 12

# Scene constants (distance units are "frames of travel": speed is 1/frame).
RENDER_HORIZON = 60  # road visible this far ahead; haze beyond
CAMERA_HEIGHT = 1.5
ROAD_HALF_WIDTH = 2.2
EDGE_LINE_HALF_WIDTH = 0.18
DASH_HALF_WIDTH = 0.12
DASH_PERIOD = 4.0
SEGMENT_FRAMES = (20, 45)  # curvature ramp length range
STRAIGHT_PROB = 0.5  # chance a walk segment targets zero curvature

FRAME_PERIOD_S = 0.1  # manifest timestamps tick at 10 Hz

# Recommended preprocessing crop for rendered scenes (drops the upper sky).
DEFAULT_CROP = CropRect(left=0, top=60, width=320, height=120)

_SKY_TOP = np.array([0.45, 0.62, 0.88])
_SKY_HORIZON = np.array([0.74, 0.79, 0.84])
_GROUND_BASE = np.array([0.42, 0.46, 0.30])
_ROAD_COLOR = np.array([0.23, 0.23, 0.25])
_EDGE_COLOR = np.array([0.87, 0.87, 0.80])
_DASH_COLOR = np.array([0.85, 0.78, 0.35])
_FOG_COLOR = _GROUND_BASE + 0.9 * (_SKY_HORIZON - _GROUND_BASE)


class SplitMix64:
    """splitmix64: 64-bit integer-state generator, identical everywhere."""

    def __init__(self, seed: int):
        self._state = seed & MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) / float(1 << 53)

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi]; spans are tiny so modulo bias is nil."""
        return lo + self.next_u64() % (hi - lo + 1)

    def sign(self) -> float:
        return 1.0 if self.next_u64() & 1 else -1.0


def _substream_seed(seed: int, stream: int) -> int:
    return (SplitMix64(seed).next_u64() + stream) & MASK64


@dataclass(frozen=True)
class TrackParams:
    """Generator knobs.

    ``tail_alpha`` shapes the long tail: turn amplitudes are drawn as
    ``max * U**tail_alpha``, so larger values concentrate more mass near
    zero. ``curve_scale`` scales the whole curvature walk; 0 gives a
    perfectly straight road. ``noise_std`` is the std of additive pixel
    noise in [0, 1] intensity units.
    """

    tail_alpha: float = 3.0
    max_angle: float = 0.5
    frames_per_drive: int = 200
    image_size: tuple[int, int] = (180, 320)  # (height, width)
    noise_std: float = 0.02
    curve_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.max_angle <= np.pi:
            raise ValidationError(f"max_angle must be in (0, pi], got {self.max_angle}")
        if self.frames_per_drive < 1:
            raise ValidationError(f"frames_per_drive must be >= 1, got {self.frames_per_drive}")
        if self.tail_alpha <= 0:
            raise ValidationError(f"tail_alpha must be > 0, got {self.tail_alpha}")
        if self.noise_std < 0 or self.curve_scale < 0:
            raise ValidationError("noise_std and curve_scale must be >= 0")
        h, w = self.image_size
        if h < 16 or w < 16:
            raise ValidationError(f"image_size must be at least 16x16, got {self.image_size}")

    def intrinsics(self) -> CameraIntrinsics:
        h, w = self.image_size
        return CameraIntrinsics(
            fx=w / 2.0, fy=w / 2.0, cx=(w - 1) / 2.0, cy=(h - 1) / 2.0, width=w, height=h
        )

    def max_curvature(self) -> float:
        """Curvature at which a held turn saturates the label range."""
        return self.curve_scale * self.max_angle / (STEER_GAIN * LOOKAHEAD)


@dataclass(frozen=True)
class SyntheticDrive:
    frames: np.ndarray  # [N, H, W, 3] uint8 RGB
    labels: np.ndarray  # [N] float64 radians
    intrinsics: CameraIntrinsics
    curvature: np.ndarray  # [N + RENDER_HORIZON] float64, the walk state


def _sample_curvature(p: TrackParams, rng: SplitMix64) -> np.ndarray:
    """Piecewise-linear curvature walk with power-law segment targets."""
    ext = p.frames_per_drive + max(LOOKAHEAD, RENDER_HORIZON)
    c_max = p.max_curvature()
    c = np.zeros(ext, dtype=np.float64)
    pos = 0
    current = 0.0
    while pos < ext:
        seg = rng.randint(*SEGMENT_FRAMES)
        if rng.uniform() < STRAIGHT_PROB:
            target = 0.0
        else:
            target = rng.sign() * c_max * rng.uniform() ** p.tail_alpha
        end = min(pos + seg, ext)
        for i in range(pos, end):
            c[i] = current + (target - current) * ((i - pos + 1) / seg)
        current = c[end - 1]
        pos = end
    return c


# Mixing primes for the stateless pixel hash (same finalizer as splitmix64).
_HP1 = np.uint64(0xA0761D6478BD642F)
_HP2 = np.uint64(0xE7037ED1A0B428DB)
_HP3 = np.uint64(0x8EBC6AF09C88C6E3)


def _hash01(a, b, c) -> np.ndarray:
    """Stateless hash of three non-negative integer keys to [0, 1)."""
    with np.errstate(over="ignore"):
        z = (
            (np.asarray(a).astype(np.uint64) * _HP1)
            ^ (np.asarray(b).astype(np.uint64) * _HP2)
            ^ (np.uint64(c) * _HP3)
        )
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def render_from_curvature(
    p: TrackParams, curvature: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Render all frames and labels for a given curvature walk.

    ``curvature`` must cover ``frames_per_drive + max(LOOKAHEAD,
    RENDER_HORIZON)`` steps. Negating it produces exactly mirrored frames
    and exactly negated labels.
    """
    n = p.frames_per_drive
    needed = n + max(LOOKAHEAD, RENDER_HORIZON)
    curvature = np.asarray(curvature, dtype=np.float64)
    if curvature.ndim != 1 or curvature.size < needed:
        raise ValidationError(
            f"curvature must be a vector of at least {needed} steps, got {curvature.shape}"
        )
    k = p.intrinsics()
    h_px, w_px = p.image_size
    fx, fy, cx, cy = k.fx, k.fy, k.cx, k.cy

    heading = np.zeros(curvature.size + 1)
    heading[1:] = np.cumsum(curvature)
    t_idx = np.arange(n)
    labels = np.clip(
        STEER_GAIN * (heading[t_idx + LOOKAHEAD] - heading[t_idx]),
        -p.max_angle,
        p.max_angle,
    )

    rows = np.arange(h_px)
    y_c = rows - cy
    x_c = np.arange(w_px) - cx  # half-integer offsets, exactly odd under mirror
    ground = y_c > 0
    d_all = np.full(h_px, np.inf)
    d_all[ground] = fy * CAMERA_HEIGHT / y_c[ground]
    near = ground & (d_all < RENDER_HORIZON - 1)

    img = np.empty((h_px, w_px, 3))
    # Sky gradient above the horizon, flat fog band between horizon and the
    # first rendered road row; both depend on the row only.
    sky_f = np.clip(rows / max(cy, 1.0), 0.0, 1.0)[:, None]
    img[:] = (_SKY_TOP + sky_f * (_SKY_HORIZON - _SKY_TOP))[:, None, :]
    img[ground & ~near] = _FOG_COLOR

    d = d_all[near]
    inv_d = 1.0 / d
    j0 = d.astype(int)
    frac = d - j0
    noise_salt = SplitMix64(p.seed ^ 0x5DEECE66D).next_u64() >> 1

    frames = np.empty((n, h_px, w_px, 3), dtype=np.uint8)
    for t in range(n):
        psi = heading[t : t + RENDER_HORIZON + 1] - heading[t]
        x_path = np.empty(RENDER_HORIZON + 1)
        x_path[0] = 0.0
        x_path[1:] = np.cumsum(psi[:-1])

        x_d = x_path[j0] * (1.0 - frac) + x_path[j0 + 1] * frac
        center = x_d * (fx * inv_d)
        half_w = (fx * ROAD_HALF_WIDTH) * inv_d
        edge_hw = np.maximum((fx * EDGE_LINE_HALF_WIDTH) * inv_d, 0.35)
        dash_hw = np.maximum((fx * DASH_HALF_WIDTH) * inv_d, 0.3)
        dash_on = (np.floor(d / DASH_PERIOD).astype(int) % 2 == 0).astype(np.float64)

        rel = x_c[None, :] - center[:, None]
        abs_rel = np.abs(rel)
        road_m = np.clip(half_w[:, None] - abs_rel + 0.5, 0.0, 1.0)
        edge_m = np.clip(edge_hw[:, None] - np.abs(abs_rel - half_w[:, None]) + 0.5, 0.0, 1.0)
        dash_m = np.clip(dash_hw[:, None] - abs_rel + 0.5, 0.0, 1.0) * dash_on[:, None]

        # Ground texture keyed to road-relative coordinates so it mirrors
        # with the scene; |.| keeps the keys symmetric.
        rel_g = x_c[None, :] * (d * (1.0 / fx))[:, None] - x_d[:, None]
        tex = _hash01(
            np.broadcast_to(np.floor(2.0 * d)[:, None], rel_g.shape),
            np.floor(2.0 * np.abs(rel_g)),
            1,
        )
        tex_mod = (tex - 0.5)[:, :, None]
        ground_col = _GROUND_BASE + 0.14 * tex_mod
        road_col = _ROAD_COLOR + 0.03 * tex_mod

        v = ground_col * (1.0 - road_m[:, :, None]) + road_col * road_m[:, :, None]
        v = v * (1.0 - edge_m[:, :, None]) + _EDGE_COLOR * edge_m[:, :, None]
        v = v * (1.0 - dash_m[:, :, None]) + _DASH_COLOR * dash_m[:, :, None]
        haze = (np.clip(d / RENDER_HORIZON, 0.0, 1.0) ** 1.5 * 0.8)[:, None, None]
        img[near] = v * (1.0 - haze) + _SKY_HORIZON * haze

        frame = img
        if p.noise_std > 0:
            u = _hash01(
                np.broadcast_to(rows[:, None], (h_px, w_px)),
                np.broadcast_to((2.0 * np.abs(x_c)).astype(np.uint64)[None, :], (h_px, w_px)),
                noise_salt + t,
            )
            noise = (2.0 * u - 1.0) * (np.sqrt(3.0) * p.noise_std)
            frame = img + noise[:, :, None]
        frames[t] = np.rint(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    return frames, labels


def generate_drive(p: TrackParams, drive_seed: int) -> SyntheticDrive:
    """Render one drive; fully determined by ``(p, drive_seed)``."""
    rng = SplitMix64(_substream_seed(p.seed, drive_seed))
    curvature = _sample_curvature(p, rng)
    frames, labels = render_from_curvature(p, curvature)
    return SyntheticDrive(frames, labels, p.intrinsics(), curvature)


def generate_dataset(p: TrackParams, n_drives: int, out_dir) -> str:
    """Write ``n_drives`` rendered drives plus a manifest; returns its path.

    Layout: ``manifest.txt``, ``intrinsics.txt`` (shared camera), and
    ``drives/drive_<k>/<frame>.png``. Raw steering in the manifest is the
    label in radians scaled by 1000, matching the ingestion contract.
    """
    if n_drives < 0:
        raise ValidationError(f"n_drives must be >= 0, got {n_drives}")
    os.makedirs(out_dir, exist_ok=True)
    save_intrinsics(p.intrinsics(), os.path.join(out_dir, "intrinsics.txt"))
    drives = []
    for idx in range(n_drives):
        drive_id = f"drive_{idx:03d}"
        drive_dir = os.path.join(out_dir, "drives", drive_id)
        os.makedirs(drive_dir, exist_ok=True)
        synth = generate_drive(p, idx)
        records = []
        for f, (frame, label) in enumerate(zip(synth.frames, synth.labels)):
            rel = os.path.join("drives", drive_id, f"{f:06d}.png")
            path = os.path.join(out_dir, rel)
            if not cv2.imwrite(path, frame[:, :, ::-1]):
                raise OSError(f"failed to write image {path}")
            records.append(
                DriveRecord(rel, f * FRAME_PERIOD_S, float(label) * 1000.0, drive_id)
            )
        drives.append(Drive(drive_id, "intrinsics.txt", records))
    manifest_path = os.path.join(out_dir, "manifest.txt")
    write_manifest(manifest_path, drives)
    return manifest_path


def steering_histogram(labels, n_bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Histogram of steering labels over symmetric uniform bins.

    Bins cover ``[-m, m]`` with ``m = max(|labels|)`` (or 1 if all labels
    are zero); returns (edges, counts) with ``counts.sum() == len(labels)``.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        raise ValidationError("cannot histogram an empty label set")
    if n_bins < 1:
        raise ValidationError(f"n_bins must be >= 1, got {n_bins}")
    m = float(np.max(np.abs(labels)))
    if m == 0.0:
        m = 1.0
    counts, edges = np.histogram(labels, bins=n_bins, range=(-m, m))
    return edges, counts
