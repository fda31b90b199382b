"""Pixel-wise orientation maps from pinhole camera intrinsics.

Every pixel of a calibrated camera sees the scene along a ray; the ray's
horizontal angle ``theta = atan2(u - cx, fx)`` and vertical angle
``beta = atan2(v - cy, fy)`` describe that direction without needing any
scene geometry. The maps built here are concatenated with RGB frames as
extra input channels, so they must stay consistent with whatever crop and
rescale the image pipeline applies; ``adjust_intrinsics`` carries the
intrinsics through those operations so maps are always recomputed from
first principles instead of being resampled.

Conventions: pixel ``(row i, column j)`` samples at ``u = j, v = i``
(integer indices are pixel centers). Maps are computed in float64 and only
cast to float32 at the network boundary (``OrientationMaps.normalized``).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ResourceLimitError

# Guard against accidentally materializing maps for absurd sensor sizes.
DEFAULT_MAX_PIXELS = 64_000_000

# Angle channels are scaled by 2/pi at the network boundary so that they
# land in (-1, 1), commensurate with the normalized image channels.
ANGLE_NORMALIZATION = 2.0 / math.pi


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics: focal lengths, principal point, sensor size."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            v = float(getattr(self, name))
            object.__setattr__(self, name, v)
            if not math.isfinite(v):
                raise ValueError(f"intrinsics field {name} must be finite, got {v!r}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be at least 1x1, got {self.width}x{self.height}")


@dataclass(frozen=True)
class CropRect:
    """Axis-aligned crop rectangle in pixel units, (left, top) inclusive."""

    left: int
    top: int
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"crop must be at least 1x1, got {self.width}x{self.height}")
        if self.left < 0 or self.top < 0:
            raise ValueError(f"crop origin must be non-negative, got ({self.left}, {self.top})")


def full_frame(k: CameraIntrinsics) -> CropRect:
    """The crop rectangle covering the whole sensor of ``k``."""
    return CropRect(0, 0, k.width, k.height)


@dataclass(frozen=True)
class OrientationMaps:
    """Per-pixel horizontal/vertical ray angles, in radians.

    ``horizontal[i, j]`` is the horizontal angle of the ray through pixel
    ``(i, j)``; ``vertical`` likewise. Both grids are ``height x width``
    float64 arrays, immutable after construction, and carry the intrinsics
    they were computed from so they can be regenerated at other sizes.
    """

    horizontal: np.ndarray
    vertical: np.ndarray
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        expected = (self.intrinsics.height, self.intrinsics.width)
        if self.horizontal.shape != expected or self.vertical.shape != expected:
            raise ValueError(
                f"map shape {self.horizontal.shape} does not match intrinsics size {expected}"
            )
        self.horizontal.setflags(write=False)
        self.vertical.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.horizontal.shape

    def normalized(self) -> np.ndarray:
        """Both maps scaled by 2/pi into (-1, 1), stacked as float32 [2, H, W].

        Channel 0 is the horizontal map, channel 1 the vertical map; this
        is the representation fed to the network.
        """
        return np.stack(
            [
                (self.horizontal * ANGLE_NORMALIZATION).astype(np.float32),
                (self.vertical * ANGLE_NORMALIZATION).astype(np.float32),
            ]
        )


def pixel_orientation(u, v, k: CameraIntrinsics):
    """Horizontal and vertical ray angles for pixel coordinates (u, v).

    ``u``/``v`` may be scalars or arrays and may be fractional (sub-pixel
    queries are fine). Returns ``(theta, beta)`` in radians, each in
    (-pi/2, pi/2).
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise ValueError("pixel coordinates must be finite")
    theta = np.arctan2(u - k.cx, k.fx)
    beta = np.arctan2(v - k.cy, k.fy)
    if theta.ndim == 0:
        return float(theta), float(beta)
    return theta, beta


def orientation_maps(k: CameraIntrinsics, max_pixels: int = DEFAULT_MAX_PIXELS) -> OrientationMaps:
    """Evaluate ``pixel_orientation`` at every pixel center of ``k``.

    Raises ``ResourceLimitError`` if ``width * height`` exceeds
    ``max_pixels``.
    """
    n_pixels = k.width * k.height
    if n_pixels > max_pixels:
        raise ResourceLimitError(
            f"orientation map of {k.width}x{k.height} = {n_pixels} pixels "
            f"exceeds the budget of {max_pixels}"
        )
    # theta varies only along columns and beta only along rows, so compute
    # one row / one column and broadcast; every row is then bit-identical.
    theta_row = np.arctan2(np.arange(k.width, dtype=np.float64) - k.cx, k.fx)
    beta_col = np.arctan2(np.arange(k.height, dtype=np.float64) - k.cy, k.fy)
    horizontal = np.broadcast_to(theta_row, (k.height, k.width)).copy()
    vertical = np.broadcast_to(beta_col[:, None], (k.height, k.width)).copy()
    return OrientationMaps(horizontal, vertical, k)


def adjust_intrinsics(
    k: CameraIntrinsics, crop: CropRect, scale: tuple[float, float]
) -> CameraIntrinsics:
    """Intrinsics after cropping to ``crop`` and scaling by ``(sx, sy)``.

    The crop must lie inside the sensor. Scaling maps pixel centers with
    the standard half-pixel shift: ``cx' = (cx - left + 0.5) * sx - 0.5``.
    At unit scale the half-pixel terms cancel algebraically, and the
    shortcut below keeps the crop-only adjustment numerically exact.
    """
    sx, sy = scale
    if not (sx > 0 and sy > 0):
        raise ValueError(f"scale factors must be positive, got {scale}")
    if crop.left + crop.width > k.width or crop.top + crop.height > k.height:
        raise ValueError(
            f"crop {crop} does not fit inside a {k.width}x{k.height} frame"
        )
    if sx == 1.0:
        cx = k.cx - crop.left
        fx = k.fx
        w = crop.width
    else:
        cx = (k.cx - crop.left + 0.5) * sx - 0.5
        fx = k.fx * sx
        w = int(round(crop.width * sx))
    if sy == 1.0:
        cy = k.cy - crop.top
        fy = k.fy
        h = crop.height
    else:
        cy = (k.cy - crop.top + 0.5) * sy - 0.5
        fy = k.fy * sy
        h = int(round(crop.height * sy))
    return CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=max(w, 1), height=max(h, 1))


def resize_maps_to(
    m: OrientationMaps, k: CameraIntrinsics, w: int, h: int
) -> OrientationMaps:
    """Orientation maps for the same camera rescaled to ``w x h`` pixels.

    Maps are recomputed from adjusted intrinsics, never interpolated, so
    the result is exact at the new pixel centers.
    """
    if w < 1 or h < 1:
        raise ValueError(f"target size must be at least 1x1, got {w}x{h}")
    adjusted = adjust_intrinsics(k, full_frame(k), (w / k.width, h / k.height))
    return orientation_maps(adjusted)


# ---------------------------------------------------------------------------
# File interfaces

_INTRINSICS_KEYS = ("fx", "fy", "cx", "cy", "width", "height")


def load_intrinsics(path) -> CameraIntrinsics:
    """Read a line-oriented ``key=value`` intrinsics file."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{path}: line {lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in _INTRINSICS_KEYS:
                raise FormatError(f"{path}: line {lineno}: unknown key {key!r}")
            try:
                values[key] = float(value.strip())
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: bad number {value!r}") from exc
    missing = [key for key in _INTRINSICS_KEYS if key not in values]
    if missing:
        raise FormatError(f"{path}: missing keys {missing}")
    try:
        return CameraIntrinsics(
            fx=values["fx"],
            fy=values["fy"],
            cx=values["cx"],
            cy=values["cy"],
            width=int(values["width"]),
            height=int(values["height"]),
        )
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_intrinsics(k: CameraIntrinsics, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"fx={k.fx!r}\n")
        fh.write(f"fy={k.fy!r}\n")
        fh.write(f"cx={k.cx!r}\n")
        fh.write(f"cy={k.cy!r}\n")
        fh.write(f"width={k.width}\n")
        fh.write(f"height={k.height}\n")


def write_maps(m: OrientationMaps, out_dir) -> None:
    """Write ``ha.f32``/``va.f32`` raw grids plus a ``maps.meta`` header.

    Grids are row-major little-endian float32, in radians (not the
    normalized network representation).
    """
    os.makedirs(out_dir, exist_ok=True)
    h, w = m.shape
    m.horizontal.astype("<f4").tofile(os.path.join(out_dir, "ha.f32"))
    m.vertical.astype("<f4").tofile(os.path.join(out_dir, "va.f32"))
    with open(os.path.join(out_dir, "maps.meta"), "w", encoding="utf-8") as fh:
        fh.write(f"height={h}\n")
        fh.write(f"width={w}\n")
        fh.write("dtype=float32\n")
        fh.write("endian=little\n")
        fh.write("order=row-major\n")
        fh.write("files=ha.f32,va.f32\n")
        fh.write("unit=radians\n")


def read_maps(map_dir) -> tuple[np.ndarray, np.ndarray]:
    """Read grids written by ``write_maps``; returns (horizontal, vertical)."""
    meta_path = os.path.join(map_dir, "maps.meta")
    meta = {}
    with open(meta_path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if line and "=" in line:
                key, _, value = line.partition("=")
                meta[key.strip()] = value.strip()
    try:
        h, w = int(meta["height"]), int(meta["width"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{meta_path}: missing or bad height/width") from exc
    grids = []
    for name in ("ha.f32", "va.f32"):
        data = np.fromfile(os.path.join(map_dir, name), dtype="<f4")
        if data.size != h * w:
            raise FormatError(f"{map_dir}/{name}: expected {h * w} floats, found {data.size}")
        grids.append(data.reshape(h, w))
    return grids[0], grids[1]
