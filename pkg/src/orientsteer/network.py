"""PilotNet feature encoder plus LSTM temporal head.

Each frame of a window runs through a five-conv PilotNet encoder
(kernels 5/5/5/3/3, strides 2/2/2/1/1, valid padding, widths
24/36/48/64/64) followed by one 1024-wide fully connected layer; the
per-frame 1024-vectors feed an LSTM whose last-timestep output is read
out to a single steering angle for the final frame of the window.

Orientation maps can enter the network at two kinds of places:

* ``INPUT``: the data pipeline concatenates the normalized maps with RGB
  into a 5-channel frame before the model sees it.
* ``CONV1``..``CONV5``: the model itself appends the maps, resized to that
  layer's output resolution, as two extra channels between that layer and
  the next (after ``CONV5`` they join the flattened features entering the
  fully connected layer).

The first "layer" is a fixed affine normalization: image channels in
[0, 1] are mapped to [-1, 1]; orientation channels arrive already
normalized to (-1, 1) and pass through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch
import torch.nn as nn

from .camera_geometry import OrientationMaps, resize_maps_to

FRAME_HEIGHT = 66
FRAME_WIDTH = 200

# (kernel, stride, out_channels) for the five PilotNet conv layers.
CONV_SPECS = ((5, 2, 24), (5, 2, 36), (5, 2, 48), (3, 1, 64), (3, 1, 64))


class InjectPoint(str, Enum):
    NONE = "NONE"
    INPUT = "INPUT"
    CONV1 = "CONV1"
    CONV2 = "CONV2"
    CONV3 = "CONV3"
    CONV4 = "CONV4"
    CONV5 = "CONV5"

    @property
    def conv_index(self) -> int | None:
        """1-based conv layer index for CONVk points, else None."""
        if self.value.startswith("CONV"):
            return int(self.value[4])
        return None


def conv_shape_chain(height: int = FRAME_HEIGHT, width: int = FRAME_WIDTH):
    """Spatial size after each conv layer, by valid-padding arithmetic."""
    sizes = []
    h, w = height, width
    for kernel, stride, _ in CONV_SPECS:
        h = (h - kernel) // stride + 1
        w = (w - kernel) // stride + 1
        if h < 1 or w < 1:
            raise ValueError(f"input {height}x{width} is too small for the conv chain")
        sizes.append((h, w))
    return sizes


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs for the steering model.

    ``inject_at`` defaults to ``INPUT`` for 5-channel input and ``NONE``
    for 3-channel input. 5-channel input requires ``INPUT`` injection;
    the ``CONVk`` points require a plain 3-channel input.
    """

    in_channels: int = 5
    seq_len: int = 8
    lstm_hidden: int = 128
    lstm_layers: int = 1
    inject_at: InjectPoint = field(default=None)  # type: ignore[assignment]
    fc_dim: int = 1024

    def __post_init__(self):
        if self.in_channels not in (3, 5):
            raise ValueError(f"in_channels must be 3 or 5, got {self.in_channels}")
        if self.inject_at is None:
            resolved = InjectPoint.INPUT if self.in_channels == 5 else InjectPoint.NONE
            object.__setattr__(self, "inject_at", resolved)
        else:
            object.__setattr__(self, "inject_at", InjectPoint(self.inject_at))
        if self.in_channels == 5 and self.inject_at is not InjectPoint.INPUT:
            raise ValueError("5-channel input requires inject_at=INPUT")
        if self.in_channels == 3 and self.inject_at is InjectPoint.INPUT:
            raise ValueError("inject_at=INPUT requires in_channels=5")
        if self.seq_len < 1:
            raise ValueError(f"seq_len must be >= 1, got {self.seq_len}")
        if self.lstm_hidden < 1 or self.lstm_layers < 1:
            raise ValueError("lstm_hidden and lstm_layers must be >= 1")
        if self.fc_dim < 1:
            raise ValueError(f"fc_dim must be >= 1, got {self.fc_dim}")


class SteeringModel(nn.Module):
    """Sequence-to-angle model; use :func:`build_model` to construct."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        inject_conv = config.inject_at.conv_index

        # Fixed affine normalization; orientation channels pass through.
        scale = torch.ones(config.in_channels, 1, 1)
        shift = torch.zeros(config.in_channels, 1, 1)
        scale[:3] = 2.0
        shift[:3] = -1.0
        self.register_buffer("norm_scale", scale)
        self.register_buffer("norm_shift", shift)

        convs = []
        in_ch = config.in_channels
        for idx, (kernel, stride, out_ch) in enumerate(CONV_SPECS, start=1):
            convs.append(nn.Conv2d(in_ch, out_ch, kernel, stride=stride))
            in_ch = out_ch + (2 if inject_conv == idx else 0)
        self.convs = nn.ModuleList(convs)

        chain = conv_shape_chain()
        h_last, w_last = chain[-1]
        flat = in_ch * h_last * w_last  # in_ch already includes a CONV5 injection
        self.fc = nn.Linear(flat, config.fc_dim)
        self.lstm = nn.LSTM(
            config.fc_dim, config.lstm_hidden, config.lstm_layers, batch_first=True
        )
        self.readout = nn.Linear(config.lstm_hidden, 1)
        # Zero readout: an untrained model predicts exactly 0.
        nn.init.zeros_(self.readout.weight)
        nn.init.zeros_(self.readout.bias)

        self.act = nn.ReLU()
        self._map_cache: dict[tuple, torch.Tensor] = {}

    # -- orientation map injection -----------------------------------------

    def _injection_tensor(self, maps: OrientationMaps) -> torch.Tensor:
        """Normalized maps resized to the injection layer's output size."""
        idx = self.config.inject_at.conv_index
        h, w = conv_shape_chain()[idx - 1]
        key = (maps.intrinsics, h, w)
        cached = self._map_cache.get(key)
        if cached is None:
            resized = resize_maps_to(maps, maps.intrinsics, w, h)
            cached = torch.from_numpy(resized.normalized().copy())
            self._map_cache[key] = cached
        return cached

    # -- forward passes ------------------------------------------------------

    def _encode(self, frames: torch.Tensor, maps: OrientationMaps | None) -> torch.Tensor:
        """Per-frame features: [N, C, H, W] -> [N, fc_dim]."""
        n, c, h, w = frames.shape
        if c != self.config.in_channels or h != FRAME_HEIGHT or w != FRAME_WIDTH:
            raise ValueError(
                f"expected frames [N, {self.config.in_channels}, {FRAME_HEIGHT}, "
                f"{FRAME_WIDTH}], got {tuple(frames.shape)}"
            )
        inject_conv = self.config.inject_at.conv_index
        if inject_conv is not None and maps is None:
            raise ValueError(f"inject_at={self.config.inject_at.value} requires orientation maps")
        x = frames * self.norm_scale + self.norm_shift
        for idx, conv in enumerate(self.convs, start=1):
            x = self.act(conv(x))
            if inject_conv == idx:
                inj = self._injection_tensor(maps).to(x.dtype)
                x = torch.cat([x, inj.unsqueeze(0).expand(n, -1, -1, -1)], dim=1)
        return self.act(self.fc(x.flatten(1)))

    def forward(self, windows: torch.Tensor, maps: OrientationMaps | None = None) -> torch.Tensor:
        """Predict one angle per window: [B, T, C, H, W] -> [B]."""
        if windows.ndim != 5:
            raise ValueError(f"expected a 5-d window batch, got shape {tuple(windows.shape)}")
        b, t = windows.shape[:2]
        if t != self.config.seq_len:
            raise ValueError(f"expected seq_len {self.config.seq_len}, got {t}")
        feats = self._encode(windows.reshape(b * t, *windows.shape[2:]), maps)
        seq, _ = self.lstm(feats.reshape(b, t, -1))
        return self.readout(seq[:, -1]).squeeze(-1)

    # -- numpy-facing helpers -------------------------------------------------

    def encode_frame(self, frame: np.ndarray, maps: OrientationMaps | None = None) -> np.ndarray:
        """Encoder features for one preprocessed frame [C, H, W]."""
        frame = np.asarray(frame, dtype=np.float32)
        if frame.ndim != 3:
            raise ValueError(f"expected a single frame [C, H, W], got shape {frame.shape}")
        with torch.inference_mode():
            out = self._encode(torch.from_numpy(frame).unsqueeze(0), maps)
        return out.squeeze(0).numpy()

    def forward_window(self, window, maps: OrientationMaps | None = None) -> float:
        """Steering prediction (radians) for the last frame of one window.

        ``window`` is either a ``SequenceWindow`` or an array [T, C, H, W].
        """
        frames = getattr(window, "frames", window)
        frames = np.asarray(frames, dtype=np.float32)
        if frames.ndim != 4:
            raise ValueError(f"expected a window [T, C, H, W], got shape {frames.shape}")
        with torch.inference_mode():
            out = self.forward(torch.from_numpy(frames).unsqueeze(0), maps)
        return float(out.squeeze(0))

    def predict_batch(self, windows: np.ndarray, maps: OrientationMaps | None = None) -> np.ndarray:
        """Predictions for a stacked batch of windows [B, T, C, H, W]."""
        windows = np.asarray(windows, dtype=np.float32)
        with torch.inference_mode():
            out = self.forward(torch.from_numpy(windows), maps)
        return out.numpy().astype(np.float64)


def build_model(cfg: ModelConfig, seed: int) -> SteeringModel:
    """Construct a model with parameters drawn deterministically from ``seed``.

    The readout layer is zero-initialized, so a fresh model predicts 0 for
    every input; all other layers use their standard initializers.
    """
    torch.manual_seed(seed)
    return SteeringModel(cfg)
