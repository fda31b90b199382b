import numpy as np
import pytest

from orientsteer.camera_geometry import CameraIntrinsics, orientation_maps
from orientsteer.data_pipeline import LoadedDrive, load_drive_arrays
from orientsteer.synthetic_track import DEFAULT_CROP, TrackParams, generate_drive


def make_random_drive(drive_id: str, n_frames: int, seed: int = 0) -> LoadedDrive:
    """A drive of random frames already at the processed 66x200 size."""
    rng = np.random.default_rng(seed)
    k = CameraIntrinsics(fx=100.0, fy=100.0, cx=99.5, cy=32.5, width=200, height=66)
    return LoadedDrive(
        drive_id=drive_id,
        frames=rng.random((n_frames, 3, 66, 200), dtype=np.float32),
        angles=rng.uniform(-0.5, 0.5, n_frames),
        timestamps=np.arange(n_frames, dtype=np.float64) * 0.1,
        intrinsics=k,
        maps=orientation_maps(k),
    )


def make_synthetic_drive(
    params: TrackParams, drive_seed: int, drive_id: str | None = None
) -> LoadedDrive:
    """Render a synthetic drive and run it through the standard pipeline."""
    synth = generate_drive(params, drive_seed)
    crop = DEFAULT_CROP if params.image_size == (180, 320) else None
    return load_drive_arrays(
        drive_id or f"synth_{drive_seed:03d}",
        synth.frames,
        synth.labels,
        np.arange(len(synth.labels), dtype=np.float64) * 0.1,
        synth.intrinsics,
        crop,
    )


@pytest.fixture(scope="session")
def memorization_windows():
    """Exactly 32 five-channel windows spanning one drive with real turns.

    Stride 6 over a 194-frame drive picks windows across the whole curve
    history (labels up to ~0.45 rad), so memorizing them to a loss below
    1e-3 requires genuine fitting, not just predicting zero.
    """
    from orientsteer.data_pipeline import WindowDataset

    params = TrackParams(frames_per_drive=194, seed=5)
    drive = make_synthetic_drive(params, 0)
    dataset = WindowDataset([drive], seq_len=8, stride=6, channels=5)
    assert len(dataset) == 32
    return dataset
