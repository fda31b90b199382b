import itertools
import math

import numpy as np
import pytest

from orientsteer.camera_geometry import (
    CameraIntrinsics,
    CropRect,
    adjust_intrinsics,
    orientation_maps,
)
from orientsteer.data_pipeline import (
    Drive,
    DriveRecord,
    LoadedDrive,
    WindowDataset,
    attach_orientation_channels,
    load_drive_arrays,
    load_manifest,
    normalize_angle,
    preprocess_frame,
    split_dataset,
    window_sequences,
    write_manifest,
)
from orientsteer.errors import FormatError, ValidationError


def write_text(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


def fake_loaded_drive(drive_id, n_frames, seed=0):
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


class TestNormalizeAngle:
    def test_zero(self):
        assert normalize_angle(0.0) == 0.0

    def test_endpoint(self):
        assert normalize_angle(1000.0 * math.pi) == pytest.approx(math.pi, abs=1e-12)

    def test_linear(self):
        assert normalize_angle(-500.0) == -0.5

    def test_out_of_range(self):
        with pytest.raises(ValidationError):
            normalize_angle(4000.0)

    def test_round_trip_identity(self):
        for angle in np.linspace(-math.pi, math.pi, 33):
            assert abs(normalize_angle(angle * 1000.0) - angle) <= 1e-12


class TestLoadManifest:
    def test_empty_file(self, tmp_path):
        path = write_text(tmp_path, "m.txt", "")
        assert load_manifest(path) == []

    def test_basic_parse(self, tmp_path):
        path = write_text(
            tmp_path,
            "m.txt",
            "# comment\n"
            "drive=a intrinsics=k.txt\n"
            "img0.png,0.0,10.0\n"
            "img1.png,0.1,-20.0\n",
        )
        drives = load_manifest(path)
        assert len(drives) == 1
        assert drives[0].drive_id == "a"
        assert drives[0].intrinsics_path == "k.txt"
        assert [r.image_path for r in drives[0].records] == ["img0.png", "img1.png"]

    def test_out_of_range_steering(self, tmp_path):
        path = write_text(
            tmp_path, "m.txt", "drive=a intrinsics=k.txt\nimg.png,0.0,4000.0\n"
        )
        with pytest.raises(ValidationError) as err:
            load_manifest(path)
        assert "4000" in str(err.value)

    def test_interleaved_drives_group_stably(self, tmp_path):
        path = write_text(
            tmp_path,
            "m.txt",
            "drive=a intrinsics=k.txt\n"
            "a0.png,0.0,1.0\n"
            "drive=b intrinsics=k.txt\n"
            "b0.png,0.0,2.0\n"
            "drive=a intrinsics=k.txt\n"
            "a1.png,0.1,3.0\n",
        )
        drives = load_manifest(path)
        # Oracle: stable group-by on drive id, records in file order.
        assert [d.drive_id for d in drives] == ["a", "b"]
        assert [r.image_path for r in drives[0].records] == ["a0.png", "a1.png"]
        assert [r.image_path for r in drives[1].records] == ["b0.png"]

    def test_nonmonotone_timestamps(self, tmp_path):
        path = write_text(
            tmp_path,
            "m.txt",
            "drive=a intrinsics=k.txt\nimg0.png,0.5,0\nimg1.png,0.5,0\n",
        )
        with pytest.raises(ValidationError):
            load_manifest(path)

    def test_record_before_header(self, tmp_path):
        path = write_text(tmp_path, "m.txt", "img.png,0.0,1.0\n")
        with pytest.raises(FormatError) as err:
            load_manifest(path)
        assert "line 1" in str(err.value)

    def test_bad_field_count(self, tmp_path):
        path = write_text(tmp_path, "m.txt", "drive=a intrinsics=k.txt\nimg.png,0.0\n")
        with pytest.raises(FormatError) as err:
            load_manifest(path)
        assert "line 2" in str(err.value)

    def test_conflicting_intrinsics_redeclaration(self, tmp_path):
        path = write_text(
            tmp_path,
            "m.txt",
            "drive=a intrinsics=k1.txt\ndrive=a intrinsics=k2.txt\n",
        )
        with pytest.raises(FormatError):
            load_manifest(path)

    def test_write_read_round_trip(self, tmp_path):
        drives = [
            Drive(
                "d0",
                "k.txt",
                [
                    DriveRecord("a.png", 0.0, 123.456789123456, "d0"),
                    DriveRecord("b.png", 0.1, -math.pi * 1000, "d0"),
                ],
            )
        ]
        path = tmp_path / "m.txt"
        write_manifest(path, drives)
        loaded = load_manifest(path)
        assert loaded[0].records[0].raw_steering == 123.456789123456
        assert loaded[0].records[1].raw_steering == -math.pi * 1000


class TestPreprocessFrame:
    def test_identity_for_target_sized_full_frame(self):
        rng = np.random.default_rng(1)
        k = CameraIntrinsics(fx=90.0, fy=90.0, cx=99.5, cy=32.5, width=200, height=66)
        image = rng.random((66, 200, 3), dtype=np.float32)
        frame, k2 = preprocess_frame(image, CropRect(0, 0, 200, 66), k)
        assert np.array_equal(frame, image.transpose(2, 0, 1))
        assert k2 == k

    def test_large_input_shape_contract(self):
        k = CameraIntrinsics(fx=1000.0, fy=1000.0, cx=959.5, cy=539.5, width=1920, height=1080)
        image = np.zeros((1080, 1920, 3), dtype=np.uint8)
        frame, k2 = preprocess_frame(image, CropRect(100, 300, 1700, 600), k)
        assert frame.shape == (3, 66, 200)
        assert frame.dtype == np.float32
        assert (k2.width, k2.height) == (200, 66)

    def test_intrinsics_composition_oracle(self):
        # Maps from the returned intrinsics must equal maps from doing the
        # crop and the scale as two separate adjustments.
        k = CameraIntrinsics(fx=300.0, fy=280.0, cx=160.0, cy=90.0, width=320, height=180)
        image = np.zeros((180, 320, 3), dtype=np.uint8)
        crop = CropRect(10, 40, 300, 120)
        _, k_direct = preprocess_frame(image, crop, k)
        k_croponly = adjust_intrinsics(k, crop, (1.0, 1.0))
        k_two_step = adjust_intrinsics(
            k_croponly,
            CropRect(0, 0, crop.width, crop.height),
            (200 / crop.width, 66 / crop.height),
        )
        direct = orientation_maps(k_direct)
        two_step = orientation_maps(k_two_step)
        assert np.array_equal(direct.horizontal, two_step.horizontal)
        assert np.array_equal(direct.vertical, two_step.vertical)

    def test_uint8_scaled_to_unit_interval(self):
        k = CameraIntrinsics(fx=10.0, fy=10.0, cx=99.5, cy=32.5, width=200, height=66)
        image = np.full((66, 200, 3), 255, dtype=np.uint8)
        frame, _ = preprocess_frame(image, CropRect(0, 0, 200, 66), k)
        assert np.all(frame == 1.0)

    def test_degenerate_crop_rejected(self):
        with pytest.raises(ValueError):
            CropRect(0, 0, 0, 10)

    def test_crop_outside_rejected(self):
        k = CameraIntrinsics(fx=10.0, fy=10.0, cx=50.0, cy=50.0, width=100, height=100)
        with pytest.raises(ValueError):
            preprocess_frame(np.zeros((100, 100, 3)), CropRect(50, 0, 60, 50), k)

    def test_pure_bit_identical(self):
        rng = np.random.default_rng(2)
        k = CameraIntrinsics(fx=100.0, fy=100.0, cx=160.0, cy=90.0, width=320, height=180)
        image = rng.random((180, 320, 3), dtype=np.float32)
        crop = CropRect(0, 30, 320, 150)
        a, _ = preprocess_frame(image, crop, k)
        b, _ = preprocess_frame(image, crop, k)
        assert np.array_equal(a, b)


class TestAttachOrientationChannels:
    def test_channels_and_exact_values(self):
        drive = fake_loaded_drive("d", 1)
        image = drive.frames[0]
        out = attach_orientation_channels(image, drive.maps)
        assert out.shape == (5, 66, 200)
        expected = (drive.maps.horizontal * (2 / math.pi)).astype(np.float32)
        assert np.array_equal(out[3], expected)
        assert np.array_equal(out[:3], image)

    def test_shape_mismatch(self):
        drive = fake_loaded_drive("d", 1)
        with pytest.raises(ValueError):
            attach_orientation_channels(np.zeros((3, 66, 100), dtype=np.float32), drive.maps)


class TestWindowing:
    def test_window_counts(self):
        drive = fake_loaded_drive("d", 10)
        assert len(window_sequences([drive], 8, 1)) == 3
        assert len(window_sequences([fake_loaded_drive("d", 5)], 8, 1)) == 0

    def test_two_drives_never_mix(self):
        drives = [fake_loaded_drive("a", 10, seed=1), fake_loaded_drive("b", 10, seed=2)]
        windows = window_sequences(drives, 8, 1)
        assert len(windows) == 6
        # Exhaustive oracle: every admissible (drive, start) pair exactly once.
        expected = {
            (drive.drive_id, start)
            for drive, start in itertools.product(drives, range(3))
        }
        got = {(w.drive_id, round(w.end_timestamp / 0.1) - 7) for w in windows}
        assert got == expected

    def test_target_is_last_frame_angle(self):
        drive = fake_loaded_drive("d", 12)
        ds = WindowDataset([drive], seq_len=8)
        for i in range(len(ds)):
            w = ds.window(i)
            assert w.target == drive.angles[i + 7]
            assert w.end_timestamp == drive.timestamps[i + 7]

    def test_five_channel_windows(self):
        drive = fake_loaded_drive("d", 9)
        ds = WindowDataset([drive], seq_len=8, channels=5)
        frames, target = ds.frames_target(0)
        assert frames.shape == (8, 5, 66, 200)
        assert np.array_equal(frames[0, :3], drive.frames[0])
        assert np.array_equal(frames[0, 3:], drive.maps.normalized())

    def test_stride(self):
        drive = fake_loaded_drive("d", 20)
        assert len(WindowDataset([drive], seq_len=8, stride=4)) == 4

    def test_batch_assembly(self):
        drive = fake_loaded_drive("d", 12)
        ds = WindowDataset([drive], seq_len=8)
        frames, targets = ds.batch([0, 2])
        assert frames.shape == (2, 8, 3, 66, 200)
        assert targets.shape == (2,)
        assert targets[1] == drive.angles[9]


class TestSplitDataset:
    def test_single_ratio_all_train(self):
        drives = [fake_loaded_drive(f"d{i}", 5) for i in range(4)]
        train, val, test = split_dataset(drives, [1.0], seed=0)
        assert len(train) == 4 and not val and not test

    def test_deterministic(self):
        drives = list(range(12))
        assert split_dataset(drives, [0.5, 0.25, 0.25], 3) == split_dataset(
            drives, [0.5, 0.25, 0.25], 3
        )

    def test_largest_remainder_counts(self):
        drives = list(range(10))
        train, val, test = split_dataset(drives, [0.8, 0.1, 0.1], seed=1)
        assert (len(train), len(val), len(test)) == (8, 1, 1)

    def test_disjoint_and_complete(self):
        drives = [f"d{i}" for i in range(17)]
        train, val, test = split_dataset(drives, [0.7, 0.15, 0.15], seed=9)
        assert sorted(train + val + test) == sorted(drives)
        assert not (set(train) & set(val)) and not (set(val) & set(test))
        assert not (set(train) & set(test))

    def test_too_few_drives(self):
        with pytest.raises(ValidationError):
            split_dataset([1, 2], [0.4, 0.3, 0.3], seed=0)

    def test_nonzero_ratio_never_starved(self):
        train, val, test = split_dataset(list(range(3)), [0.9, 0.05, 0.05], seed=0)
        assert len(val) == 1 and len(test) == 1

    def test_bad_ratios(self):
        with pytest.raises(ValidationError):
            split_dataset(list(range(4)), [0.5, 0.6], seed=0)


class TestLoadDriveArrays:
    def test_in_memory_pipeline(self):
        rng = np.random.default_rng(3)
        k = CameraIntrinsics(fx=160.0, fy=160.0, cx=159.5, cy=89.5, width=320, height=180)
        images = rng.integers(0, 256, (6, 180, 320, 3), dtype=np.uint8)
        angles = rng.uniform(-1, 1, 6)
        drive = load_drive_arrays("mem", images, angles, np.arange(6.0), k)
        assert drive.frames.shape == (6, 3, 66, 200)
        assert drive.maps.shape == (66, 200)
        assert (drive.intrinsics.width, drive.intrinsics.height) == (200, 66)

    def test_rejects_unnormalized_angles(self):
        k = CameraIntrinsics(fx=160.0, fy=160.0, cx=159.5, cy=89.5, width=320, height=180)
        images = np.zeros((2, 180, 320, 3), dtype=np.uint8)
        with pytest.raises(ValidationError):
            load_drive_arrays("mem", images, np.array([0.0, 10.0]), np.arange(2.0), k)
