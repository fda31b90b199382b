import numpy as np
import pytest

from orientsteer.data_pipeline import load_manifest, normalize_angle
from orientsteer.errors import ValidationError
from orientsteer.synthetic_track import (
    LOOKAHEAD,
    STEER_GAIN,
    SplitMix64,
    TrackParams,
    generate_dataset,
    generate_drive,
    render_from_curvature,
    steering_histogram,
)

SMALL = TrackParams(frames_per_drive=24, image_size=(90, 160))


class TestSplitMix64:
    def test_known_sequence_is_stable(self):
        rng = SplitMix64(1234)
        first = [rng.next_u64() for _ in range(3)]
        rng2 = SplitMix64(1234)
        assert first == [rng2.next_u64() for _ in range(3)]

    def test_uniform_in_unit_interval(self):
        rng = SplitMix64(7)
        values = [rng.uniform() for _ in range(1000)]
        assert all(0.0 <= v < 1.0 for v in values)
        assert 0.4 < np.mean(values) < 0.6

    def test_randint_bounds(self):
        rng = SplitMix64(0)
        values = [rng.randint(3, 9) for _ in range(200)]
        assert min(values) == 3 and max(values) == 9


class TestTrackParams:
    def test_rejects_bad_max_angle(self):
        with pytest.raises(ValidationError):
            TrackParams(max_angle=0.0)
        with pytest.raises(ValidationError):
            TrackParams(max_angle=4.0)

    def test_rejects_bad_frame_count(self):
        with pytest.raises(ValidationError):
            TrackParams(frames_per_drive=0)

    def test_intrinsics_center_on_image(self):
        k = SMALL.intrinsics()
        assert (k.width, k.height) == (160, 90)
        assert k.cx == (160 - 1) / 2
        assert k.cy == (90 - 1) / 2


class TestGenerateDrive:
    def test_deterministic(self):
        a = generate_drive(SMALL, 5)
        b = generate_drive(SMALL, 5)
        assert np.array_equal(a.frames, b.frames)
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.curvature, b.curvature)

    def test_different_drive_seeds_differ(self):
        a = generate_drive(SMALL, 1)
        b = generate_drive(SMALL, 2)
        assert not np.array_equal(a.labels, b.labels)

    def test_straight_road_labels_exactly_zero(self):
        params = TrackParams(
            frames_per_drive=16, image_size=(90, 160), curve_scale=0.0
        )
        drive = generate_drive(params, 3)
        assert np.all(drive.labels == 0.0)

    def test_mirrored_curvature_mirrors_frames_and_negates_labels(self):
        drive = generate_drive(SMALL, 11)
        frames_m, labels_m = render_from_curvature(SMALL, -drive.curvature)
        assert np.array_equal(labels_m, -drive.labels)
        assert np.array_equal(frames_m, drive.frames[:, :, ::-1, :])

    def test_label_oracle_from_curvature(self):
        # Independent route: prefix-sum the walk by hand and apply the
        # stated closed form.
        drive = generate_drive(SMALL, 2)
        heading = [0.0]
        for c in drive.curvature:
            heading.append(heading[-1] + c)
        for t in range(SMALL.frames_per_drive):
            raw = STEER_GAIN * (heading[t + LOOKAHEAD] - heading[t])
            expected = min(max(raw, -SMALL.max_angle), SMALL.max_angle)
            assert drive.labels[t] == expected

    def test_labels_within_bounds(self):
        drive = generate_drive(TrackParams(frames_per_drive=64, image_size=(90, 160)), 4)
        assert np.all(np.abs(drive.labels) <= SMALL.max_angle)

    def test_frames_are_rgb_uint8(self):
        drive = generate_drive(SMALL, 0)
        assert drive.frames.dtype == np.uint8
        assert drive.frames.shape == (24, 90, 160, 3)
        # Scene should have real contrast, not a flat image.
        assert drive.frames.std() > 10


class TestGenerateDataset:
    def test_empty_dataset_round_trips(self, tmp_path):
        manifest = generate_dataset(SMALL, 0, tmp_path)
        assert load_manifest(manifest) == []

    def test_round_trip_label_fidelity(self, tmp_path):
        params = TrackParams(frames_per_drive=12, image_size=(90, 160))
        manifest = generate_dataset(params, 2, tmp_path)
        drives = load_manifest(manifest)
        assert [d.drive_id for d in drives] == ["drive_000", "drive_001"]
        for idx, drive in enumerate(drives):
            reference = generate_drive(params, idx)
            parsed = np.array([normalize_angle(r.raw_steering) for r in drive.records])
            assert np.max(np.abs(parsed - reference.labels)) <= 1e-9

    def test_manifest_timestamps_monotone(self, tmp_path):
        manifest = generate_dataset(SMALL, 1, tmp_path)
        drive = load_manifest(manifest)[0]
        times = [r.timestamp for r in drive.records]
        assert all(b > a for a, b in zip(times, times[1:]))


class TestSteeringHistogram:
    def test_all_zero_labels_fill_middle_bin(self):
        edges, counts = steering_histogram(np.zeros(10), 3)
        assert counts.tolist() == [0, 10, 0]
        assert edges[0] == -1.0 and edges[-1] == 1.0

    def test_counts_conserved(self):
        rng = np.random.default_rng(0)
        labels = rng.normal(0, 0.2, 137)
        _, counts = steering_histogram(labels, 11)
        assert counts.sum() == 137

    def test_symmetric_labels_symmetric_counts(self):
        labels = np.array([-0.4, -0.2, -0.1, 0.1, 0.2, 0.4])
        _, counts = steering_histogram(labels, 5)
        assert np.array_equal(counts, counts[::-1])

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            steering_histogram([], 3)

    def test_bad_bins_rejected(self):
        with pytest.raises(ValidationError):
            steering_histogram([0.1], 0)
