"""Sequence ingestion, ground-truth parsing, and the synthetic generator."""

import os

import numpy as np
import pytest

from convtrack.dataset import (
    DataError,
    Sequence,
    SynthSpec,
    export_sequence,
    format_groundtruth,
    generate_synthetic,
    load_sequence,
    parse_groundtruth,
)
from convtrack.densemap import DenseMap


class TestParseGroundtruth:
    def test_comma_separated(self):
        assert parse_groundtruth("10,20,30,40") == [(10.0, 20.0, 30.0, 40.0)]

    def test_tab_separated(self):
        assert parse_groundtruth("10\t20\t30\t40") == [(10.0, 20.0, 30.0, 40.0)]

    def test_space_separated_and_floats(self):
        assert parse_groundtruth("10.5 20 30 40.25") == [(10.5, 20.0, 30.0, 40.25)]

    def test_nonpositive_size_reports_line(self):
        with pytest.raises(DataError, match="line 1"):
            parse_groundtruth("10,20,0,40")

    def test_malformed_line_number(self):
        with pytest.raises(DataError, match="line 2"):
            parse_groundtruth("1,2,3,4\n5,6,seven,8")

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            parse_groundtruth("  \n ")

    def test_round_trip(self):
        boxes = [(10.0, 20.5, 30.0, 40.0), (1.25, 2.0, 3.0, 4.0)]
        assert parse_groundtruth(format_groundtruth(boxes)) == boxes


class TestLoadSequence:
    @staticmethod
    def write_sequence(tmp_path, n_frames, n_boxes, names=None):
        seq = generate_synthetic(
            SynthSpec(canvas=(32, 32), object_size=(10, 10), seed=0, frames=n_frames)
        )
        d = tmp_path / "seq"
        export_sequence(seq, str(d))
        if names:
            img = d / "img"
            existing = sorted(os.listdir(img))
            for old, new in zip(existing, names):
                os.rename(img / old, img / new)
        if n_boxes != n_frames:
            lines = (d / "groundtruth_rect.txt").read_text().splitlines()
            (d / "groundtruth_rect.txt").write_text("\n".join(lines[:n_boxes]) + "\n")
        return d

    def test_three_frames_three_boxes(self, tmp_path):
        d = self.write_sequence(tmp_path, 3, 3)
        seq = load_sequence(str(d))
        assert len(seq) == 3
        assert len(seq.annotations) == 3

    def test_numeric_frame_order(self, tmp_path):
        names = [f"img{i}.pgm" for i in [1, 2, 3, 4, 5, 6, 7, 8, 9, 10]]
        d = self.write_sequence(tmp_path, 10, 10, names=names)
        seq = load_sequence(str(d))
        loaded = [os.path.basename(f) for f in seq.frames]
        assert loaded == [f"img{i}.pgm" for i in range(1, 11)]

    def test_fewer_boxes_warns(self, tmp_path):
        d = self.write_sequence(tmp_path, 10, 8)
        with pytest.warns(UserWarning):
            seq = load_sequence(str(d))
        assert len(seq.frames) == 10
        assert len(seq.annotations) == 8

    def test_missing_groundtruth(self, tmp_path):
        d = self.write_sequence(tmp_path, 2, 2)
        os.remove(d / "groundtruth_rect.txt")
        with pytest.raises(DataError):
            load_sequence(str(d))

    def test_missing_img_dir(self, tmp_path):
        with pytest.raises(DataError):
            load_sequence(str(tmp_path))

    def test_coordinate_round_trip(self, tmp_path):
        # export converts to 1-based on disk; load converts back
        seq = generate_synthetic(
            SynthSpec(canvas=(32, 32), object_size=(10, 10), seed=1, frames=2)
        )
        d = tmp_path / "rt"
        export_sequence(seq, str(d))
        loaded = load_sequence(str(d))
        for a, b in zip(seq.annotations, loaded.annotations):
            np.testing.assert_allclose(a, b, atol=1e-9)


class TestGenerateSynthetic:
    def test_static_boxes_identical(self):
        seq = generate_synthetic(
            SynthSpec(canvas=(48, 48), object_size=(12, 12), seed=2, frames=5)
        )
        for box in seq.annotations[1:]:
            assert box == seq.annotations[0]

    def test_velocity_arithmetic_progression(self):
        seq = generate_synthetic(
            SynthSpec(
                canvas=(48, 96), object_size=(12, 12), velocity=(2.0, 0.0), seed=3, frames=10
            )
        )
        xs = [b[0] for b in seq.annotations]
        np.testing.assert_allclose(np.diff(xs), 2.0, atol=1e-12)

    def test_zoom_geometric_growth(self):
        seq = generate_synthetic(
            SynthSpec(canvas=(256, 256), object_size=(20.0, 20.0), zoom=1.02, seed=4, frames=20)
        )
        assert seq.annotations[-1][2] == pytest.approx(20.0 * 1.02**19)

    def test_bitwise_deterministic(self):
        spec = SynthSpec(canvas=(48, 48), object_size=(12, 12), velocity=(1, 0), seed=5, frames=4)
        a = generate_synthetic(spec)
        b = generate_synthetic(spec)
        for i in range(len(a)):
            np.testing.assert_array_equal(a.frame(i).data, b.frame(i).data)

    def test_boxes_inside_canvas(self):
        seq = generate_synthetic(
            SynthSpec(canvas=(48, 64), object_size=(14, 12), velocity=(1.5, 0.5), seed=6, frames=20)
        )
        for x, y, w, h in seq.annotations:
            assert x >= 0 and y >= 0
            assert x + w <= 64 and y + h <= 48

    def test_truncates_with_warning_when_leaving_canvas(self):
        spec = SynthSpec(
            canvas=(48, 48), object_size=(12, 12), velocity=(10.0, 0.0), seed=7, frames=20
        )
        with pytest.warns(UserWarning, match="truncated"):
            seq = generate_synthetic(spec)
        assert len(seq) < 20

    def test_occlusion_changes_pixels_not_boxes(self):
        base = SynthSpec(canvas=(48, 48), object_size=(16, 16), seed=8, frames=6)
        occ = SynthSpec(
            canvas=(48, 48), object_size=(16, 16), seed=8, frames=6, occlusion=(2, 4)
        )
        a = generate_synthetic(base)
        b = generate_synthetic(occ)
        assert a.annotations == b.annotations
        np.testing.assert_array_equal(a.frame(1).data, b.frame(1).data)
        assert not np.array_equal(a.frame(3).data, b.frame(3).data)

    def test_frame_values_in_unit_range(self):
        seq = generate_synthetic(SynthSpec(canvas=(48, 48), object_size=(12, 12), seed=9, frames=3))
        for i in range(len(seq)):
            data = seq.frame(i).data
            assert data.min() >= 0.0 and data.max() <= 1.0


class TestSequenceInvariants:
    def test_more_boxes_than_frames_rejected(self):
        frame = DenseMap(np.zeros((1, 8, 8)))
        with pytest.raises(DataError):
            Sequence("x", [frame], [(0, 0, 2, 2), (0, 0, 2, 2)])

    def test_nonpositive_box_rejected(self):
        frame = DenseMap(np.zeros((1, 8, 8)))
        with pytest.raises(DataError):
            Sequence("x", [frame], [(0, 0, 0, 2)])
