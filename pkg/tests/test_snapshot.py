"""Binary snapshot round-trips for models and full tracker state."""

import numpy as np
import pytest

from convtrack.config import desk_defaults
from convtrack.dataset import SynthSpec, generate_synthetic
from convtrack.densemap import DenseMap
from convtrack.features import default_stack
from convtrack.regression import FilterBank
from convtrack.scale import ScaleFilter, scale_label
from convtrack.snapshot import (
    SnapshotError,
    load_model,
    load_tracker,
    save_model,
    save_tracker,
)
from convtrack.tracker import Tracker


class TestModelRoundTrip:
    def test_stack_and_filters(self, tmp_path):
        rng = np.random.default_rng(0)
        stack = default_stack(rng)
        fb = FilterBank(DenseMap(rng.normal(size=(16, 7, 7))))
        path = str(tmp_path / "model.snap")
        save_model(path, stack, fb)
        stack2, fb2, scale2 = load_model(path)
        assert scale2 is None
        np.testing.assert_array_equal(fb2.f.data, fb.f.data)
        assert len(stack2.layers) == len(stack.layers)
        for a, b in zip(stack.layers, stack2.layers):
            np.testing.assert_array_equal(a.weights, b.weights)
            assert a.relu == b.relu and a.stride == b.stride

    def test_with_scale_filter(self, tmp_path):
        rng = np.random.default_rng(1)
        stack = default_stack(rng)
        fb = FilterBank(DenseMap(rng.normal(size=(16, 7, 7))))
        sf = ScaleFilter(
            rng.normal(size=(5, 12)), 5, 1.02, scale_label(5, 5 / 16.0), trained=True
        )
        path = str(tmp_path / "model.snap")
        save_model(path, stack, fb, sf)
        _, _, sf2 = load_model(path)
        np.testing.assert_array_equal(sf2.weights, sf.weights)
        np.testing.assert_array_equal(sf2.label, sf.label)
        assert sf2.trained and sf2.factor == sf.factor

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.snap"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
        with pytest.raises(SnapshotError):
            load_model(str(path))


class TestTrackerRoundTrip:
    def test_restored_tracker_steps_identically(self, tmp_path):
        spec = SynthSpec(
            canvas=(96, 96), object_size=(24, 24), velocity=(1.0, 0.5), seed=2, frames=6
        )
        seq = generate_synthetic(spec)
        cfg = desk_defaults()
        tracker = Tracker.init(seq.frame(0), seq.annotations[0], cfg)
        tracker.step(seq.frame(1))
        path = str(tmp_path / "tracker.snap")
        save_tracker(path, tracker)
        restored = load_tracker(path)
        assert restored.history.pnr_values == tracker.history.pnr_values
        for i in range(2, len(seq)):
            a = tracker.step(seq.frame(i))
            b = restored.step(seq.frame(i))
            assert a.center == b.center
            assert a.size == b.size
            assert a.score == b.score
            assert a.updated == b.updated

    def test_model_only_snapshot_has_no_state(self, tmp_path):
        rng = np.random.default_rng(3)
        stack = default_stack(rng)
        fb = FilterBank(DenseMap(rng.normal(size=(16, 7, 7))))
        path = str(tmp_path / "model.snap")
        save_model(path, stack, fb)
        with pytest.raises((SnapshotError, Exception)):
            load_tracker(path)
