import numpy as np
import pytest

from egpa.errors import ValidationError
from egpa.skeleton import chain_topology, validate_sequence
from egpa.synth import SynthConfig, synthesize


def test_defaults_are_25_joints_100_frames(kinect):
    data = synthesize(SynthConfig(n_clips=8), kinect)
    assert len(data) == 8
    assert all(s.sequence.positions.shape == (100, 25, 3) for s in data)
    assert all(validate_sequence(s.sequence, kinect) == [] for s in data)


def test_same_seed_same_clips(kinect):
    a = synthesize(SynthConfig(n_clips=6, n_frames=20, seed=4), kinect)
    b = synthesize(SynthConfig(n_clips=6, n_frames=20, seed=4), kinect)
    assert all(np.array_equal(x.sequence.positions, y.sequence.positions) for x, y in zip(a, b))
    assert [x.labels for x in a] == [y.labels for y in b]


def test_different_seeds_differ(kinect):
    a = synthesize(SynthConfig(n_clips=2, n_frames=20, seed=1), kinect)
    b = synthesize(SynthConfig(n_clips=2, n_frames=20, seed=2), kinect)
    assert not np.array_equal(a[0].sequence.positions, b[0].sequence.positions)


def test_labels_within_range(kinect):
    data = synthesize(SynthConfig(n_clips=40, n_frames=10, error_fraction=0.5), kinect)
    assert len({s.subject_id for s in data}) == 8
    for s in data:
        s.labels.check_score(0, 10)
        assert s.provenance.kind == "original"
    assert any(s.labels.has_error for s in data) and not all(s.labels.has_error for s in data)


def test_generic_topology(kinect):
    data = synthesize(SynthConfig(n_clips=3, n_frames=12), chain_topology(6))
    assert data[0].sequence.positions.shape == (12, 6, 3)


def test_invalid_sizes():
    with pytest.raises(ValidationError):
        SynthConfig(n_frames=1)
    with pytest.raises(ValidationError):
        SynthConfig(n_exercises=9)
