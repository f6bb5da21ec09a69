import math

import numpy as np
import pytest

from conftest import sample
from egpa.augment import default_specs
from egpa.errors import ValidationError
from egpa.ingestion import LabeledSample, Provenance, subject_split
from egpa.model import ModelConfig
from egpa.skeleton import AssessmentLabels, MotionSequence
from egpa.synth import SynthConfig, synthesize
from egpa.training import (
    TrainConfig, TrainState, adam_step, curriculum_mix, curriculum_schedule, lr_schedule,
    train_two_stage, write_history,
)


def _state(value=0.0, lr=0.001):
    return TrainState.fresh({"w": np.array([value])}, lr)


def test_zero_gradient_first_step_keeps_params():
    s = adam_step(_state(1.5), {"w": np.zeros(1)})
    assert s.params["w"][0] == 1.5 and s.step == 1


def test_two_hand_computed_steps():
    s = _state(1.0, lr=0.1)
    w, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate((0.5, -2.0), start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        adam_step(s, {"w": np.array([g])})
        assert abs(s.params["w"][0] - w) <= 1e-12


def test_constant_gradient_step_tends_to_lr_times_sign():
    s = _state(0.0, lr=0.01)
    prev = 0.0
    for _ in range(2000):
        adam_step(s, {"w": np.array([-3.0])})
        step = s.params["w"][0] - prev
        prev = s.params["w"][0]
    assert step == pytest.approx(0.01, rel=1e-6)


def test_non_finite_gradient_named():
    with pytest.raises(ValidationError, match="w"):
        adam_step(_state(), {"w": np.array([np.nan])})


def _run_schedule(metrics, **cfg):
    config = TrainConfig(**cfg)
    state = _state(lr=0.001)
    lrs = []
    for x in metrics:
        lr_schedule(state, x, config)
        lrs.append(state.lr)
    return lrs


def test_improving_metric_keeps_lr():
    assert set(_run_schedule([1.0 - 0.01 * i for i in range(20)])) == {0.001}


def test_plateau_divides_lr_by_ten():
    lrs = _run_schedule([1.0] * 6, plateau_patience=5)
    assert lrs[-1] == 0.001 * 0.1
    assert lrs[:5] == [0.001] * 5


def test_two_plateaus():
    lrs = _run_schedule([1.0] * 11, plateau_patience=5)
    assert lrs[-1] == pytest.approx(1e-5, rel=1e-12)
    assert lrs[-1] == 0.001 * 0.1 * 0.1


def test_lr_never_increases():
    rng = np.random.default_rng(0)
    lrs = _run_schedule(list(rng.uniform(size=100)), plateau_patience=2)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_schedule_rejects_non_finite():
    with pytest.raises(ValidationError):
        _run_schedule([float("nan")])


def test_config_validation():
    for bad in (dict(plateau_factor=1.0), dict(plateau_patience=0), dict(aug_fraction_cap=1.5),
                dict(severity_ramp=(0.8, 0.2)), dict(lr_initial=0)):
        with pytest.raises(ValidationError):
            TrainConfig(**bad)


def _pool(n):
    seq = MotionSequence(np.zeros((2, 1, 3)))
    return [LabeledSample(f"a{i}", seq, AssessmentLabels(0, True, "rom", 5.0),
                          Provenance("augmented", "rom", 0.5, i / (n - 1), "o", 0)) for i in range(n)]


def test_epoch_zero_is_originals_only():
    originals = [sample(MotionSequence(np.zeros((2, 1, 3))), sid=f"o{i}") for i in range(10)]
    mixed, info = curriculum_mix(0, originals, _pool(20), TrainConfig(), seed=0)
    assert info["aug_fraction"] == 0 and info["n_augmented"] == 0
    assert mixed == originals


def test_full_ramp_gives_one_to_one_mix():
    cfg = TrainConfig(ramp_epochs=4)
    originals = [sample(MotionSequence(np.zeros((2, 1, 3))), sid=f"o{i}") for i in range(10)]
    mixed, info = curriculum_mix(7, originals, _pool(30), cfg, seed=0)
    assert info["aug_fraction"] == 0.5 and info["severity_cap"] == 1.0
    assert info["n_augmented"] == 10 and len(mixed) == 20


def test_curriculum_is_monotone_and_respects_severity():
    cfg = TrainConfig(ramp_epochs=10)
    originals = [sample(MotionSequence(np.zeros((2, 1, 3))), sid=f"o{i}") for i in range(10)]
    prev = (-1.0, -1.0)
    for e in range(21):
        f, cap = curriculum_schedule(e, cfg)
        assert f >= prev[0] and cap >= prev[1]
        prev = (f, cap)
        mixed, info = curriculum_mix(e, originals, _pool(30), cfg, seed=1)
        assert all(s.provenance.severity_norm <= cap + 1e-12 for s in mixed[10:])
        again, _ = curriculum_mix(e, originals, _pool(30), cfg, seed=1)
        assert [s.sample_id for s in again] == [s.sample_id for s in mixed]


def test_disabled_curriculum_mixes_fully_from_start():
    assert curriculum_schedule(0, TrainConfig(), enabled=False) == (0.5, 1.0)


@pytest.fixture(scope="module")
def tiny_run(kinect):
    data = synthesize(SynthConfig(n_subjects=4, n_clips=12, n_frames=20, seed=3), kinect)
    train, val = subject_split(data, 0.25, 3)
    model = ModelConfig.desk(layer_channels=(4,), attention_hidden=4, attention_embed=2, temporal_kernel=3)
    cfg = TrainConfig(lr_initial=0.01, max_epochs=4, ramp_epochs=2, seed=5, early_stop_patience=3)
    result = train_two_stage(train, val, default_specs(kinect), model, cfg, kinect)
    return train, val, model, cfg, result


def test_history_is_reproducible(tiny_run, kinect):
    train, val, model, cfg, first = tiny_run
    second = train_two_stage(train, val, default_specs(kinect), model, cfg, kinect)
    assert first.history == second.history
    assert all(np.array_equal(first.params[k], second.params[k]) for k in first.params)


def test_stage_two_starts_from_stage_one_best(tiny_run, kinect, monkeypatch):
    train, val, model, cfg, result = tiny_run
    first_stage2 = next(r for r in result.history if r["stage"] == 2)
    assert first_stage2["aug_fraction"] == 0 and first_stage2["epoch"] == 0
    seen = []
    fresh = TrainState.fresh.__func__

    def spy(cls, params, lr, stage=1):
        seen.append((stage, {k: np.array(v) for k, v in params.items()}))
        return fresh(cls, params, lr, stage)

    monkeypatch.setattr(TrainState, "fresh", classmethod(spy))
    again = train_two_stage(train, val, default_specs(kinect), model, cfg, kinect)
    stage2_init = dict(seen)[2]
    assert all(np.array_equal(stage2_init[k], again.stage1_params[k]) for k in stage2_init)


def test_lr_column_non_increasing_within_stage(tiny_run):
    _, _, _, _, result = tiny_run
    for stage in (1, 2):
        lrs = [r["lr"] for r in result.history if r["stage"] == stage]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_history_csv_columns(tiny_run, tmp_path):
    write_history(tiny_run[4].history, tmp_path / "h.csv")
    head = (tmp_path / "h.csv").read_text().splitlines()[0]
    assert head == "epoch,stage,train_loss,val_loss,lr,aug_fraction,severity_cap"


def test_early_stop_after_patience(kinect):
    data = synthesize(SynthConfig(n_subjects=3, n_clips=6, n_frames=12, seed=0), kinect)
    train, val = subject_split(data, 0.34, 0)
    model = ModelConfig.desk(layer_channels=(2,), attention_hidden=2, attention_embed=2, temporal_kernel=3)
    # A huge learning rate makes the validation loss worsen after the first epochs.
    cfg = TrainConfig(lr_initial=5.0, max_epochs=30, early_stop_patience=1, seed=0)
    res = train_two_stage(train, val, [], model, cfg, kinect)
    vals = [r["val_loss"] for r in res.history]
    best = int(np.argmin(vals))
    assert len(vals) <= best + 2
    assert all(r["stage"] == 1 for r in res.history)


def test_best_checkpoint_has_lowest_validation_loss(tiny_run, kinect):
    from egpa.training import mean_loss
    train, val, model, cfg, result = tiny_run
    A = np.array(kinect.adjacency)
    val_orig = [s for s in val if s.provenance.kind == "original"]
    stage1_best = min(r["val_loss"] for r in result.history if r["stage"] == 1)
    assert mean_loss(val_orig, result.stage1_params, model, A) == pytest.approx(stage1_best, rel=1e-12)


def test_overlapping_subjects_rejected(kinect):
    data = synthesize(SynthConfig(n_subjects=2, n_clips=4, n_frames=10), kinect)
    with pytest.raises(ValidationError, match="share subjects"):
        train_two_stage(data, data, [], ModelConfig.desk(), TrainConfig(max_epochs=1), kinect)


def test_empty_train_rejected(kinect):
    with pytest.raises(ValidationError):
        train_two_stage([], [], [], ModelConfig.desk(), TrainConfig(), kinect)
