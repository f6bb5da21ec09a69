import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from egpa.errors import ValidationError
from egpa.metrics import (
    Prediction, attention_stats, err_acc, evaluate, macro_f1, mae, mape, rmse, split_half_divergence,
    write_report,
)
from egpa.model import AttentionRecord, HeadOutputs, ModelConfig, init_params
from egpa.skeleton import AssessmentLabels, chain_topology
from egpa.synth import SynthConfig, synthesize


def test_regression_examples():
    assert mae([1, 2], [1, 2]) == 0 and rmse([1, 2], [1, 2]) == 0
    assert mae([0, 0], [1, 3]) == 2.0
    assert rmse([0, 0], [1, 3]) == pytest.approx(math.sqrt(5), abs=1e-15)
    assert rmse([4.0], [1.5]) == mae([4.0], [1.5]) == 2.5
    assert mape([90], [100]) == pytest.approx(10.0, abs=1e-12)
    assert mape([3, 4], [3, 4]) == 0


def test_mape_guard_names_index():
    with pytest.raises(ValidationError, match="index 1"):
        mape([1, 2], [1, 0])


def test_length_mismatch():
    for fn in (mae, rmse, mape, err_acc):
        with pytest.raises(ValidationError):
            fn([1, 2], [1])
    with pytest.raises(ValidationError):
        mae([], [])


def test_classification_examples():
    assert err_acc([1, 0, 1], [1, 0, 1]) == 1.0
    assert err_acc([1, 1, 1, 1, 0, 0, 0, 0], [1, 1, 0, 0, 1, 1, 0, 0]) == 0.5
    assert macro_f1([0, 1, 2], [0, 1, 2], 3) == 1.0
    assert macro_f1([0, 0, 1, 1], [0, 1, 0, 1], 2) == pytest.approx(0.5, abs=1e-15)


def test_absent_class_counts_as_zero():
    # Class 2 never occurs: its F1 is 0, so the perfect two-class score is diluted.
    assert macro_f1([0, 1], [0, 1], 3) == pytest.approx(2 / 3, abs=1e-15)
    assert macro_f1([0, 0], [1, 1], 2) == 0.0


def test_out_of_range_label():
    with pytest.raises(ValidationError):
        macro_f1([0, 3], [0, 1], 3)


def test_small_instances_match_confusion_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 7))
        p, t = rng.integers(0, 3, n), rng.integers(0, 3, n)
        assert macro_f1(p, t, 3) == pytest.approx(oracles.macro_f1(p.tolist(), t.tolist(), 3), abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=30), st.permutations(range(4)))
def test_relabeling_invariance(pairs, perm):
    p, t = [a for a, _ in pairs], [b for _, b in pairs]
    pp, tt = [perm[a] for a in p], [perm[b] for b in t]
    assert macro_f1(pp, tt, 4) == pytest.approx(macro_f1(p, t, 4), abs=1e-15)
    assert err_acc([x == 0 for x in p], [x == 0 for x in t]) == \
        err_acc([x == perm[0] for x in pp], [x == perm[0] for x in tt])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=50))
def test_mae_bounded_by_rmse(pairs):
    p, t = zip(*pairs)
    assert mae(p, t) <= rmse(p, t) * (1 + 1e-12) + 1e-12


def test_attention_stats_examples():
    a = AttentionRecord(np.full((3, 2, 2), 0.4), None)
    b = AttentionRecord(np.full((5, 2, 2), 0.6), None)
    assert attention_stats([a], [a]).divergence == 0
    assert attention_stats([a], [b]).divergence == pytest.approx(0.2, abs=1e-15)


def test_attention_stats_match_loop_average(rng):
    recs = [AttentionRecord(rng.uniform(size=(int(rng.integers(1, 5)), 3, 3)), None) for _ in range(4)]
    other = [AttentionRecord(rng.uniform(size=(2, 3, 3)), None)]
    stats = attention_stats(recs, other)
    np.testing.assert_allclose(stats.mean_correct, oracles.mean_mask([r.mask.tolist() for r in recs]),
                               rtol=0, atol=1e-12)
    ref = np.array(oracles.mean_mask([r.mask.tolist() for r in other]))
    assert stats.divergence == pytest.approx(np.mean(np.abs(stats.mean_correct - ref)), abs=1e-12)
    assert split_half_divergence(recs, 0) >= 0


def test_attention_stats_need_records():
    with pytest.raises(ValidationError):
        attention_stats([], [AttentionRecord(np.ones((1, 2, 2)), None)])


def _forced(labels, exercise="ex"):
    return Prediction("s", exercise, HeadOutputs(np.eye(2)[labels.exercise_class] * 10,
                                                 10.0 if labels.has_error else -10.0,
                                                 np.eye(6)[labels.error_type_index] * 10,
                                                 labels.quality_score), labels)


def test_perfect_prediction_report():
    cfg = ModelConfig.desk(n_exercises=2)
    lab = AssessmentLabels(1, True, "rom", 6.0)
    rep = evaluate({}, [object()], cfg, chain_topology(2), predictions=[_forced(lab)])
    r = rep.overall
    assert r["mae"] == r["rmse"] == r["mape"] == 0
    assert r["err_acc"] == 1.0 and r["exercise_acc"] == 1.0
    # With a single class present, the other five error types count as zero.
    assert r["error_type_f1"] == pytest.approx(1 / 6)


@pytest.fixture(scope="module")
def small_eval(kinect):
    cfg = ModelConfig.desk(layer_channels=(4,), attention_hidden=4, attention_embed=2, temporal_kernel=3)
    data = synthesize(SynthConfig(n_subjects=3, n_clips=12, n_frames=15, seed=2), kinect)
    params = init_params(cfg, 0)
    return cfg, data, params


def test_report_partitions_and_inequality(small_eval, kinect):
    cfg, data, params = small_eval
    rep = evaluate(params, data, cfg, kinect)
    assert sum(r["n"] for r in rep.per_exercise.values()) == rep.sample_count == len(data)
    for _, row in rep.rows():
        assert row["mae"] <= row["rmse"] + 1e-12
        assert 0 <= row["err_acc"] <= 1 and 0 <= row["macro_f1"] <= 1
        assert row["mape"] >= 0


def test_report_ignores_sample_order(small_eval, kinect):
    cfg, data, params = small_eval
    a = evaluate(params, data, cfg, kinect)
    b = evaluate(params, data[::-1], cfg, kinect)
    assert a.overall == b.overall and a.per_exercise == b.per_exercise


def test_empty_evaluation_rejected(small_eval, kinect):
    cfg, _, params = small_eval
    with pytest.raises(ValidationError):
        evaluate(params, [], cfg, kinect)


def test_report_csv_column_order(small_eval, kinect, tmp_path):
    cfg, data, params = small_eval
    write_report(evaluate(params, data, cfg, kinect), tmp_path / "r.csv", tmp_path / "r.json")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "exercise,MAE,RMSE,MAPE,Err-Acc,Macro-F1"
    assert lines[1].startswith("overall,")
    assert len(lines) == 2 + len({s.exercise_id for s in data})
