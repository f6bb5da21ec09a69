import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from gradcheck import desk_case, smooth_models
from egpa.errors import ValidationError
from egpa.model import (
    ModelConfig, apply_attention, attention_mask, fit_input_normalization, forward, gcn_layer,
    gradients, init_params, load_params, loss, param_shapes, save_params, temporal_conv,
)
from egpa.skeleton import AssessmentLabels, MotionSequence, chain_topology, normalized_adjacency


def _att_params(rng, F=3, h=5, d=2):
    return {"att.W1": rng.normal(size=(F, h)), "att.b1": rng.normal(size=h),
            "att.W2": rng.normal(size=(h, d)), "att.b2": rng.normal(size=d)}


def test_zero_features_give_half_mask():
    p = {"att.W1": np.ones((3, 4)), "att.b1": np.zeros(4), "att.W2": np.ones((4, 2)), "att.b2": np.zeros(2)}
    assert np.all(attention_mask(np.zeros((5, 3)), p) == 0.5)


def test_mask_matches_scalar_oracle(rng):
    p = _att_params(rng, F=3, h=5, d=2)
    X = rng.normal(size=(4, 3))
    ref = oracles.attention_mask(X.tolist(), *(p[k].tolist() for k in ("att.W1", "att.b1", "att.W2", "att.b2")))
    np.testing.assert_allclose(attention_mask(X, p), ref, rtol=0, atol=1e-10)


def test_mask_permutation_equivariance(rng):
    p = _att_params(rng)
    X = rng.normal(size=(6, 3))
    perm = rng.permutation(6)
    np.testing.assert_allclose(attention_mask(X[perm], p), attention_mask(X, p)[np.ix_(perm, perm)], atol=1e-15)


def test_mask_shape_mismatch(rng):
    with pytest.raises(ValidationError):
        attention_mask(rng.normal(size=(4, 2)), _att_params(rng, F=3))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 3.0))
def test_mask_range_and_sparsity(seed, scale):
    rng = np.random.default_rng(seed)
    p = {k: v * scale for k, v in _att_params(rng).items()}
    M = attention_mask(rng.normal(size=(7, 3)), p)
    assert np.all((M > 0) & (M < 1))
    np.testing.assert_allclose(M, M.T, atol=1e-15)
    upper = np.triu(rng.integers(0, 2, size=(7, 7)), 1)
    A = upper + upper.T
    out = apply_attention(A, M)
    assert np.all(out[(A + np.eye(7)) == 0] == 0)


def test_all_ones_mask_reduces_to_plain_normalization(kinect):
    np.testing.assert_allclose(apply_attention(kinect.adjacency, np.ones((25, 25))),
                               normalized_adjacency(kinect), rtol=0, atol=1e-15)


def test_uniform_half_mask_matches_unmasked(kinect):
    np.testing.assert_allclose(apply_attention(kinect.adjacency, np.full((25, 25), 0.5)),
                               normalized_adjacency(kinect), rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_mask_scaling_cancels(seed, c):
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.integers(0, 2, size=(6, 6)), 1)
    A = upper + upper.T
    M = rng.uniform(0.01, 1, size=(6, 6))
    np.testing.assert_allclose(apply_attention(A, c * M), apply_attention(A, M), rtol=0, atol=1e-12)


def test_apply_attention_shape_mismatch():
    with pytest.raises(ValidationError):
        apply_attention(np.zeros((3, 3)), np.ones((4, 4)))


def test_gcn_identity_propagation(rng):
    H = np.abs(rng.normal(size=(4, 3)))
    assert np.array_equal(gcn_layer(H, np.eye(4), np.eye(3)), H)
    assert not gcn_layer(np.zeros((4, 3)), rng.normal(size=(4, 4)), rng.normal(size=(3, 2))).any()


def test_gcn_matches_triple_loop(rng):
    H, A, W = rng.normal(size=(3, 4)), rng.normal(size=(3, 3)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(gcn_layer(H, A, W), oracles.gcn(H.tolist(), A.tolist(), W.tolist()),
                               rtol=0, atol=1e-10)


def test_gcn_shape_mismatch(rng):
    with pytest.raises(ValidationError):
        gcn_layer(rng.normal(size=(3, 4)), np.eye(3), rng.normal(size=(5, 2)))


def test_unit_kernel_is_identity(rng):
    H = rng.normal(size=(5, 3, 2))
    assert np.array_equal(temporal_conv(H, np.eye(2)[None]), H)


def test_averaging_kernel_boundaries():
    H = np.ones((7, 2, 1))
    out = temporal_conv(H, np.full((3, 1, 1), 1 / 3))
    np.testing.assert_allclose(out[1:-1], 1.0, atol=1e-15)
    np.testing.assert_allclose(out[[0, -1]], 2 / 3, atol=1e-15)


def test_temporal_conv_matches_scalar_loop(rng):
    H, K = rng.normal(size=(6, 3, 2)), rng.normal(size=(5, 2, 4))
    np.testing.assert_allclose(temporal_conv(H, K), oracles.temporal_conv(H.tolist(), K.tolist()),
                               rtol=0, atol=1e-10)


def test_even_kernel_rejected(rng):
    with pytest.raises(ValidationError):
        temporal_conv(rng.normal(size=(4, 2, 2)), rng.normal(size=(2, 2, 2)))
    with pytest.raises(ValidationError):
        ModelConfig(temporal_kernel=4)


def test_config_validation():
    with pytest.raises(ValidationError):
        ModelConfig(layer_channels=())
    with pytest.raises(ValidationError):
        ModelConfig(heads=("colour",))
    with pytest.raises(ValidationError):
        ModelConfig(joint_affine=True)
    assert ModelConfig.from_dict(ModelConfig.desk().to_dict()) == ModelConfig.desk()


def test_zero_quality_head_outputs_its_bias():
    cfg, params, A, X, _ = desk_case(0)
    params["head.quality.W"][:] = 0
    params["head.quality.b"][:] = 6.5
    assert forward(X, A, params, cfg)[0].quality_score == 6.5


def test_joint_permutation_leaves_outputs_unchanged():
    cfg, params, A, X, _ = desk_case(1)
    perm = np.array([3, 0, 4, 1, 2])
    a = forward(X, A, params, cfg)[0]
    b = forward(X[:, perm], A[np.ix_(perm, perm)], params, cfg)[0]
    np.testing.assert_allclose(a.exercise_logits, b.exercise_logits, atol=1e-12)
    np.testing.assert_allclose(a.error_type_logits, b.error_type_logits, atol=1e-12)
    assert a.error_logit == pytest.approx(b.error_logit, abs=1e-12)
    assert a.quality_score == pytest.approx(b.quality_score, abs=1e-12)


def test_forward_and_gradients_are_bitwise_deterministic():
    cfg, params, A, X, labels = desk_case(2)
    _, p2, _, _, _ = desk_case(2)
    a, ga = gradients(X, labels, params, cfg, A)
    b, gb = gradients(X, labels, p2, cfg, A)
    assert a == b
    assert all(np.array_equal(ga[k], gb[k]) for k in ga)


def test_attention_records_cover_every_frame():
    cfg, params, A, X, _ = desk_case(3)
    _, rec = forward(X, A, params, cfg)
    assert rec.mask.shape == (8, 5, 5) and rec.masked_adjacency.shape == (8, 5, 5)
    assert np.all(rec.masked_adjacency[:, (A + np.eye(5)) == 0] == 0)


def test_short_clip_is_padded():
    cfg, params, A, _, _ = desk_case(4, temporal_kernel=9)
    out, _ = forward(np.random.default_rng(0).normal(size=(3, 5, 3)), A, params, cfg)
    assert np.isfinite(out.quality_score)


def test_forward_rejects_wrong_adjacency():
    cfg, params, _, X, _ = desk_case(5)
    with pytest.raises(ValidationError):
        forward(X, np.zeros((4, 4)), params, cfg)


def test_cross_entropy_vanishes_at_large_margin():
    cfg = ModelConfig.desk(heads=("exercise_class",), n_exercises=3)
    from egpa.model import HeadOutputs
    out = HeadOutputs(exercise_logits=np.array([20.0, 0.0, 0.0]))
    assert loss(out, AssessmentLabels(0, False, "none", 5.0), cfg) < 1e-3


def test_matching_quality_has_zero_loss():
    from egpa.model import HeadOutputs
    cfg = ModelConfig.desk(heads=("quality_score",))
    assert loss(HeadOutputs(quality_score=4.25), AssessmentLabels(0, False, "none", 4.25), cfg) == 0.0


def test_loss_matches_scalar_formula(rng):
    from egpa.model import HeadOutputs
    cfg = ModelConfig.desk(n_exercises=3, head_weights={"error_type": 0.5, "quality_score": 2.0})
    out = HeadOutputs(rng.normal(size=3), float(rng.normal()), rng.normal(size=6), 3.3)
    lab = AssessmentLabels(2, True, "temporal", 5.0)

    def ce(z, y):
        return -z[y] + math.log(sum(math.exp(v) for v in z))

    expected = (ce(out.exercise_logits, 2) + math.log(1 + math.exp(-out.error_logit))
                + 0.5 * ce(out.error_type_logits, 3) + 2.0 * (3.3 - 5.0) ** 2)
    assert loss(out, lab, cfg) == pytest.approx(expected, abs=1e-10)


def test_gradient_shapes_match_parameters():
    cfg, params, A, X, labels = desk_case(6)
    _, grads = gradients(X, labels, params, cfg, A)
    assert set(grads) == set(param_shapes(cfg))
    assert all(grads[k].shape == params[k].shape for k in grads)


def test_stationary_quality_head_has_zero_gradient():
    cfg, params, A, X, _ = desk_case(7, heads=("quality_score",))
    pred = forward(X, A, params, cfg)[0].quality_score
    _, grads = gradients(X, AssessmentLabels(0, False, "none", pred), params, cfg, A)
    assert not grads["head.quality.W"].any() and not grads["head.quality.b"].any()


@pytest.mark.parametrize("overrides", [dict(use_attention=False), dict(use_temporal=False),
                                       dict(joint_affine=True, n_joints=5)])
def test_gradients_for_model_variants(overrides):
    for _, worst, _ in smooth_models(2, first_seed=11, **overrides):
        assert worst <= 0


def test_input_preprocessing_removes_position_and_size(rng):
    topo = chain_topology(5)
    cfg = ModelConfig.desk(center_joint=0, scale_bones=topo.edges)
    X = rng.normal(size=(6, 5, 3))
    from egpa.model import _features
    base = _features(X, cfg)
    moved = _features(2.5 * X + np.array([3.0, -1.0, 4.0]), cfg)
    np.testing.assert_allclose(base, moved, atol=1e-12)


def test_input_normalization_buffers_standardize(rng):
    cfg = ModelConfig.desk(per_joint_norm=True)
    seqs = [MotionSequence(rng.normal(loc=3, scale=2, size=(40, 4, 3))) for _ in range(3)]
    buf = fit_input_normalization(seqs, cfg)
    X = np.concatenate([s.positions for s in seqs])
    z = (X - buf["input.mean"]) / buf["input.std"]
    np.testing.assert_allclose(z.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=0), 1, atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    cfg, params, *_ = desk_case(8)
    params["input.mean"] = np.arange(6.0).reshape(2, 3)
    save_params(params, tmp_path / "p.ckpt")
    data = (tmp_path / "p.ckpt").read_bytes()
    assert data[:8] == b"EGPACKPT"
    again = load_params(tmp_path / "p.ckpt")
    assert set(again) == set(params)
    assert all(np.array_equal(again[k], params[k]) for k in params)


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + bytes(8))
    with pytest.raises(ValidationError, match="magic"):
        load_params(tmp_path / "bad.ckpt")


def test_init_is_seeded_glorot():
    cfg = ModelConfig.desk()
    a, b = init_params(cfg, 3), init_params(cfg, 3)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    lim = math.sqrt(6 / (3 + cfg.attention_hidden))
    assert np.max(np.abs(a["att.W1"])) <= lim
    assert not a["att.b1"].any()
