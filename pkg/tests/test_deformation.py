import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skelsplat.autodiff import Tape, Tensor, no_grad
from skelsplat.deformation import (
    DeformationConfig,
    DeformationError,
    DeformationModel,
    JointPoseSample,
    config_from_dict,
    newton_schulz_orthonormalize,
    normalize_log_weights,
    skinning_weights_from,
)
from skelsplat.gaussians import init_from_points
from skelsplat.geometry import axis_angle_to_quat
from skelsplat.skeleton import validate_skeleton

from oracles import fk_matrix_chain, random_quats, rbf_weights

SMALL = DeformationConfig(time_frequencies=2, position_frequencies=2, pose_hidden=(8, 8), correction_hidden=(8,),
                          detail_hidden=(8,), seed=3)


def _skeleton():
    return validate_skeleton([[0, 0, 0], [1, 0, 0], [2, 0.2, 0]], [[0, 1], [1, 2]])


def _model(n=50, cfg=SMALL, seed=0):
    rng = np.random.default_rng(seed)
    pts = rng.uniform([-0.2, -0.3, -0.3], [2.2, 0.5, 0.3], size=(n, 3))
    return DeformationModel(_skeleton(), init_from_points(pts, rng.uniform(size=(n, 3))), cfg)


def _jitter(model, scale=0.05, seed=1):
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data[...] += rng.normal(scale=scale, size=p.shape)


# ---------------------------------------------------------------------------
# skinning weights
# ---------------------------------------------------------------------------
@given(st.integers(0, 2**32 - 1))
@settings(max_examples=10)
def test_weights_match_direct_rbf_ratio(seed):
    rng = np.random.default_rng(seed)
    d = rng.uniform(0, 2, size=(200, 4))
    r = rng.uniform(0.3, 2, size=4)
    dw = rng.uniform(0.2, 3, size=(200, 4))
    np.testing.assert_allclose(skinning_weights_from(d, r, dw), rbf_weights(d, r, dw), rtol=1e-12, atol=1e-15)


def test_weights_rows_sum_to_one_at_scale():
    rng = np.random.default_rng(0)
    d = rng.uniform(0, 50, size=(100_000, 3))
    r = rng.uniform(1e-3, 5, size=3)
    dw = np.exp(rng.uniform(-20, 20, size=(100_000, 3)))
    w = skinning_weights_from(d, r, dw)
    assert np.all(np.isfinite(w))
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)


def test_single_bone_weight_is_exactly_one():
    w = skinning_weights_from(np.array([[0.3], [100.0]]), np.array([0.01]))
    assert np.all(w == 1.0)


def test_equidistant_two_bone_split():
    w = skinning_weights_from(np.array([[0.7, 0.7]]), np.array([0.4, 0.4]))
    np.testing.assert_allclose(w, [[0.5, 0.5]], atol=1e-12)


def test_nonfinite_rows_fall_back_to_uniform(caplog):
    logits = np.array([[0.0, np.nan, 1.0], [0.0, 1.0, 2.0]])
    w = normalize_log_weights(logits).data
    np.testing.assert_allclose(w[0], 1 / 3)
    np.testing.assert_allclose(w[1], np.exp([0, 1, 2]) / np.exp([0, 1, 2]).sum())
    assert "non-finite" in caplog.text


def test_radii_must_be_positive():
    with pytest.raises(ValueError):
        skinning_weights_from(np.ones((1, 2)), np.array([1.0, 0.0]))


def test_initial_model_uses_pure_rbf_prior():
    m = _model()
    heads, tails = m.skeleton.bone_endpoints()
    r = 0.5 * np.linalg.norm(tails - heads, axis=1)
    np.testing.assert_allclose(np.exp(m.skinning.log_radii.data), r)
    np.testing.assert_allclose(m.skinning_weights().data, rbf_weights(m.skinning.distances, r), atol=1e-12)


# ---------------------------------------------------------------------------
# deformation
# ---------------------------------------------------------------------------
def test_rest_pose_at_initialisation_is_identity():
    m = _model()
    out = m.deform(0.37)
    np.testing.assert_allclose(out.centers.data, m.canon_centers, atol=1e-12)
    np.testing.assert_allclose(out.covariances.data, m.canon_cov, atol=1e-12)
    np.testing.assert_array_equal(out.offsets.data, 0.0)


def test_lbs_matches_explicit_matrix_oracle():
    m = _model(cfg=DeformationConfig(**{**SMALL.__dict__, "use_detail": False}))
    _jitter(m)
    rng = np.random.default_rng(4)
    q = random_quats(rng, 3)
    p = rng.normal(size=3)
    out = m.deform_pose(JointPoseSample(Tensor(q), Tensor(p)))
    G = fk_matrix_chain(m.skeleton.rest_positions, list(m.skeleton.parent), q, p)
    W = m.skinning_weights().data
    expected = np.zeros_like(m.canon_centers)
    for b, j in enumerate(m.skeleton.bone_joints):
        expected += W[:, b : b + 1] * (m.canon_centers @ G[j][:3, :3].T + G[j][:3, 3])
    np.testing.assert_allclose(out.centers.data, expected, atol=1e-12)


def test_rigid_part_moves_rigidly():
    m = _model()
    # one-hot weights: every Gaussian follows bone 0 only
    W = Tensor(np.tile([1.0, 0.0], (m.num_gaussians, 1)))
    q = np.tile([1.0, 0, 0, 0], (3, 1))
    q[0] = axis_angle_to_quat([0, 0, 1], 0.4)
    out = m.deform_pose(JointPoseSample(Tensor(q), Tensor(np.zeros(3))), W)
    R = out.rotations.data
    np.testing.assert_allclose(R @ np.swapaxes(R, 1, 2), np.broadcast_to(np.eye(3), R.shape) @ (m.canon_rotations @ np.swapaxes(m.canon_rotations, 1, 2)), atol=1e-12)
    d0 = np.linalg.norm(m.canon_centers[0] - m.canon_centers[1])
    assert np.linalg.norm(out.centers.data[0] - out.centers.data[1]) == pytest.approx(d0, abs=1e-12)


def test_newton_schulz_recovers_rotation():
    rng = np.random.default_rng(0)
    R = np.stack([np.linalg.qr(rng.normal(size=(3, 3)))[0] for _ in range(5)])
    R *= np.sign(np.linalg.det(R))[:, None, None]
    noisy = 0.9 * R + rng.normal(scale=0.02, size=R.shape)
    X = newton_schulz_orthonormalize(Tensor(noisy)).data
    np.testing.assert_allclose(X @ np.swapaxes(X, 1, 2), np.broadcast_to(np.eye(3), X.shape), atol=1e-9)
    u, _, vt = np.linalg.svd(noisy)
    np.testing.assert_allclose(X, u @ vt, atol=1e-9)


def test_nonfinite_pose_names_the_joint():
    m = _model()
    q = np.tile([1.0, 0, 0, 0], (3, 1))
    q[2] = [np.nan, 0, 0, 0]
    with pytest.raises(DeformationError, match=r"\[2\]"):
        with np.errstate(invalid="ignore"):
            m.deform_pose(JointPoseSample(Tensor(q), Tensor(np.zeros(3))))


def test_pose_network_clamps_time(caplog):
    m = _model()
    pose = m.predict_pose(1.5)
    assert pose.time == 1.0
    assert "clamping" in caplog.text


def test_gradients_of_all_groups_match_finite_differences():
    m = _model(n=50)
    _jitter(m, 0.1)
    target = np.random.default_rng(9).normal(size=(50, 3))

    def value():
        with no_grad():
            return float(np.sum(m.deform(0.3).centers.data * target))

    for p in m.parameters():
        p.zero_grad()
    with Tape() as tape:
        y = (m.deform(0.3).centers * target).sum()
    tape.backward(y)
    rng = np.random.default_rng(2)
    for group, params in m.parameter_groups().items():
        for p in params:
            idx = [tuple(rng.integers(0, s) for s in p.shape) for _ in range(3)]
            for i in idx:
                old = p.data[i]
                p.data[i] = old + 1e-6
                fp = value()
                p.data[i] = old - 1e-6
                fm = value()
                p.data[i] = old
                num = (fp - fm) / 2e-6
                assert p.grad[i] == pytest.approx(num, rel=1e-4, abs=1e-7), f"{p.name}{i}"


def test_interpolation_shares_weights_and_matches_deform():
    m = _model()
    _jitter(m)
    seq = m.interpolate_sequence([0.0, 0.5, 1.0])
    assert len(seq) == 3
    with no_grad():
        np.testing.assert_allclose(seq[1].centers.data, m.deform(0.5).centers.data, atol=1e-14)
    assert m.interpolate_sequence([]) == []


def test_save_and_reload_round_trip(tmp_path):
    m = _model()
    _jitter(m)
    m.save(tmp_path / "m.ckpt", meta={"note": "x"})
    arrays, meta = DeformationModel.read(tmp_path / "m.ckpt")
    assert meta["note"] == "x"
    cfg = config_from_dict(meta["config"])
    assert cfg == SMALL
    fresh = _model(cfg=cfg)
    fresh.load_arrays(arrays)
    with no_grad():
        np.testing.assert_array_equal(fresh.deform(0.7).centers.data, m.deform(0.7).centers.data)
    del arrays["log_radii"]
    with pytest.raises(KeyError):
        fresh.load_arrays(arrays)


def test_ablation_flags_drop_parameter_groups():
    m = _model(cfg=DeformationConfig(**{**SMALL.__dict__, "use_correction": False, "use_detail": False}))
    assert set(m.parameter_groups()) == {"theta", "log_radii"}
    assert set(_model().parameter_groups()) == {"theta", "log_radii", "phi", "psi"}
