import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from skelsplat.gaussians import (
    GaussianCloud,
    build_covariance,
    eval_sh_color,
    init_from_points,
    rgb_to_sh_dc,
    sh_basis,
    sh_basis_count,
)
from skelsplat.geometry import quat_to_matrix_np

from gradcheck import assert_gradients_match
from oracles import quat_matrix


@given(arrays(np.float64, 4, elements=st.floats(-2, 2)).filter(lambda q: np.linalg.norm(q) > 0.1),
       arrays(np.float64, 3, elements=st.floats(-4, 1)))
def test_covariance_is_spd_with_expected_eigenvalues(q, log_s):
    cov = build_covariance(q, log_s).data
    np.testing.assert_allclose(cov, cov.T, atol=1e-14)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(cov)), np.sort(np.exp(2 * log_s)), rtol=1e-9, atol=1e-14)
    R = quat_matrix(q)
    np.testing.assert_allclose(cov, R @ np.diag(np.exp(2 * log_s)) @ R.T, atol=1e-12)


def test_covariance_gradient():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(3, 3, 3))
    assert_gradients_match(lambda q, s: (build_covariance(q, s) * W).sum(),
                           [rng.normal(size=(3, 4)), rng.normal(scale=0.3, size=(3, 3))])


def test_sh_dc_only_is_view_independent():
    rgb = np.array([[0.2, 0.5, 0.9]])
    sh = np.zeros((1, 4, 3))
    sh[:, 0] = rgb_to_sh_dc(rgb)
    for d in ([1.0, 0, 0], [0, 0, -1.0]):
        np.testing.assert_allclose(eval_sh_color(sh, np.array([d]), 1).data, rgb, atol=1e-14)


@pytest.mark.parametrize("degree", [0, 1, 2, 3])
def test_sh_basis_is_orthonormal_on_sphere(degree):
    # Monte Carlo check of the real SH normalisation: E[Y_i Y_j] * 4 pi = delta_ij
    rng = np.random.default_rng(degree)
    d = rng.normal(size=(200_000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    Y = sh_basis(d, degree).data
    assert Y.shape[1] == sh_basis_count(degree)
    gram = 4 * np.pi * (Y.T @ Y) / len(d)
    np.testing.assert_allclose(gram, np.eye(len(gram)), atol=0.03)


def test_sh_degree_validation():
    with pytest.raises(ValueError):
        sh_basis_count(4)


def test_sh_color_gradient():
    rng = np.random.default_rng(1)
    d = rng.normal(size=(5, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    sh = rng.normal(scale=0.1, size=(5, 9, 3))
    assert_gradients_match(lambda c: eval_sh_color(c, d, 2).sum(), [sh])


def test_init_from_points_and_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(30, 3))
    cloud = init_from_points(pts, rng.uniform(size=(30, 3)))
    assert cloud.num_gaussians == 30
    np.testing.assert_allclose(cloud.opacities().data, 0.5)
    np.testing.assert_allclose(cloud.rotation_matrices().data, np.broadcast_to(np.eye(3), (30, 3, 3)))
    cloud.save(tmp_path / "c.ckpt")
    back = GaussianCloud.load(tmp_path / "c.ckpt")
    assert back.fingerprint() == cloud.fingerprint()
    back.centers.data[0, 0] += 1e-12
    assert back.fingerprint() != cloud.fingerprint()
    with pytest.raises(ValueError):
        init_from_points(pts[:1])


def test_cloud_shape_validation():
    cloud = init_from_points(np.random.default_rng(3).normal(size=(4, 3)))
    arrs = {k: v.copy() for k, v in cloud.arrays().items()}
    arrs["rotations"] = arrs["rotations"][:, :3]
    with pytest.raises(ValueError, match="rotations"):
        GaussianCloud.from_arrays(arrs, 1)


def test_rotation_matrices_match_quaternions():
    cloud = init_from_points(np.random.default_rng(4).normal(size=(5, 3)))
    cloud.rotations.data[...] = np.random.default_rng(5).normal(size=(5, 4))
    for q, R in zip(cloud.rotations.data, cloud.rotation_matrices().data):
        np.testing.assert_allclose(R, quat_to_matrix_np(q), atol=1e-14)
