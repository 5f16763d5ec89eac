import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skelsplat.autodiff import Parameter, Tape, Tensor
from skelsplat.geometry import RigidTransform
from skelsplat.gaussians import build_covariance, rgb_to_sh_dc, sh_basis_count
from skelsplat.render import (
    BLUR_FLOOR,
    Camera,
    CameraError,
    GaussianView,
    RasterSettings,
    RenderStateError,
    project_gaussians,
    rasterize,
    rasterize_backward,
    rasterize_forward,
    render,
)

from oracles import central_difference, naive_composite, project_homogeneous, random_splat_scene


def _raster(scene, settings=RasterSettings(), size=16):
    img, state = rasterize_forward(
        scene["means"], scene["covs"], scene["colors"], scene["opacities"], scene["depths"],
        size, size, scene["background"], settings,
    )
    return img, state


@given(st.integers(0, 100_000), st.integers(0, 100))
@settings(max_examples=20)
def test_tile_renderer_matches_naive_compositor(seed, n):
    scene = random_splat_scene(np.random.default_rng(seed), n)
    img, _ = _raster(scene)
    ref = naive_composite(scene["means"], scene["covs"], scene["colors"], scene["opacities"], scene["depths"],
                          16, 16, scene["background"])
    np.testing.assert_allclose(img, ref, atol=1e-6, rtol=0)


def test_tile_size_does_not_change_the_image():
    scene = random_splat_scene(np.random.default_rng(7), 60, size=40)
    a, _ = _raster(scene, RasterSettings(tile_size=16), size=40)
    b, _ = _raster(scene, RasterSettings(tile_size=5), size=40)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_fast_settings_stay_close_to_exact():
    scene = random_splat_scene(np.random.default_rng(3), 80)
    exact, _ = _raster(scene)
    fast, _ = _raster(scene, RasterSettings.fast())
    assert np.max(np.abs(exact - fast)) < 0.05


def test_empty_scene_is_background():
    img, state = rasterize_forward(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros((0, 3)), np.zeros(0), np.zeros(0),
                                   8, 4, (0.2, 0.3, 0.4))
    np.testing.assert_array_equal(img, np.broadcast_to([0.2, 0.3, 0.4], (4, 8, 3)))
    np.testing.assert_array_equal(state.alpha, 0.0)


def test_degenerate_covariance_is_skipped():
    scene = random_splat_scene(np.random.default_rng(1), 3)
    scene["covs"][1] = np.zeros((2, 2))
    img, state = _raster(scene)
    assert state.skipped == 1
    assert np.all(np.isfinite(img))


def test_alpha_clamp_limits_single_splat():
    cov = np.array([[[4.0, 0], [0, 4.0]]])
    img, state = rasterize_forward(np.array([[4.5, 4.5]]), cov, np.ones((1, 3)), np.array([1.0]), np.ones(1), 8, 8)
    assert img.max() == pytest.approx(0.99, abs=1e-12)
    assert state.alpha.max() == pytest.approx(0.99, abs=1e-12)


def _weighted_loss(seed, shape):
    return np.random.default_rng(seed).normal(size=shape)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_raster_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    scene = random_splat_scene(rng, 6, max_opacity=0.9)
    W = _weighted_loss(seed + 10, (16, 16, 3))
    _, state = _raster(scene)
    grads = rasterize_backward(state, W)

    def f(**over):
        s = {**scene, **over}
        img, _ = _raster(s)
        return float(np.sum(img * W))

    checks = {
        "means2d": central_difference(lambda x: f(means=x), scene["means"]),
        "cov2d": central_difference(lambda x: f(covs=0.5 * (x + np.swapaxes(x, 1, 2))), scene["covs"]),
        "colors": central_difference(lambda x: f(colors=x), scene["colors"]),
        "opacities": central_difference(lambda x: f(opacities=x), scene["opacities"]),
    }
    for key, numeric in checks.items():
        np.testing.assert_allclose(grads[key], numeric, rtol=1e-3, atol=1e-7, err_msg=key)


def test_backward_rejects_stale_state():
    scene = random_splat_scene(np.random.default_rng(0), 4)
    _, state = _raster(scene)
    moved = scene["means"] + 1.0
    with pytest.raises(RenderStateError):
        rasterize_backward(state, np.zeros((16, 16, 3)), (moved, scene["covs"], scene["colors"], scene["opacities"]))
    with pytest.raises(ValueError):
        rasterize_backward(state, np.zeros((8, 8, 3)))


def test_tape_rasterize_accumulates_gradients():
    scene = random_splat_scene(np.random.default_rng(5), 5)
    p = Parameter(scene["colors"].copy(), name="c")
    with Tape() as tape:
        img, _ = rasterize(Tensor(scene["means"]), Tensor(scene["covs"]), p, Tensor(scene["opacities"]),
                           scene["depths"], 16, 16, scene["background"])
        y = img.sum()
    tape.backward(y)
    assert p.grad.shape == (5, 3)
    assert np.all(p.grad >= 0)


# ---------------------------------------------------------------------------
# camera and projection
# ---------------------------------------------------------------------------
def _camera(size=32):
    return Camera.look_at([2.5, -1.0, 1.2], [0.0, 0.0, 0.0], width=size, height=size)


def test_camera_conventions_round_trip():
    cam = _camera()
    for conv in ("opencv", "opengl"):
        back = Camera.from_camera_to_world(cam.camera_to_world(conv), cam.fx, cam.fy, cam.cx, cam.cy,
                                           cam.width, cam.height, conv)
        np.testing.assert_allclose(back.world_to_camera.matrix(), cam.world_to_camera.matrix(), atol=1e-12)
    gl = cam.camera_to_world("opengl")
    # OpenGL cameras look down -z
    fwd = -gl[:3, 2]
    np.testing.assert_allclose(fwd, -cam.camera_to_world()[:3, 3] / np.linalg.norm(cam.center), atol=1e-12)


def test_camera_validation():
    with pytest.raises(CameraError):
        Camera(-1.0, 1.0, 0, 0, 8, 8, RigidTransform.identity())
    with pytest.raises(CameraError):
        Camera(1.0, 1.0, 0, 0, 0, 8, RigidTransform.identity())
    with pytest.raises(CameraError):
        Camera(1.0, 1.0, 0, 0, 8, 8, RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3)))
    cam = _camera()
    assert Camera.from_dict(cam.to_dict()).to_dict() == cam.to_dict()


def test_projection_matches_homogeneous_pinhole():
    cam = _camera()
    pts = np.random.default_rng(0).normal(scale=0.4, size=(20, 3))
    proj = project_gaussians(pts, np.tile(np.eye(3) * 1e-4, (20, 1, 1)), cam, cull_sigma=1e9)
    np.testing.assert_allclose(proj.means2d.data, project_homogeneous(cam, pts), atol=1e-10)
    uv, _ = cam.project_points(pts)
    np.testing.assert_allclose(uv, project_homogeneous(cam, pts), atol=1e-10)


def test_projected_covariance_matches_sampled_jacobian():
    cam = _camera()
    mu = np.array([0.1, -0.2, 0.15])
    cov = np.diag([0.01, 0.004, 0.02])
    proj = project_gaussians(mu[None], cov[None], cam, blur=0.0)

    def f(x):
        return project_homogeneous(cam, x[None])[0]

    J = np.stack([central_difference(lambda x, k=k: f(x)[k], mu) for k in range(2)])
    np.testing.assert_allclose(proj.cov2d.data[0], J @ cov @ J.T, rtol=1e-6)
    blurred = project_gaussians(mu[None], cov[None], cam)
    np.testing.assert_allclose(blurred.cov2d.data[0] - proj.cov2d.data[0], BLUR_FLOOR * np.eye(2), atol=1e-12)


def test_points_behind_camera_are_culled():
    cam = _camera()
    behind = cam.center + 2.0 * (cam.center / np.linalg.norm(cam.center))
    proj = project_gaussians(np.stack([np.zeros(3), behind]), np.tile(np.eye(3) * 1e-3, (2, 1, 1)), cam)
    assert list(proj.index) == [0]


def _view(rng, n, degree=1):
    k = sh_basis_count(degree)
    sh = np.zeros((n, k, 3))
    sh[:, 0] = rgb_to_sh_dc(rng.uniform(0.3, 0.7, size=(n, 3)))
    sh[:, 1:] = rng.normal(scale=0.05, size=(n, k - 1, 3))
    q = rng.normal(size=(n, 4))
    return {
        "centers": rng.normal(scale=0.3, size=(n, 3)),
        "rotations": q,
        "log_scales": np.log(rng.uniform(0.05, 0.15, size=(n, 3))),
        "opacities": rng.uniform(0.2, 0.8, size=n),
        "sh": sh,
    }


def test_full_render_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    data = _view(rng, 5)
    cam = _camera(16)
    W = _weighted_loss(12, (16, 16, 3))
    bg = (0.1, 0.2, 0.3)

    def loss(d, record=False):
        view = GaussianView(d["centers"], build_covariance(d["rotations"], d["log_scales"]), d["opacities"],
                            d["sh"], 1)
        out = render(view, cam, bg).image
        return (out * W).sum() if record else float(np.sum(out.data * W))

    params = {k: Parameter(v.copy(), name=k) for k, v in data.items()}
    with Tape() as tape:
        y = loss(params, record=True)
    tape.backward(y)
    for key in data:
        numeric = central_difference(lambda x, key=key: loss({**data, key: x}), data[key])
        np.testing.assert_allclose(params[key].grad, numeric, rtol=1e-3, atol=1e-6, err_msg=key)


def test_render_of_nothing_visible_is_background():
    cam = _camera(8)
    far_behind = cam.center * 3.0
    view = GaussianView(far_behind[None], np.eye(3)[None] * 0.01, np.array([0.9]), np.zeros((1, 4, 3)), 1)
    out = render(view, cam, (0.5, 0.5, 0.5))
    np.testing.assert_array_equal(out.image.data, 0.5)
    assert len(out.visible) == 0


def test_render_is_deterministic():
    rng = np.random.default_rng(2)
    d = _view(rng, 30)
    view = GaussianView(d["centers"], build_covariance(d["rotations"], d["log_scales"]).data, d["opacities"], d["sh"], 1)
    a = render(view, _camera()).image.data
    b = render(view, _camera()).image.data
    assert a.tobytes() == b.tobytes()
