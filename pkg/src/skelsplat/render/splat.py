"""EWA projection of 3D Gaussians and the tape-level render call."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor, as_tensor, getitem, matmul, sqrt, stack
from ..gaussians import eval_sh_color
from .camera import Camera
from .rasterizer import RasterSettings, RasterState, rasterize, rasterize_forward

BLUR_FLOOR = 0.3  # px^2 added to the projected covariance diagonal


@dataclass
class GaussianView:
    """Renderable Gaussians: world-space centres and covariances plus appearance."""

    centers: Tensor  # (N, 3)
    covariances: Tensor  # (N, 3, 3)
    opacities: Tensor  # (N,)
    sh_coeffs: Tensor  # (N, K, 3)
    sh_degree: int

    @property
    def num_gaussians(self) -> int:
        return self.centers.shape[0]


@dataclass
class ProjectedSplats:
    index: np.ndarray  # indices into the input Gaussians that survived culling
    means2d: Tensor  # (M, 2) pixels
    cov2d: Tensor  # (M, 2, 2) pixels^2
    depths: np.ndarray  # (M,) camera z


@dataclass
class RenderedImage:
    image: Tensor  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    state: RasterState
    visible: np.ndarray


def project_gaussians(
    centers, covariances, camera: Camera, blur: float = BLUR_FLOOR, cull_sigma: float = 3.0
) -> ProjectedSplats:
    """Pinhole projection of centres and first-order (EWA) projection of covariances.

    Gaussians in front of the near plane, or whose ``cull_sigma`` ellipse misses the
    viewport entirely, are culled.
    """
    centers, covariances = as_tensor(centers), as_tensor(covariances)
    W = camera.world_to_camera.rotation
    t = camera.world_to_camera.translation
    z_all = centers.data @ W[2] + t[2]
    front = np.flatnonzero(z_all > camera.near)
    mu = getitem(centers, front)
    cov = getitem(covariances, front)
    pc = matmul(mu, W.T) + t
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    inv_z = 1.0 / z
    zero = x * 0.0
    J = stack(
        [
            stack([camera.fx * inv_z, zero, -camera.fx * x * inv_z * inv_z], axis=-1),
            stack([zero, camera.fy * inv_z, -camera.fy * y * inv_z * inv_z], axis=-1),
        ],
        axis=-2,
    )
    M = matmul(J, W)
    cov2d = matmul(matmul(M, cov), M.swapaxes(-1, -2)) + blur * np.eye(2)
    means2d = stack([camera.fx * x * inv_z + camera.cx, camera.fy * y * inv_z + camera.cy], axis=-1)

    c = cov2d.data
    half_tr = 0.5 * (c[:, 0, 0] + c[:, 1, 1])
    det = c[:, 0, 0] * c[:, 1, 1] - c[:, 0, 1] * c[:, 1, 0]
    lam = half_tr + np.sqrt(np.maximum(half_tr**2 - det, 0.0))
    r = cull_sigma * np.sqrt(np.maximum(lam, 0.0))
    m = means2d.data
    inside = (m[:, 0] + r > 0) & (m[:, 0] - r < camera.width) & (m[:, 1] + r > 0) & (m[:, 1] - r < camera.height)
    keep = np.flatnonzero(inside)
    if len(keep) == len(front):
        return ProjectedSplats(front, means2d, cov2d, z.data.copy())
    return ProjectedSplats(front[keep], getitem(means2d, keep), getitem(cov2d, keep), z.data[keep].copy())


def view_directions(centers: Tensor, camera: Camera) -> Tensor:
    d = centers - camera.center
    return d / sqrt((d * d).sum(axis=-1, keepdims=True))


def render(
    view: GaussianView,
    camera: Camera,
    background=(0.0, 0.0, 0.0),
    settings: RasterSettings = RasterSettings(),
) -> RenderedImage:
    """Differentiable image ``(H, W, 3)`` of ``view`` seen from ``camera``."""
    proj = project_gaussians(view.centers, view.covariances, camera)
    idx = proj.index
    if len(idx) == 0:
        img = np.broadcast_to(np.asarray(background, dtype=float), (camera.height, camera.width, 3)).copy()
        _, state = rasterize_forward(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros((0, 3)), np.zeros(0), np.zeros(0),
                                     camera.width, camera.height, background, settings)
        return RenderedImage(Tensor(img), np.zeros((camera.height, camera.width)), state, idx)
    centers = getitem(view.centers, idx)
    colors = eval_sh_color(getitem(view.sh_coeffs, idx), view_directions(centers, camera), view.sh_degree)
    opac = getitem(view.opacities, idx)
    image, state = rasterize(
        proj.means2d, proj.cov2d, colors, opac, proj.depths, camera.width, camera.height, background, settings
    )
    return RenderedImage(image, state.alpha, state, idx)
