"""Canonical Gaussian cloud: storage, activations, covariance and SH colour."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import Parameter, Tensor, as_tensor, clip, load_checkpoint, matmul, save_checkpoint, sigmoid, stack
from .autodiff import exp as t_exp
from .geometry import quat_to_matrix

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

CLOUD_FIELDS = ("centers", "rotations", "log_scales", "opacity_logits", "sh_coeffs")


def sh_basis_count(degree: int) -> int:
    if degree not in (0, 1, 2, 3):
        raise ValueError(f"SH degree must be in 0..3, got {degree}")
    return (degree + 1) ** 2


def sh_basis(dirs, degree: int) -> Tensor:
    """Real SH basis values, ``(..., (degree+1)^2)``, for unit directions ``(..., 3)``."""
    dirs = as_tensor(dirs)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    cols = [x * 0.0 + SH_C0]
    if degree >= 1:
        cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        cols += [
            SH_C2[0] * (x * y),
            SH_C2[1] * (y * z),
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * (x * z),
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        cols += [
            SH_C3[0] * y * (3.0 * xx - yy),
            SH_C3[1] * (x * y * z),
            SH_C3[2] * y * (4.0 * zz - xx - yy),
            SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            SH_C3[4] * x * (4.0 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3.0 * yy),
        ]
    return stack(cols, axis=-1)


def eval_sh_color(sh_coeffs, view_dirs, degree: int) -> Tensor:
    """RGB in [0, 1] from coefficients ``(..., K, 3)`` and unit view directions ``(..., 3)``."""
    basis = sh_basis(view_dirs, degree)
    rgb = (basis[..., None] * as_tensor(sh_coeffs)).sum(axis=-2)
    return clip(rgb + 0.5, 0.0, 1.0)


def rgb_to_sh_dc(rgb) -> np.ndarray:
    return (np.asarray(rgb, dtype=float) - 0.5) / SH_C0


def build_covariance(q, log_scale) -> Tensor:
    """``R diag(exp(log_scale))^2 R^T`` batched over leading dimensions."""
    R = quat_to_matrix(q)
    s2 = t_exp(2.0 * as_tensor(log_scale))
    return matmul(R * s2[..., None, :], R.swapaxes(-1, -2))


@dataclass
class GaussianCloud:
    centers: Parameter
    rotations: Parameter
    log_scales: Parameter
    opacity_logits: Parameter
    sh_coeffs: Parameter
    sh_degree: int = 1

    def __post_init__(self):
        n = self.centers.shape[0]
        k = sh_basis_count(self.sh_degree)
        expected = {
            "centers": (n, 3),
            "rotations": (n, 4),
            "log_scales": (n, 3),
            "opacity_logits": (n,),
            "sh_coeffs": (n, k, 3),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name} has shape {got}, expected {shape}")

    @property
    def num_gaussians(self) -> int:
        return self.centers.shape[0]

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], sh_degree: int) -> "GaussianCloud":
        return cls(*(Parameter(np.array(arrays[f], dtype=float), name=f) for f in CLOUD_FIELDS), sh_degree=sh_degree)

    def arrays(self) -> dict[str, np.ndarray]:
        return {f: getattr(self, f).data for f in CLOUD_FIELDS}

    def copy(self) -> "GaussianCloud":
        return GaussianCloud.from_arrays({k: v.copy() for k, v in self.arrays().items()}, self.sh_degree)

    def parameters(self) -> list[Parameter]:
        return [getattr(self, f) for f in CLOUD_FIELDS]

    def opacities(self) -> Tensor:
        return sigmoid(self.opacity_logits)

    def scales(self) -> Tensor:
        return t_exp(self.log_scales)

    def rotation_matrices(self) -> Tensor:
        return quat_to_matrix(self.rotations)

    def covariances(self) -> Tensor:
        return build_covariance(self.rotations, self.log_scales)

    def fingerprint(self) -> str:
        """Byte-level hash of every canonical parameter."""
        h = hashlib.sha256()
        for f in CLOUD_FIELDS:
            arr = np.ascontiguousarray(getattr(self, f).data)
            h.update(f.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        save_checkpoint(path, self.arrays(), {"kind": "gaussian_cloud", "sh_degree": self.sh_degree, "num_gaussians": self.num_gaussians})

    @classmethod
    def load(cls, path) -> "GaussianCloud":
        arrays, meta = load_checkpoint(path)
        missing = [f for f in CLOUD_FIELDS if f not in arrays]
        if missing:
            raise ValueError(f"{path}: not a Gaussian cloud checkpoint, missing {missing}")
        return cls.from_arrays(arrays, int(meta.get("sh_degree", 1)))


def init_from_points(
    points: np.ndarray,
    colors: np.ndarray | None = None,
    sh_degree: int = 1,
    scale_factor: float = 0.5,
) -> GaussianCloud:
    """Isotropic Gaussians at ``points`` sized from nearest-neighbour spacing."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    if n < 2:
        raise ValueError("need at least two points to size the Gaussians")
    k = min(4, n)
    dist, _ = cKDTree(points).query(points, k=k)
    nn = np.maximum(dist[:, 1:].mean(axis=1), 1e-7)
    log_scales = np.repeat(np.log(scale_factor * nn)[:, None], 3, axis=1)
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    sh = np.zeros((n, sh_basis_count(sh_degree), 3))
    if colors is not None:
        sh[:, 0, :] = rgb_to_sh_dc(colors)
    return GaussianCloud.from_arrays(
        {
            "centers": points.copy(),
            "rotations": rotations,
            "log_scales": log_scales,
            "opacity_logits": np.zeros(n),
            "sh_coeffs": sh,
        },
        sh_degree,
    )
