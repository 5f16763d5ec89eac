"""Skeleton-driven deformation of a frozen canonical Gaussian cloud.

Only the pose network sees time.  Skinning weights are a per-bone RBF of the
canonical Gaussian-to-bone distance, rescaled by a positive correction field
of the canonical position, and normalised over bones.  A detail network adds a
pose-conditioned offset to each blended centre.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import MLP, Parameter, Tensor, as_tensor, exp, getitem, matmul, no_grad, where
from .autodiff import load_checkpoint, save_checkpoint
from .gaussians import GaussianCloud
from .geometry import PositionalEncodingConfig, point_to_segment_sq_distance, positional_encode, quat_normalize
from .render import GaussianView
from .skeleton import JointPoseSample, SkeletonGraph, forward_kinematics

log = logging.getLogger(__name__)


class DeformationError(RuntimeError):
    pass


@dataclass(frozen=True)
class DeformationConfig:
    time_frequencies: int = 6
    position_frequencies: int = 10
    pose_hidden: tuple = (128, 128, 128, 128)
    correction_hidden: tuple = (64, 64, 64)
    detail_hidden: tuple = (128, 128, 128)
    radius_factor: float = 0.5
    radius_floor: float = 1e-3
    use_correction: bool = True
    use_detail: bool = True
    project_rotations: bool = False
    seed: int = 0

    @property
    def time_encoding(self) -> PositionalEncodingConfig:
        return PositionalEncodingConfig(self.time_frequencies, True)

    @property
    def position_encoding(self) -> PositionalEncodingConfig:
        return PositionalEncodingConfig(self.position_frequencies, True)


def _zero_output_layer(mlp: MLP, bias: np.ndarray | None = None) -> None:
    out = mlp.output_layer
    out.weight.data[...] = 0.0
    out.bias.data[...] = 0.0 if bias is None else bias


class PoseNetwork:
    """gamma(t) -> J raw quaternions and a root translation; starts at the rest pose."""

    def __init__(self, num_joints: int, cfg: DeformationConfig, rng: np.random.Generator):
        self.num_joints = num_joints
        self.encoding = cfg.time_encoding
        sizes = [self.encoding.output_dim(1), *cfg.pose_hidden, 4 * num_joints + 3]
        self.mlp = MLP(sizes, rng, name="theta")
        bias = np.concatenate([np.tile([1.0, 0.0, 0.0, 0.0], num_joints), np.zeros(3)])
        _zero_output_layer(self.mlp, bias)

    def parameters(self) -> list[Parameter]:
        return self.mlp.parameters()

    def raw(self, times) -> tuple[Tensor, Tensor]:
        """Un-normalised quaternions ``(n, J, 4)`` and translations ``(n, 3)`` at ``times`` ``(n,)``."""
        t = np.asarray(times, dtype=float).reshape(-1, 1)
        out = self.mlp(positional_encode(t, self.encoding))
        J = self.num_joints
        return out[:, : 4 * J].reshape(len(t), J, 4), out[:, 4 * J :]

    def __call__(self, t: float) -> JointPoseSample:
        if not 0.0 <= t <= 1.0:
            log.warning("time %.4f outside [0, 1]; clamping", t)
            t = float(np.clip(t, 0.0, 1.0))
        quats, trans = self.raw([t])
        return JointPoseSample(quat_normalize(quats[0]), trans[0], float(t))


class SkinningModel:
    """Normalised weights ``w_ij`` proportional to ``dw_ij * exp(-d_ij^2 / (2 r_j^2))``."""

    def __init__(self, skeleton: SkeletonGraph, centers: np.ndarray, cfg: DeformationConfig, rng: np.random.Generator):
        heads, tails = skeleton.bone_endpoints()
        self.num_bones = len(heads)
        lengths = np.linalg.norm(tails - heads, axis=1)
        radii = np.maximum(cfg.radius_factor * lengths, cfg.radius_floor)
        self.log_radii = Parameter(np.log(radii), name="log_radii")
        with no_grad():
            self.sq_dist = point_to_segment_sq_distance(centers[:, None, :], heads[None], tails[None]).data
            self.encoded = positional_encode(centers, cfg.position_encoding).data
        self.use_correction = cfg.use_correction
        sizes = [self.encoded.shape[1], *cfg.correction_hidden, self.num_bones]
        self.correction = MLP(sizes, rng, name="phi")
        _zero_output_layer(self.correction)

    @property
    def distances(self) -> np.ndarray:
        return np.sqrt(self.sq_dist)

    def parameters(self) -> list[Parameter]:
        return [self.log_radii] + (self.correction.parameters() if self.use_correction else [])

    def correction_logits(self) -> Tensor | None:
        """log of the correction factors ``dw`` (so ``dw = exp(.)`` is always positive)."""
        if not self.use_correction:
            return None
        return self.correction(self.encoded)

    def weights(self) -> Tensor:
        inv_two_r2 = 0.5 * exp(-2.0 * self.log_radii)
        logits = -(self.sq_dist * inv_two_r2)
        corr = self.correction_logits()
        if corr is not None:
            logits = logits + corr
        return normalize_log_weights(logits)


def normalize_log_weights(logits) -> Tensor:
    """Row-normalise ``exp(logits)``; the row maximum is factored out first (exact, not an approximation)."""
    logits = as_tensor(logits)
    data = logits.data
    bad = ~np.all(np.isfinite(data), axis=1)
    if np.any(bad):
        log.warning("%d skinning rows are non-finite; using uniform weights for them", int(bad.sum()))
        logits = where(np.broadcast_to(bad[:, None], data.shape), 0.0, logits)
        data = logits.data
    shifted = logits - data.max(axis=1, keepdims=True)
    e = exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def skinning_weights_from(distances, radii, corrections=None) -> np.ndarray:
    """Normalised weights for explicit ``d (N, B)``, ``r (B,)`` and positive ``dw (N, B)``."""
    d = np.asarray(distances, dtype=float)
    r = np.asarray(radii, dtype=float)
    if np.any(r <= 0):
        raise ValueError("radii must be positive")
    logits = -(d**2) / (2.0 * r**2)
    if corrections is not None:
        with np.errstate(divide="ignore"):
            logits = logits + np.log(np.asarray(corrections, dtype=float))
    with no_grad():
        return normalize_log_weights(logits).data


class DetailNetwork:
    """[gamma(mu_i), flattened local quaternions] -> 3D offset; zero at initialisation."""

    def __init__(self, encoded_centers: np.ndarray, num_joints: int, cfg: DeformationConfig, rng: np.random.Generator):
        self.encoded = encoded_centers
        self.pose_dim = 4 * num_joints
        sizes = [encoded_centers.shape[1] + self.pose_dim, *cfg.detail_hidden, 3]
        self.mlp = MLP(sizes, rng, name="psi")
        _zero_output_layer(self.mlp)

    def parameters(self) -> list[Parameter]:
        return self.mlp.parameters()

    def __call__(self, pose_quats: Tensor) -> Tensor:
        first = self.mlp.layers[0]
        e = self.encoded.shape[1]
        # first layer split so the pose row is not tiled N times
        w_pos = getitem(first.weight, slice(0, e))
        w_pose = getitem(first.weight, slice(e, None))
        h = matmul(self.encoded, w_pos) + (matmul(pose_quats.reshape(1, -1), w_pose) + first.bias)
        for layer in self.mlp.layers[1:]:
            h = layer(h.relu())
        return h


@dataclass
class DeformedGaussians:
    centers: Tensor  # final centres (N, 3)
    blended_centers: Tensor  # LBS centres before detail offsets
    rotations: Tensor  # blended rotation matrices (N, 3, 3)
    covariances: Tensor  # (N, 3, 3)
    offsets: Tensor  # detail offsets (N, 3)
    pose: JointPoseSample
    weights: Tensor = field(repr=False)


def newton_schulz_orthonormalize(M: Tensor, iterations: int = 12) -> Tensor:
    """Differentiable projection of near-rotations onto SO(3) (polar factor)."""
    eye = np.eye(3)
    X = M
    for _ in range(iterations):
        X = 0.5 * matmul(X, 3.0 * eye - matmul(X.swapaxes(-1, -2), X))
    return X


class DeformationModel:
    """Trainable bundle (pose network, radii, correction field, detail network) over a frozen cloud."""

    def __init__(self, skeleton: SkeletonGraph, cloud: GaussianCloud, cfg: DeformationConfig = DeformationConfig()):
        self.skeleton = skeleton
        self.cfg = cfg
        self.sh_degree = cloud.sh_degree
        with no_grad():
            self.canon_centers = cloud.centers.data.copy()
            self.canon_rotations = cloud.rotation_matrices().data.copy()
            self.canon_cov = cloud.covariances().data.copy()
            self.opacities = cloud.opacities().data.copy()
            self.sh_coeffs = cloud.sh_coeffs.data.copy()
        rng = np.random.default_rng(cfg.seed)
        self.pose_net = PoseNetwork(skeleton.num_joints, cfg, rng)
        self.skinning = SkinningModel(skeleton, self.canon_centers, cfg, rng)
        self.detail = DetailNetwork(self.skinning.encoded, skeleton.num_joints, cfg, rng)
        if self.skinning.num_bones != skeleton.num_bones:
            raise DeformationError("bone count mismatch between skinning tables and skeleton")

    @property
    def num_gaussians(self) -> int:
        return len(self.canon_centers)

    # -- parameters ----------------------------------------------------------
    def parameter_groups(self) -> dict[str, list[Parameter]]:
        groups = {"theta": self.pose_net.parameters(), "log_radii": [self.skinning.log_radii]}
        if self.cfg.use_correction:
            groups["phi"] = self.skinning.correction.parameters()
        if self.cfg.use_detail:
            groups["psi"] = self.detail.parameters()
        return groups

    def parameters(self) -> list[Parameter]:
        return [p for ps in self.parameter_groups().values() for p in ps]

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {p.name: p.data for p in self.pose_net.parameters()}
        out["log_radii"] = self.skinning.log_radii.data
        out.update({p.name: p.data for p in self.skinning.correction.parameters()})
        out.update({p.name: p.data for p in self.detail.parameters()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, target in self.named_arrays().items():
            if name not in arrays:
                raise KeyError(f"checkpoint lacks parameter {name!r}")
            if arrays[name].shape != target.shape:
                raise ValueError(f"{name}: checkpoint shape {arrays[name].shape} != model shape {target.shape}")
            target[...] = arrays[name]

    # -- forward -------------------------------------------------------------
    def predict_pose(self, t: float) -> JointPoseSample:
        return self.pose_net(t)

    def skinning_weights(self) -> Tensor:
        return self.skinning.weights()

    def deform(self, t: float, weights: Tensor | None = None) -> DeformedGaussians:
        pose = self.predict_pose(t)
        return self.deform_pose(pose, weights)

    def deform_pose(self, pose: JointPoseSample, weights: Tensor | None = None) -> DeformedGaussians:
        transforms = forward_kinematics(self.skeleton, pose.local_rotations, pose.root_translation)
        bad = ~(np.all(np.isfinite(transforms.rotations.data), axis=(1, 2)) & np.all(np.isfinite(transforms.translations.data), axis=1))
        if np.any(bad):
            raise DeformationError(f"forward kinematics produced non-finite transforms for joint(s) {np.flatnonzero(bad).tolist()}")
        Rb, Tb = transforms.bone_transforms(self.skeleton)
        W = self.skinning_weights() if weights is None else weights
        B = Rb.shape[0]
        M = matmul(W, Rb.reshape(B, 9)).reshape(-1, 3, 3)
        if self.cfg.project_rotations:
            M = newton_schulz_orthonormalize(M)
        blended = matmul(M, self.canon_centers[..., None])[..., 0] + matmul(W, Tb)
        covariances = matmul(matmul(M, self.canon_cov), M.swapaxes(-1, -2))
        rotations = matmul(M, self.canon_rotations)
        if self.cfg.use_detail:
            offsets = self.detail(pose.local_rotations)
            centers = blended + offsets
        else:
            offsets = Tensor(np.zeros_like(self.canon_centers))
            centers = blended
        return DeformedGaussians(centers, blended, rotations, covariances, offsets, pose, W)

    def view(self, deformed: DeformedGaussians) -> GaussianView:
        return GaussianView(deformed.centers, deformed.covariances, Tensor(self.opacities), Tensor(self.sh_coeffs), self.sh_degree)

    def interpolate_sequence(self, t_values) -> list[DeformedGaussians]:
        """Deform at each time; the skinning weights are computed once and shared."""
        t_values = list(t_values)
        if not t_values:
            return []
        with no_grad():
            W = self.skinning_weights()
            return [self.deform(float(t), W) for t in t_values]

    # -- persistence -----------------------------------------------------------
    def save(self, path, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
        arrays = dict(self.named_arrays())
        arrays.update(extra or {})
        m = {"kind": "deformation_model", "skeleton": self.skeleton.to_dict(), "config": _config_dict(self.cfg)}
        m.update(meta or {})
        save_checkpoint(path, arrays, m)

    @staticmethod
    def read(path) -> tuple[dict[str, np.ndarray], dict]:
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "deformation_model":
            raise ValueError(f"{path}: not a deformation model checkpoint")
        return arrays, meta


def _config_dict(cfg: DeformationConfig) -> dict:
    from dataclasses import asdict

    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def config_from_dict(d: dict) -> DeformationConfig:
    d = dict(d)
    for k in ("pose_hidden", "correction_hidden", "detail_hidden"):
        if k in d:
            d[k] = tuple(d[k])
    return DeformationConfig(**d)
