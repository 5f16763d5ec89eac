"""Quaternions, rigid transforms, positional encoding and segment distances.

Quaternions are scalar-first ``(w, x, y, z)``.  Functions taking tensors work
on arbitrary leading batch dimensions and stay on the tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, clip, concatenate, cos, sin, sqrt, stack

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


class DegenerateQuaternionError(ValueError):
    pass


def quat_normalize(q) -> Tensor:
    q = as_tensor(q)
    norm2 = (q * q).sum(axis=-1, keepdims=True)
    if np.any(norm2.data == 0.0):
        raise DegenerateQuaternionError("zero quaternion cannot be normalised")
    return q / sqrt(norm2)


def quat_to_matrix(q) -> Tensor:
    """Rotation matrix of a (not necessarily unit) quaternion, shape ``(..., 3, 3)``."""
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    rows = [
        stack([1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)], axis=-1),
        stack([2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)], axis=-1),
        stack([2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)], axis=-1),
    ]
    return stack(rows, axis=-2)


def quat_to_matrix_np(q: np.ndarray) -> np.ndarray:
    return quat_to_matrix(np.asarray(q, dtype=float)).data


def axis_angle_to_quat(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=float)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def quat_multiply_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, float), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def canonical_sign(q: np.ndarray) -> np.ndarray:
    """Flip quaternions to ``w >= 0``; for serialisation only, never on the tape."""
    q = np.array(q, dtype=float)
    flip = q[..., :1] < 0
    return np.where(flip, -q, q)


def rotation_angle(R_a: np.ndarray, R_b: np.ndarray) -> np.ndarray:
    """Geodesic angle (radians) between rotation matrices, batched over leading dims."""
    rel = np.swapaxes(R_a, -1, -2) @ R_b
    cos_theta = (np.trace(rel, axis1=-2, axis2=-1) - 1.0) / 2.0
    return np.arccos(np.clip(cos_theta, -1.0, 1.0))


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3].copy(), m[:3, 3].copy())

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class PositionalEncodingConfig:
    num_frequencies: int
    include_input: bool = True

    def output_dim(self, input_dim: int) -> int:
        return input_dim * (int(self.include_input) + 2 * self.num_frequencies)


def positional_encode(x, cfg: PositionalEncodingConfig) -> Tensor:
    """``[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]`` on the last axis."""
    x = as_tensor(x)
    parts = [x] if cfg.include_input else []
    for k in range(cfg.num_frequencies):
        arg = x * (np.pi * 2.0**k)
        parts += [sin(arg), cos(arg)]
    if not parts:
        return Tensor(np.zeros(x.shape[:-1] + (0,)))
    return concatenate(parts, axis=-1)


def segment_projection(p, a, b) -> Tensor:
    """Clamped projection parameter u in [0, 1] of ``p`` onto segment ``[a, b]``."""
    p, a, b = as_tensor(p), as_tensor(a), as_tensor(b)
    ab = b - a
    len2 = (ab * ab).sum(axis=-1)
    degenerate = len2.data == 0.0
    if np.any(degenerate):
        len2 = len2 + np.where(degenerate, 1.0, 0.0)
    u = ((p - a) * ab).sum(axis=-1) / len2
    return clip(u, 0.0, 1.0)


def point_to_segment_sq_distance(p, a, b) -> Tensor:
    p, a, b = as_tensor(p), as_tensor(a), as_tensor(b)
    u = segment_projection(p, a, b)
    diff = p - (a + u[..., None] * (b - a))
    return (diff * diff).sum(axis=-1)


def point_to_segment_distance(p, a, b) -> Tensor:
    """Euclidean distance from ``p`` to the closed segment ``[a, b]``; ``a == b`` degrades to ``|p - a|``."""
    return sqrt(point_to_segment_sq_distance(p, a, b))
