"""Pinhole cameras.

Internally every camera uses the OpenCV convention: +z looks forward, +x is
right and +y is down in the image.  Blender/NeRF style camera-to-world
matrices (-z forward, +y up) are converted on construction with
``convention="opengl"``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import RigidTransform

_GL_TO_CV = np.diag([1.0, -1.0, -1.0])


class CameraError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: RigidTransform
    near: float = 0.01

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise CameraError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 < self.width <= 4096 and 0 < self.height <= 4096):
            raise CameraError(f"image size {self.width}x{self.height} outside (0, 4096]")
        R = self.world_to_camera.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise CameraError("world-to-camera rotation is not a proper rotation")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        R, t = self.world_to_camera.rotation, self.world_to_camera.translation
        return -R.T @ t

    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def camera_to_world(self, convention: str = "opencv") -> np.ndarray:
        c2w = self.world_to_camera.inverse().matrix()
        if convention == "opengl":
            c2w[:3, :3] = c2w[:3, :3] @ _GL_TO_CV
        elif convention != "opencv":
            raise CameraError(f"unknown camera convention {convention!r}")
        return c2w

    @classmethod
    def from_camera_to_world(
        cls, c2w: np.ndarray, fx: float, fy: float, cx: float, cy: float, width: int, height: int,
        convention: str = "opencv",
    ) -> "Camera":
        c2w = np.asarray(c2w, dtype=float).copy()
        if convention == "opengl":
            c2w[:3, :3] = c2w[:3, :3] @ _GL_TO_CV
        elif convention != "opencv":
            raise CameraError(f"unknown camera convention {convention!r}")
        rot = c2w[:3, :3]
        if np.linalg.matrix_rank(c2w) < 4:
            raise CameraError("camera-to-world matrix is not invertible")
        # re-orthonormalise to absorb float noise from serialised matrices
        u, _, vt = np.linalg.svd(rot)
        rot = u @ vt
        c2w_rt = RigidTransform(rot, c2w[:3, 3])
        return cls(fx, fy, cx, cy, int(width), int(height), c2w_rt.inverse())

    @classmethod
    def look_at(
        cls, eye, target, up=(0.0, 0.0, 1.0), *, width: int = 128, height: int = 128, fov_x: float = np.deg2rad(40.0)
    ) -> "Camera":
        eye = np.asarray(eye, dtype=float)
        forward = np.asarray(target, dtype=float) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=float))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot_c2w = np.stack([right, down, forward], axis=1)
        f = 0.5 * width / np.tan(0.5 * fov_x)
        return cls(f, f, width / 2.0, height / 2.0, width, height, RigidTransform(rot_c2w, eye).inverse())

    def scaled(self, factor: float) -> "Camera":
        """Same pose with the image resampled by ``factor`` (focal lengths and size scale together)."""
        return Camera(
            self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
            int(round(self.width * factor)), int(round(self.height * factor)), self.world_to_camera, self.near,
        )

    def project_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pc = self.world_to_camera.apply(points)
        z = pc[..., 2]
        uv = np.stack([self.fx * pc[..., 0] / z + self.cx, self.fy * pc[..., 1] / z + self.cy], axis=-1)
        return uv, z

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "world_to_camera": self.world_to_camera.matrix().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]),
            RigidTransform.from_matrix(np.array(d["world_to_camera"])),
        )
