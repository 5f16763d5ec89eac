"""Posed image observations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .render import Camera


@dataclass
class Observation:
    time: float
    camera: Camera
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    name: str = ""


@dataclass
class ObservationSet:
    """Observations sorted by time; ``canonical`` holds the multi-view bundle at t = 0."""

    frames: list[Observation] = field(default_factory=list)
    canonical: list[Observation] = field(default_factory=list)

    def __post_init__(self):
        self.frames = sorted(self.frames, key=lambda o: o.time)
        everything = self.frames + self.canonical
        if not everything:
            return
        shape = everything[0].image.shape
        for o in everything:
            if o.image.shape != shape:
                raise ValueError(f"observation {o.name or o.time}: image shape {o.image.shape} != {shape}")
            if o.image.shape[:2] != (o.camera.height, o.camera.width):
                raise ValueError(f"observation {o.name or o.time}: image does not match camera size")
            if not 0.0 <= o.time <= 1.0:
                raise ValueError(f"observation {o.name or o.time}: time {o.time} outside [0, 1]")
        seen = set()
        for o in self.frames:
            key = (o.time, _camera_key(o.camera))
            if key in seen:
                raise ValueError(f"duplicate observation at t={o.time} for the same camera")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, i) -> Observation:
        return self.frames[i]

    @property
    def times(self) -> np.ndarray:
        return np.array([o.time for o in self.frames])

    @property
    def image_shape(self) -> tuple[int, ...] | None:
        obs = self.frames or self.canonical
        return obs[0].image.shape if obs else None

    def canonical_views(self) -> list[Observation]:
        """The t = 0 bundle, or the t = 0 frames when no bundle was supplied."""
        return list(self.canonical) if self.canonical else [o for o in self.frames if o.time == 0.0]


def _camera_key(camera: Camera) -> bytes:
    w2c = camera.world_to_camera
    return np.concatenate([w2c.rotation.ravel(), w2c.translation, [camera.fx, camera.fy, camera.cx, camera.cy]]).tobytes()
