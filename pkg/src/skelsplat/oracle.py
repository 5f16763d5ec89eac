"""Procedural articulated scenes with known skeleton, motion and part assignment.

Each bone carries a textured ellipsoid shell with an asymmetric cross-section,
so twist about the bone axis is visible.  Joint angles follow sinusoids
``A (sin(2 pi t + phi) - sin(phi))`` about fixed axes perpendicular to the
bone, so the pose at t = 0 is the rest pose.  Ground-truth frames are rendered
by moving the part points rigidly with their bone and splatting small
isotropic Gaussians with the same rasteriser used for training.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .gaussians import rgb_to_sh_dc
from .geometry import axis_angle_to_quat
from .observations import Observation, ObservationSet
from .render import Camera, GaussianView, RasterSettings, render
from .skeleton import JointPoseSample, SkeletonGraph, forward_kinematics, validate_skeleton

VIEW_POLICIES = ("orbit", "random-sphere", "fixed")

_PALETTE = np.array(
    [
        [0.90, 0.30, 0.25],
        [0.25, 0.55, 0.95],
        [0.30, 0.85, 0.35],
        [0.95, 0.80, 0.20],
        [0.75, 0.35, 0.90],
        [0.20, 0.85, 0.85],
        [0.95, 0.55, 0.15],
        [0.85, 0.85, 0.85],
    ]
)


@dataclass(frozen=True)
class OracleSpec:
    num_bones: int = 2
    points_per_part: int = 1000
    amplitude_deg: float = 20.0
    seed: int = 0
    topology: str = "chain"  # or "tree"
    bone_length: float = 1.0
    part_radius: tuple = (0.2, 0.13)  # cross-section semi-axes, as fractions of bone length
    root_motion: float = 0.1  # root translation amplitude (world units)
    bulge: float = 0.0  # pose-dependent radial bulge amplitude (world units)
    splat_scale: float = 0.03
    splat_opacity: float = 0.95
    resolution: int = 128
    camera_distance: float = 3.2
    fov_deg: float = 40.0
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not 1 <= self.num_bones <= 8:
            raise ValueError(f"num_bones must lie in [1, 8], got {self.num_bones}")
        if self.topology not in ("chain", "tree"):
            raise ValueError(f"unknown topology {self.topology!r}")
        if self.points_per_part < 4:
            raise ValueError("points_per_part must be at least 4")
        if self.bone_length <= 0 or self.splat_scale <= 0 or self.resolution < 16:
            raise ValueError("bone_length, splat_scale must be positive and resolution >= 16")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        d["part_radius"] = list(self.part_radius)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OracleSpec":
        d = dict(d)
        for k in ("background", "part_radius"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class OracleScene:
    spec: OracleSpec
    skeleton: SkeletonGraph
    points: np.ndarray  # (M, 3) canonical part points
    colors: np.ndarray  # (M, 3)
    part_ids: np.ndarray  # (M,) bone index of each point
    radial: np.ndarray  # (M, 3) outward unit normal of the shell (canonical)
    along: np.ndarray  # (M,) position along the bone in [0, 1]
    axes: np.ndarray  # (J, 3) rotation axis per joint (root unused)
    amplitudes: np.ndarray  # (J,) radians, 0 for the root
    phases: np.ndarray  # (J,)
    root_direction: np.ndarray  # (3,)
    root_phase: float
    raster: RasterSettings = field(default_factory=RasterSettings.fast)

    # -- trajectories ----------------------------------------------------------
    def joint_angles(self, t) -> np.ndarray:
        """Angles (..., J) in radians at times ``t``."""
        t = np.asarray(t, dtype=float)[..., None]
        return self.amplitudes * (np.sin(2 * np.pi * t + self.phases) - np.sin(self.phases))

    def root_translation(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)[..., None]
        s = np.sin(2 * np.pi * t + self.root_phase) - np.sin(self.root_phase)
        return self.spec.root_motion * s * self.root_direction

    def ground_truth_pose(self, t: float) -> JointPoseSample:
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"time {t} outside [0, 1]")
        q = np.stack([axis_angle_to_quat(self.axes[j], a) for j, a in enumerate(self.joint_angles(t))])
        return JointPoseSample(Tensor(q), Tensor(self.root_translation(t)), float(t))

    def bone_transforms(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        pose = self.ground_truth_pose(t)
        with no_grad():
            R, T = forward_kinematics(self.skeleton, pose.local_rotations, pose.root_translation).bone_transforms(self.skeleton)
        return R.data, T.data

    # -- geometry ----------------------------------------------------------------
    def bulge_offsets(self, t: float) -> np.ndarray:
        """Canonical-frame non-rigid offsets; zero at t = 0 and when ``bulge`` is 0."""
        if self.spec.bulge == 0.0:
            return np.zeros_like(self.points)
        angles = self.joint_angles(t)
        child = self.skeleton.bone_joints[self.part_ids]
        a = np.abs(self.amplitudes[child])
        amp = np.where(a > 0, angles[child] / np.maximum(a, 1e-12), 0.0)
        return (self.spec.bulge * amp * np.sin(np.pi * self.along))[:, None] * self.radial

    def points_at(self, t: float) -> np.ndarray:
        R, T = self.bone_transforms(t)
        local = self.points + self.bulge_offsets(t)
        return np.einsum("nij,nj->ni", R[self.part_ids], local) + T[self.part_ids]

    def gaussians_at(self, t: float) -> GaussianView:
        n = len(self.points)
        cov = np.broadcast_to(self.spec.splat_scale**2 * np.eye(3), (n, 3, 3)).copy()
        sh = rgb_to_sh_dc(self.colors)[:, None, :]
        return GaussianView(
            Tensor(self.points_at(t)), Tensor(cov), Tensor(np.full(n, self.spec.splat_opacity)), Tensor(sh), 0
        )

    def render(self, t: float, camera: Camera) -> np.ndarray:
        with no_grad():
            out = render(self.gaussians_at(t), camera, self.spec.background, self.raster)
        return np.clip(out.image.data, 0.0, 1.0)

    # -- cameras -------------------------------------------------------------------
    @property
    def center(self) -> np.ndarray:
        return self.skeleton.rest_positions.mean(axis=0)

    def camera(self, azimuth: float, elevation: float) -> Camera:
        s = self.spec
        d = np.array([np.cos(elevation) * np.cos(azimuth), np.cos(elevation) * np.sin(azimuth), np.sin(elevation)])
        return Camera.look_at(
            self.center + s.camera_distance * d, self.center, width=s.resolution, height=s.resolution,
            fov_x=np.deg2rad(s.fov_deg),
        )

    def cameras(self, count: int, policy: str = "orbit", seed: int = 0) -> list[Camera]:
        if policy not in VIEW_POLICIES:
            raise ValueError(f"unknown viewpoint policy {policy!r}; expected one of {VIEW_POLICIES}")
        if policy == "fixed":
            return [self.camera(np.deg2rad(60.0), np.deg2rad(35.0))] * count
        if policy == "orbit":
            az = np.deg2rad(30.0) + 2 * np.pi * np.arange(count) / max(count, 1)
            return [self.camera(a, np.deg2rad(30.0)) for a in az]
        rng = np.random.default_rng(seed)
        az = rng.uniform(0.0, 2 * np.pi, count)
        el = np.arcsin(rng.uniform(np.sin(np.deg2rad(-15.0)), np.sin(np.deg2rad(65.0)), count))
        return [self.camera(a, e) for a, e in zip(az, el)]

    def bundle_cameras(self, count: int = 8) -> list[Camera]:
        """Evenly spaced azimuths with elevations cycling through -10, 15, 40 and 65 degrees."""
        elevations = np.deg2rad([-10.0, 15.0, 40.0, 65.0])
        return [self.camera(2 * np.pi * k / count, elevations[k % 4]) for k in range(count)]

    # -- sampling for reconstruction -------------------------------------------------
    def sample_surface(self, count_per_part: int, seed: int, noise: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        """Independent canonical surface samples (points, bone ids), optionally jittered."""
        rng = np.random.default_rng(seed)
        pts, ids = [], []
        for b in range(self.skeleton.num_bones):
            p, _, _ = _ellipsoid_shell(self.skeleton, b, self.spec, count_per_part, rng)
            pts.append(p)
            ids.append(np.full(count_per_part, b))
        points = np.concatenate(pts)
        if noise > 0:
            points = points + noise * rng.standard_normal(points.shape)
        return points, np.concatenate(ids)

    def part_of(self, positions: np.ndarray) -> np.ndarray:
        """Ground-truth bone of arbitrary canonical positions: the part of the nearest shell point."""
        from scipy.spatial import cKDTree

        _, idx = cKDTree(self.points).query(np.asarray(positions, dtype=float))
        return self.part_ids[idx]


def _bone_frame(direction: np.ndarray) -> np.ndarray:
    e1 = direction / np.linalg.norm(direction)
    helper = np.array([0.0, 0.0, 1.0]) if abs(e1[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e2 = np.cross(e1, helper)
    e2 /= np.linalg.norm(e2)
    return np.stack([e1, e2, np.cross(e1, e2)], axis=1)


def _ellipsoid_shell(skeleton: SkeletonGraph, bone: int, spec: OracleSpec, count: int, rng: np.random.Generator):
    heads, tails = skeleton.bone_endpoints()
    head, tail = heads[bone], tails[bone]
    length = np.linalg.norm(tail - head)
    frame = _bone_frame(tail - head)
    semi = np.array([0.45, spec.part_radius[0], spec.part_radius[1]]) * length
    u = rng.standard_normal((count, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    local = u * semi
    normal = u / semi
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    points = 0.5 * (head + tail) + local @ frame.T
    along = 0.5 + local[:, 0] / length
    return points, normal @ frame.T, along


def _build_skeleton(spec: OracleSpec, rng: np.random.Generator) -> SkeletonGraph:
    L = spec.bone_length
    if spec.topology == "chain":
        nodes = np.array([[i * L, 0.0, 0.0] for i in range(spec.num_bones + 1)])
        edges = [(i, i + 1) for i in range(spec.num_bones)]
    else:
        nodes = [np.zeros(3)]
        edges = []
        for j in range(1, spec.num_bones + 1):
            parent = int(rng.integers(0, j))
            d = rng.standard_normal(3)
            d[2] *= 0.3
            nodes.append(nodes[parent] + L * d / np.linalg.norm(d))
            edges.append((parent, j))
        nodes = np.array(nodes)
    nodes = nodes - nodes.mean(axis=0)
    return validate_skeleton(nodes, edges, root=0)


def generate_scene(spec: OracleSpec = OracleSpec()) -> OracleScene:
    rng = np.random.default_rng(spec.seed)
    skeleton = _build_skeleton(spec, rng)
    J = skeleton.num_joints
    heads, tails = skeleton.bone_endpoints()

    pts, cols, ids, radial, along = [], [], [], [], []
    for b in range(skeleton.num_bones):
        p, n, a = _ellipsoid_shell(skeleton, b, spec, spec.points_per_part, rng)
        frame = _bone_frame(tails[b] - heads[b])
        ang = np.arctan2((p - 0.5 * (heads[b] + tails[b])) @ frame[:, 2], (p - 0.5 * (heads[b] + tails[b])) @ frame[:, 1])
        base = _PALETTE[b % len(_PALETTE)]
        shade = 0.65 + 0.2 * np.sin(2 * np.pi * 3.0 * a) + 0.15 * np.cos(ang)
        cols.append(np.clip(base[None] * shade[:, None], 0.0, 1.0))
        pts.append(p)
        ids.append(np.full(len(p), b))
        radial.append(n)
        along.append(a)

    axes = np.zeros((J, 3))
    amplitudes = np.zeros(J)
    phases = np.zeros(J)
    for b, j in enumerate(skeleton.bone_joints):
        d = tails[b] - heads[b]
        d /= np.linalg.norm(d)
        v = rng.standard_normal(3)
        v -= d * (v @ d)
        axes[j] = v / np.linalg.norm(v)
        amplitudes[j] = np.deg2rad(spec.amplitude_deg) * (1.0 if rng.random() < 0.5 else -1.0)
        phases[j] = rng.uniform(0.0, 2 * np.pi)
    axes[skeleton.root] = [0.0, 0.0, 1.0]
    root_dir = rng.standard_normal(3)
    root_dir /= np.linalg.norm(root_dir)

    return OracleScene(
        spec=spec,
        skeleton=skeleton,
        points=np.concatenate(pts),
        colors=np.concatenate(cols),
        part_ids=np.concatenate(ids),
        radial=np.concatenate(radial),
        along=np.concatenate(along),
        axes=axes,
        amplitudes=amplitudes,
        phases=phases,
        root_direction=root_dir,
        root_phase=float(rng.uniform(0.0, 2 * np.pi)),
    )


def uniform_timesteps(interval: float = 0.1) -> np.ndarray:
    n = int(round(1.0 / interval))
    return np.linspace(0.0, 1.0, n + 1)


def render_observations(
    scene: OracleScene,
    timesteps,
    policy: str = "random-sphere",
    seed: int = 0,
    bundle_views: int = 8,
) -> ObservationSet:
    """One frame per timestep from the policy's cameras, plus a multi-view bundle at t = 0."""
    timesteps = np.asarray(timesteps, dtype=float)
    if np.any((timesteps < 0) | (timesteps > 1)):
        raise ValueError("timesteps must lie in [0, 1]")
    cams = scene.cameras(len(timesteps), policy, seed)
    frames = [Observation(float(t), c, scene.render(float(t), c), f"frame_{i:03d}") for i, (t, c) in enumerate(zip(timesteps, cams))]
    bundle = [Observation(0.0, c, scene.render(0.0, c), f"canonical_{k:03d}") for k, c in enumerate(scene.bundle_cameras(bundle_views))] if bundle_views else []
    return ObservationSet(frames, bundle)


@dataclass
class OracleDataset:
    scene: OracleScene
    train: ObservationSet
    test: ObservationSet


def make_dataset(
    spec: OracleSpec = OracleSpec(),
    interval: float = 0.1,
    train_policy: str = "random-sphere",
    test_policy: str = "random-sphere",
    seed: int = 0,
    bundle_views: int = 8,
) -> OracleDataset:
    """Sparse training frames, held-out novel views at the same timesteps, and the t = 0 bundle."""
    scene = generate_scene(spec)
    ts = uniform_timesteps(interval)
    train = render_observations(scene, ts, train_policy, seed, bundle_views)
    test = render_observations(scene, ts, test_policy, seed + 7919, 0)
    return OracleDataset(scene, train, test)



# ---------------------------------------------------------------------------
# recovery metrics against the ground truth
# ---------------------------------------------------------------------------
def bone_rotation_errors(model, scene: OracleScene, times) -> np.ndarray:
    """Geodesic angle (degrees) between predicted and true global bone rotations, shape (T, B).

    Comparing global bone rotations makes the metric independent of how the
    model splits a rotation between a bone's own joint and its ancestors.
    """
    from .geometry import rotation_angle

    out = []
    with no_grad():
        for t in times:
            pose = model.predict_pose(float(t))
            R, _ = forward_kinematics(model.skeleton, pose.local_rotations, pose.root_translation).bone_transforms(model.skeleton)
            R_gt, _ = scene.bone_transforms(float(t))
            out.append(np.rad2deg(rotation_angle(R.data, R_gt)))
    return np.array(out)


def assignment_agreement(model, scene: OracleScene) -> float:
    """Fraction of Gaussians whose argmax skinning bone is their true part."""
    with no_grad():
        w = model.skinning_weights().data
    return float(np.mean(np.argmax(w, axis=1) == scene.part_of(model.canon_centers)))


def export_dataset(dataset: OracleDataset, root, init_points_per_part: int = 500, init_seed: int = 101,
                   init_noise: float = 0.01, bits: int = 16) -> None:
    """Write the dataset layout the command line ingests.

    ``transforms_{train,test,canonical}.json`` with 16-bit PNGs, ``skeleton.json``,
    ``init_points.txt`` (independent surface samples, no colours) and ``oracle.json``.
    """
    import json
    from pathlib import Path

    from .autodiff.checkpoint import atomic_write_text
    from .io import save_points, write_observations
    from .skeleton import save_skeleton

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_observations(dataset.train.frames, root, "train", bits)
    write_observations(dataset.test.frames, root, "test", bits)
    write_observations(dataset.train.canonical, root, "canonical", bits)
    save_skeleton(dataset.scene.skeleton, root / "skeleton.json")
    pts, _ = dataset.scene.sample_surface(init_points_per_part, init_seed, init_noise)
    save_points(root / "init_points.txt", pts)
    atomic_write_text(root / "oracle.json", json.dumps({"spec": dataset.scene.spec.to_dict()}, indent=1))
