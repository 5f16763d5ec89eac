"""Dataset manifests (transforms_<split>.json) and PNG image I/O.

A manifest holds global intrinsics and a list of frames::

    {"camera_angle_x": 0.69, "w": 128, "h": 128, "camera_convention": "opengl",
     "frames": [{"file_path": "train/r_000.png", "time": 0.0,
                 "transform_matrix": [[...4x4 camera-to-world...]]}]}

Frames may override ``fl_x``, ``fl_y``, ``cx``, ``cy``, ``w``, ``h``.  Image
paths may omit the ``.png`` suffix.  Times outside [0, 1] are rescaled to it.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .autodiff.checkpoint import atomic_write_bytes, atomic_write_text
from .observations import Observation, ObservationSet
from .render import Camera

log = logging.getLogger(__name__)

INTRINSIC_KEYS = ("fl_x", "fl_y", "cx", "cy", "w", "h", "camera_angle_x")
SPLITS = ("train", "test", "canonical")


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------
def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def read_image(path, background=(0.0, 0.0, 0.0), linearize: bool = False) -> np.ndarray:
    """Float RGB in [0, 1]; an alpha channel composites the image over ``background``."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DatasetError(f"cannot read image {path}")
    scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    img = raw.astype(float) / scale
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    elif img.shape[2] == 4:
        img = img[..., [2, 1, 0, 3]]
    else:
        img = img[..., ::-1]
    rgb = img[..., :3]
    if linearize:
        rgb = srgb_to_linear(rgb)
    if img.shape[2] == 4:
        a = img[..., 3:4]
        rgb = rgb * a + np.asarray(background, dtype=float) * (1.0 - a)
    return np.ascontiguousarray(rgb)


def write_image(path, image: np.ndarray, bits: int = 8) -> None:
    """PNG write (atomic); ``bits`` is 8 or 16."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    img = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    dtype, scale = (np.uint8, 255.0) if bits == 8 else (np.uint16, 65535.0)
    q = np.round(img * scale).astype(dtype)
    if q.ndim == 3:
        q = q[..., ::-1] if q.shape[2] == 3 else q[..., [2, 1, 0, 3]]
    ok, buf = cv2.imencode(".png", np.ascontiguousarray(q))
    if not ok:
        raise DatasetError(f"PNG encoding failed for {path}")
    atomic_write_bytes(Path(path), buf.tobytes())


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------
@dataclass
class ManifestFrame:
    file_path: str
    time: float
    transform_matrix: np.ndarray  # (4, 4) camera-to-world
    intrinsics: dict = field(default_factory=dict)  # per-frame overrides

    def to_dict(self) -> dict:
        d = {"file_path": self.file_path, "time": self.time, "transform_matrix": self.transform_matrix.tolist()}
        d.update(self.intrinsics)
        return d


@dataclass
class DatasetManifest:
    frames: list[ManifestFrame]
    intrinsics: dict  # global values for INTRINSIC_KEYS
    split: str = "train"
    convention: str = "opengl"
    extra: dict = field(default_factory=dict)  # unrecognised top-level fields, kept for round trips

    def to_dict(self) -> dict:
        d = dict(self.extra)
        d.update(self.intrinsics)
        d["camera_convention"] = self.convention
        d["frames"] = [f.to_dict() for f in self.frames]
        return d

    def camera(self, i: int) -> Camera:
        f = self.frames[i]
        k = {**self.intrinsics, **f.intrinsics}
        if "w" not in k or "h" not in k:
            raise DatasetError(f"frame {i} ({f.file_path}): image size unknown (need w and h)")
        w, h = int(k["w"]), int(k["h"])
        if "fl_x" in k:
            fx = float(k["fl_x"])
        elif "camera_angle_x" in k:
            fx = 0.5 * w / math.tan(0.5 * float(k["camera_angle_x"]))
        else:
            raise DatasetError(f"frame {i} ({f.file_path}): no focal length or camera_angle_x")
        fy = float(k.get("fl_y", fx))
        cx = float(k.get("cx", w / 2.0))
        cy = float(k.get("cy", h / 2.0))
        return Camera.from_camera_to_world(f.transform_matrix, fx, fy, cx, cy, w, h, self.convention)


def parse_manifest(doc: dict, split: str = "train") -> DatasetManifest:
    if not isinstance(doc, dict) or "frames" not in doc:
        raise DatasetError("manifest: missing field 'frames'")
    if not isinstance(doc["frames"], list):
        raise DatasetError("manifest: field 'frames' must be a list")
    convention = doc.get("camera_convention", "opengl")
    if convention not in ("opengl", "opencv"):
        raise DatasetError(f"manifest: field 'camera_convention' has unknown value {convention!r}")
    intr = {k: doc[k] for k in INTRINSIC_KEYS if k in doc}
    extra = {k: v for k, v in doc.items() if k not in INTRINSIC_KEYS + ("frames", "camera_convention")}
    frames = []
    for i, fr in enumerate(doc["frames"]):
        for key in ("file_path", "transform_matrix"):
            if key not in fr:
                raise DatasetError(f"manifest: frames[{i}] missing field '{key}'")
        m = np.asarray(fr["transform_matrix"], dtype=float)
        if m.shape != (4, 4):
            raise DatasetError(f"manifest: frames[{i}].transform_matrix must be 4x4, got {m.shape}")
        if not np.all(np.isfinite(m)) or abs(np.linalg.det(m)) < 1e-12:
            raise DatasetError(f"manifest: frames[{i}].transform_matrix is not invertible")
        t = float(fr.get("time", 0.0))
        frames.append(ManifestFrame(str(fr["file_path"]), t, m, {k: fr[k] for k in INTRINSIC_KEYS if k in fr}))
    return DatasetManifest(frames, intr, split, convention, extra)


def normalize_times(manifest: DatasetManifest, lo: float | None = None, hi: float | None = None) -> DatasetManifest:
    """Rescale frame times into [0, 1] when any lies outside it (no-op otherwise)."""
    ts = np.array([f.time for f in manifest.frames])
    if len(ts) == 0 or (ts.min() >= 0.0 and ts.max() <= 1.0):
        return manifest
    lo = ts.min() if lo is None else lo
    hi = ts.max() if hi is None else hi
    span = hi - lo if hi > lo else 1.0
    log.warning("%s: times span [%g, %g]; rescaling to [0, 1]", manifest.split, ts.min(), ts.max())
    for f in manifest.frames:
        f.time = float((f.time - lo) / span)
    return manifest


def load_manifest(path, split: str | None = None) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: invalid JSON ({e})") from None
    if split is None:
        split = path.stem.removeprefix("transforms_")
    return parse_manifest(doc, split)


def save_manifest(manifest: DatasetManifest, path) -> None:
    atomic_write_text(Path(path), json.dumps(manifest.to_dict(), indent=1))


def resolve_image(root: Path, file_path: str) -> Path:
    p = root / file_path
    if p.exists():
        return p
    if p.suffix.lower() != ".png" and p.with_name(p.name + ".png").exists():
        return p.with_name(p.name + ".png")
    raise DatasetError(f"image not found: {p}")


def load_observations(manifest: DatasetManifest, root, background=(0.0, 0.0, 0.0), linearize: bool = False) -> list[Observation]:
    root = Path(root)
    out = []
    for i, f in enumerate(manifest.frames):
        cam = manifest.camera(i)
        img = read_image(resolve_image(root, f.file_path), background, linearize)
        if img.shape[:2] != (cam.height, cam.width):
            raise DatasetError(f"{f.file_path}: image is {img.shape[1]}x{img.shape[0]}, manifest says {cam.width}x{cam.height}")
        out.append(Observation(f.time, cam, img, Path(f.file_path).stem))
    return out


def load_dataset(root, split: str = "train", background=(0.0, 0.0, 0.0), linearize: bool = False) -> ObservationSet:
    """Observations of one split; the train split also picks up ``transforms_canonical.json``."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    manifest = normalize_times(load_manifest(root / f"transforms_{split}.json", split))
    frames = load_observations(manifest, root, background, linearize)
    canonical = []
    canon_path = root / "transforms_canonical.json"
    if split == "train" and canon_path.exists():
        canonical = load_observations(load_manifest(canon_path, "canonical"), root, background, linearize)
    return ObservationSet(frames, canonical)


def manifest_from_observations(observations: list[Observation], image_dir: str, split: str, convention: str = "opengl") -> DatasetManifest:
    frames = []
    glob = {}
    if observations:
        c = observations[0].camera
        glob = {"w": c.width, "h": c.height}
    for i, o in enumerate(observations):
        c = o.camera
        name = o.name or f"r_{i:03d}"
        frames.append(ManifestFrame(f"{image_dir}/{name}.png", o.time, c.camera_to_world(convention),
                                    {"fl_x": c.fx, "fl_y": c.fy, "cx": c.cx, "cy": c.cy}))
    return DatasetManifest(frames, glob, split, convention)


def write_observations(observations: list[Observation], root, split: str, bits: int = 16) -> DatasetManifest:
    """Write images under ``root/split/`` and the manifest ``root/transforms_<split>.json``."""
    root = Path(root)
    manifest = manifest_from_observations(observations, split, split)
    for o, f in zip(observations, manifest.frames):
        write_image(root / f.file_path, o.image, bits)
    save_manifest(manifest, root / f"transforms_{split}.json")
    return manifest


def save_points(path, points: np.ndarray, colors: np.ndarray | None = None) -> None:
    """Whitespace-separated ``x y z [r g b]`` rows."""
    data = points if colors is None else np.concatenate([points, colors], axis=1)
    lines = "\n".join(" ".join(repr(float(v)) for v in row) for row in data)
    atomic_write_text(Path(path), "# x y z" + (" r g b" if colors is not None else "") + "\n" + lines + "\n")


def load_points(path) -> tuple[np.ndarray, np.ndarray | None]:
    try:
        data = np.loadtxt(path, ndmin=2)
    except OSError:
        raise DatasetError(f"point file not found: {path}") from None
    except ValueError as e:
        raise DatasetError(f"{path}: malformed point file ({e})") from None
    if data.shape[1] not in (3, 6):
        raise DatasetError(f"{path}: expected 3 or 6 columns, got {data.shape[1]}")
    return data[:, :3], (data[:, 3:] if data.shape[1] == 6 else None)
