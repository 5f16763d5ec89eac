"""Deformation training against sparse observations with a frozen canonical cloud."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Adam, ParamGroup, Tape, load_checkpoint, no_grad
from .deformation import DeformationConfig, DeformationModel, config_from_dict
from .gaussians import GaussianCloud
from .losses import LossConfig, combine_losses, detail_loss, motion_loss, perceptual_loss, psnr, ssim
from .observations import Observation, ObservationSet
from .render import RasterSettings, render
from .skeleton import SkeletonGraph, parse_skeleton

log = logging.getLogger(__name__)

GOLDEN = 0.6180339887498949
HISTORY_KEYS = ("total", "perceptual", "motion", "detail")


class NumericalAbort(RuntimeError):
    def __init__(self, step: int, checkpoint: Path | None):
        super().__init__(f"non-finite loss or gradient at step {step}" + (f"; last good state in {checkpoint}" if checkpoint else ""))
        self.step = step
        self.checkpoint = checkpoint


class FreezeViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 40000
    lr_theta: float = 1e-4
    lr_phi: float = 1e-4
    lr_psi: float = 1e-4
    lr_radii: float = 1e-3
    final_lr_fraction: float = 0.1
    psi_warmup_fraction: float = 0.2
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    deformation: DeformationConfig = field(default_factory=DeformationConfig)
    checkpoint_interval: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    raster: RasterSettings = field(default_factory=RasterSettings.fast)

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if min(self.lr_theta, self.lr_phi, self.lr_psi, self.lr_radii) <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.final_lr_fraction <= 1 or not 0 <= self.psi_warmup_fraction < 1:
            raise ValueError("final_lr_fraction must lie in (0, 1] and psi_warmup_fraction in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        d["deformation"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["deformation"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config field(s): {sorted(unknown)}")
        if "loss" in d:
            d["loss"] = LossConfig(**d["loss"])
        if "deformation" in d:
            d["deformation"] = config_from_dict(d["deformation"])
        if "raster" in d:
            d["raster"] = RasterSettings(**d["raster"])
        if "background" in d:
            d["background"] = tuple(d["background"])
        return cls(**d)


def lr_scale(step: int, steps: int, final_fraction: float) -> float:
    """Cosine decay from 1 to ``final_fraction`` over the run."""
    if steps <= 1:
        return 1.0
    c = 0.5 * (1.0 + math.cos(math.pi * step / (steps - 1)))
    return final_fraction + (1.0 - final_fraction) * c


def motion_phase(step: int) -> float:
    """Low-discrepancy offset of the motion-loss sample grid."""
    return (step * GOLDEN) % 1.0


@dataclass
class TrainResult:
    model: DeformationModel
    optimizer: Adam
    history: dict[str, list[float]]
    step: int


def canonical_fingerprint(model: DeformationModel) -> str:
    import hashlib

    h = hashlib.sha256()
    for a in (model.canon_centers, model.canon_rotations, model.canon_cov, model.opacities, model.sh_coeffs):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def make_optimizer(model: DeformationModel, cfg: TrainConfig) -> Adam:
    groups = model.parameter_groups()
    lrs = {"theta": cfg.lr_theta, "phi": cfg.lr_phi, "psi": cfg.lr_psi, "log_radii": cfg.lr_radii}
    return Adam([ParamGroup(ps, lrs[name], name) for name, ps in groups.items()])


def set_learning_rates(opt: Adam, cfg: TrainConfig, step: int) -> None:
    s = lr_scale(step, cfg.steps, cfg.final_lr_fraction)
    base = {"theta": cfg.lr_theta, "phi": cfg.lr_phi, "psi": cfg.lr_psi, "log_radii": cfg.lr_radii}
    for g in opt.groups:
        g.lr = base[g.name] * s
        if g.name == "psi" and step < cfg.psi_warmup_fraction * cfg.steps:
            g.lr = 0.0


def training_loss(model: DeformationModel, obs: Observation, cfg: TrainConfig, step: int):
    deformed = model.deform(obs.time)
    out = render(model.view(deformed), obs.camera, cfg.background, cfg.raster)
    lc = cfg.loss
    perc = perceptual_loss(out.image, obs.image, lc)
    mot = motion_loss(model.pose_net.raw, lc.motion_samples, motion_phase(step), lc.motion_include_translation, lc.motion_mode) if lc.lambda_motion > 0 else 0.0
    det = detail_loss(deformed.offsets) if (lc.lambda_detail > 0 and model.cfg.use_detail) else 0.0
    return combine_losses(lc, perc, mot, det)


def save_training_state(path, model: DeformationModel, opt: Adam, cfg: TrainConfig, step: int, history, fingerprint: str) -> None:
    extra = {f"optim.{k}": v for k, v in opt.state_arrays().items()}
    extra["train.step"] = np.array([step], dtype=float)
    for k in HISTORY_KEYS:
        extra[f"history.{k}"] = np.asarray(history[k], dtype=float)
    model.save(path, extra, {"train_config": cfg.to_dict(), "step": step, "canonical_fingerprint": fingerprint})


def load_training_state(path, skeleton: SkeletonGraph, cloud: GaussianCloud):
    """Rebuild (model, optimizer, config, step, history) from a training checkpoint."""
    arrays, meta = load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["train_config"])
    model = DeformationModel(skeleton, cloud, replace(cfg.deformation, seed=cfg.seed))
    model.load_arrays(arrays)
    opt = make_optimizer(model, cfg)
    opt.load_state_arrays({k[len("optim."):]: v for k, v in arrays.items() if k.startswith("optim.")})
    history = {k: list(arrays.get(f"history.{k}", np.zeros(0))) for k in HISTORY_KEYS}
    step = int(arrays["train.step"][0])
    if meta.get("canonical_fingerprint") not in (None, canonical_fingerprint(model)):
        raise FreezeViolation("checkpoint was trained against a different canonical cloud")
    return model, opt, cfg, step, history


def load_model(path, cloud: GaussianCloud, skeleton: SkeletonGraph | None = None) -> DeformationModel:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "deformation_model":
        raise ValueError(f"{path}: not a deformation model checkpoint")
    skeleton = skeleton or parse_skeleton(meta["skeleton"])
    model = DeformationModel(skeleton, cloud, config_from_dict(meta["config"]))
    model.load_arrays(arrays)
    return model


def train_deformation(
    cloud: GaussianCloud,
    skeleton: SkeletonGraph,
    observations: ObservationSet,
    cfg: TrainConfig = TrainConfig(),
    checkpoint_dir: Path | str | None = None,
    resume: Path | str | None = None,
    stop_after: int | None = None,
    progress=None,
) -> TrainResult:
    """Optimise pose network, radii, correction and detail networks; the cloud stays frozen.

    Step ``s`` uses observation ``s mod len(observations)`` (frames are sorted by
    time, so this cycles through the timesteps).  ``stop_after`` ends the run
    early (for resume tests) without altering the schedule.
    """
    if len(observations) == 0:
        raise ValueError("observation set is empty")
    cloud_hash = cloud.fingerprint()
    if resume is not None:
        model, opt, saved_cfg, step, history = load_training_state(resume, skeleton, cloud)
        if replace(saved_cfg, checkpoint_interval=cfg.checkpoint_interval) != cfg:
            log.warning("resuming with the configuration stored in %s", resume)
        cfg = replace(saved_cfg, checkpoint_interval=cfg.checkpoint_interval)
    else:
        model = DeformationModel(skeleton, cloud, replace(cfg.deformation, seed=cfg.seed))
        opt = make_optimizer(model, cfg)
        step = 0
        history = {k: [] for k in HISTORY_KEYS}
    for a in (model.canon_centers, model.canon_rotations, model.canon_cov, model.opacities, model.sh_coeffs):
        a.flags.writeable = False
    fingerprint = canonical_fingerprint(model)
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)

    def verify_frozen():
        if cloud.fingerprint() != cloud_hash or canonical_fingerprint(model) != fingerprint:
            raise FreezeViolation("canonical Gaussian parameters changed during deformation training")

    end = cfg.steps if stop_after is None else min(cfg.steps, stop_after)
    n = len(observations)
    while step < end:
        obs = observations[step % n]
        set_learning_rates(opt, cfg, step)
        opt.zero_grad()
        tape = Tape()
        with tape:
            report = training_loss(model, obs, cfg, step)
        total = report.total.item()
        if math.isfinite(total):
            tape.backward(report.total)
        if not math.isfinite(total) or not all(np.all(np.isfinite(p.grad)) for p in opt.parameters()):
            path = None
            if ckdir is not None:
                path = ckdir / "last_good.ckpt"
                save_training_state(path, model, opt, cfg, step, history, fingerprint)
            raise NumericalAbort(step, path)
        opt.step()
        history["total"].append(total)
        history["perceptual"].append(report.perceptual)
        history["motion"].append(report.motion)
        history["detail"].append(report.detail)
        step += 1
        if progress is not None:
            progress(step, report)
        if ckdir is not None and cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
            verify_frozen()
            save_training_state(ckdir / f"step_{step:06d}.ckpt", model, opt, cfg, step, history, fingerprint)
    verify_frozen()
    if ckdir is not None:
        save_training_state(ckdir / "final.ckpt", model, opt, cfg, step, history, fingerprint)
    return TrainResult(model, opt, history, step)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------
@dataclass
class FrameMetrics:
    name: str
    time: float
    psnr: float
    ssim: float


@dataclass
class MetricTable:
    frames: list[FrameMetrics]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([f.psnr for f in self.frames])) if self.frames else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([f.ssim for f in self.frames])) if self.frames else math.nan

    @property
    def worst_psnr(self) -> float:
        return float(min(f.psnr for f in self.frames)) if self.frames else math.nan

    @property
    def worst_ssim(self) -> float:
        return float(min(f.ssim for f in self.frames)) if self.frames else math.nan

    def summary(self) -> dict[str, float]:
        return {"mean_psnr": self.mean_psnr, "mean_ssim": self.mean_ssim,
                "worst_psnr": self.worst_psnr, "worst_ssim": self.worst_ssim, "frames": len(self.frames)}


def render_frame(model: DeformationModel, t: float, camera, background=(0.0, 0.0, 0.0), settings: RasterSettings | None = None) -> np.ndarray:
    with no_grad():
        out = render(model.view(model.deform(t)), camera, background, settings or RasterSettings.fast())
    return out.image.data


def evaluate(model: DeformationModel, observations, background=(0.0, 0.0, 0.0), settings: RasterSettings | None = None) -> MetricTable:
    """Per-frame PSNR / SSIM of renders against held-out observations."""
    rows = []
    for i, obs in enumerate(observations):
        img = np.clip(render_frame(model, obs.time, obs.camera, background, settings), 0.0, 1.0)
        rows.append(FrameMetrics(obs.name or f"frame_{i:03d}", obs.time, psnr(img, obs.image), ssim(img, obs.image)))
    return MetricTable(rows)
