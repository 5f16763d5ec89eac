"""End-to-end oracle experiment: generate, fit the canonical cloud, train, score.

Shared by the acceptance tests and the scripts in ``scripts/`` so both run the
exact same protocol.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import no_grad
from .canonical import CanonicalFitConfig, fit_canonical
from .gaussians import GaussianCloud, init_from_points
from .oracle import OracleDataset, OracleSpec, assignment_agreement, bone_rotation_errors, make_dataset
from .training import MetricTable, TrainConfig, evaluate, train_deformation

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OracleExperiment:
    spec: OracleSpec = field(default_factory=OracleSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    canonical: CanonicalFitConfig = field(default_factory=CanonicalFitConfig)
    init_points_per_part: int = 500
    init_seed: int = 101
    init_noise: float = 0.01


@dataclass
class ExperimentResult:
    model: object
    history: dict
    test: MetricTable
    angle_errors: np.ndarray  # (T, B) degrees at the training timesteps
    agreement: float
    canonical_hash_before: str
    canonical_hash_after: str

    def summary(self) -> dict:
        out = self.test.summary()
        out["max_angle_error_deg"] = float(self.angle_errors.max())
        out["agreement"] = self.agreement
        return out


def prepare(exp: OracleExperiment) -> tuple[OracleDataset, GaussianCloud]:
    """Oracle dataset plus a canonical cloud fitted to its t = 0 bundle."""
    ds = make_dataset(exp.spec)
    pts, _ = ds.scene.sample_surface(exp.init_points_per_part, seed=exp.init_seed, noise=exp.init_noise)
    cloud = fit_canonical(init_from_points(pts), ds.train.canonical, exp.canonical)
    return ds, cloud


def run(exp: OracleExperiment, dataset: OracleDataset, cloud: GaussianCloud, progress=None) -> ExperimentResult:
    before = cloud.fingerprint()
    res = train_deformation(cloud, dataset.scene.skeleton, dataset.train, exp.train, progress=progress)
    after = cloud.fingerprint()
    return ExperimentResult(
        model=res.model,
        history=res.history,
        test=evaluate(res.model, dataset.test, exp.train.background),
        angle_errors=bone_rotation_errors(res.model, dataset.scene, dataset.train.times),
        agreement=assignment_agreement(res.model, dataset.scene),
        canonical_hash_before=before,
        canonical_hash_after=after,
    )


def _centers(model, t: float) -> np.ndarray:
    with no_grad():
        return model.deform(float(t)).centers.data


def interpolation_report(model, scene, train_times, count: int = 101) -> dict:
    """Angle tracking and frame-to-frame motion on a dense uniform time grid.

    ``train_bound`` is the largest per-Gaussian displacement between adjacent
    training timesteps, rescaled to the dense frame spacing, i.e. the motion a
    frame would show if the model moved at its fastest observed rate.
    """
    ts = np.linspace(0.0, 1.0, count)
    train_times = np.asarray(train_times, dtype=float)
    errs = bone_rotation_errors(model, scene, ts)
    between = ~np.isclose(ts[:, None], train_times[None, :], atol=1e-9).any(axis=1)
    dense = [_centers(model, t) for t in ts]
    frame_disp = max(np.linalg.norm(b - a, axis=1).max() for a, b in zip(dense, dense[1:]))
    sparse = [_centers(model, t) for t in train_times]
    train_disp = max(np.linalg.norm(b - a, axis=1).max() for a, b in zip(sparse, sparse[1:]))
    spacing_ratio = (ts[1] - ts[0]) / float(np.min(np.diff(train_times)))
    return {
        "max_between_error_deg": float(errs[between].max()),
        "max_error_deg": float(errs.max()),
        "max_frame_displacement": float(frame_disp),
        "train_bound": float(train_disp * spacing_ratio),
    }
