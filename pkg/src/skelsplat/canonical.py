"""Static fitting of the canonical Gaussian cloud against the t = 0 views."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, ParamGroup, Tape
from .gaussians import GaussianCloud
from .losses import LossConfig, perceptual_loss
from .observations import Observation
from .render import GaussianView, RasterSettings, render


@dataclass(frozen=True)
class CanonicalFitConfig:
    iterations: int = 2000
    lr_centers: float = 2e-3
    lr_rotations: float = 1e-2
    lr_log_scales: float = 1e-2
    lr_opacity: float = 5e-2
    lr_sh: float = 1e-2
    final_lr_fraction: float = 0.1  # centres decay exponentially to this fraction
    dssim_mix: float = 0.2
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    raster: RasterSettings = field(default_factory=RasterSettings.fast)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")


def cloud_view(cloud: GaussianCloud) -> GaussianView:
    return GaussianView(cloud.centers, cloud.covariances(), cloud.opacities(), cloud.sh_coeffs, cloud.sh_degree)


def fit_canonical(
    cloud: GaussianCloud,
    views: list[Observation],
    cfg: CanonicalFitConfig = CanonicalFitConfig(),
    history: list[float] | None = None,
) -> GaussianCloud:
    """Optimise every Gaussian attribute against the perceptual loss; N never changes.

    Views are visited in a fresh seeded permutation each epoch.  Returns a new
    cloud; the input is left untouched.
    """
    if not views:
        raise ValueError("canonical fitting needs at least one view")
    cloud = cloud.copy()
    if cfg.iterations == 0:
        return cloud
    groups = [
        ParamGroup([cloud.centers], cfg.lr_centers, "centers"),
        ParamGroup([cloud.rotations], cfg.lr_rotations, "rotations"),
        ParamGroup([cloud.log_scales], cfg.lr_log_scales, "log_scales"),
        ParamGroup([cloud.opacity_logits], cfg.lr_opacity, "opacity"),
        ParamGroup([cloud.sh_coeffs], cfg.lr_sh, "sh"),
    ]
    opt = Adam(groups)
    rng = np.random.default_rng(cfg.seed)
    loss_cfg = LossConfig(dssim_mix=cfg.dssim_mix)
    order: list[int] = []
    for it in range(cfg.iterations):
        if not order:
            order = list(rng.permutation(len(views)))
        obs = views[order.pop()]
        frac = it / max(cfg.iterations - 1, 1)
        opt.group("centers").lr = cfg.lr_centers * cfg.final_lr_fraction**frac
        opt.zero_grad()
        tape = Tape()
        with tape:
            out = render(cloud_view(cloud), obs.camera, cfg.background, cfg.raster)
            loss = perceptual_loss(out.image, obs.image, loss_cfg)
        tape.backward(loss)
        opt.step()
        if history is not None:
            history.append(loss.item())
    return cloud
