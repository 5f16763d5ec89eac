"""Photometric and regularisation losses, plus PSNR / SSIM metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, abs_, as_tensor, linear_op, no_grad, sqrt

SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class LossConfig:
    lambda_perceptual: float = 2.0
    lambda_motion: float = 1.0
    lambda_detail: float = 1.0
    dssim_mix: float = 0.2
    motion_samples: int = 32
    motion_include_translation: bool = True
    motion_mode: str = "abs"  # or "norm"
    ssim_window: int = 11
    ssim_sigma: float = 1.5

    def __post_init__(self):
        if min(self.lambda_perceptual, self.lambda_motion, self.lambda_detail) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.dssim_mix <= 1.0:
            raise ValueError("dssim_mix must lie in [0, 1]")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be odd and >= 3")
        if self.motion_mode not in ("abs", "norm"):
            raise ValueError(f"unknown motion_mode {self.motion_mode!r}")


@dataclass
class LossReport:
    total: Tensor
    perceptual: float
    motion: float
    detail: float
    extra: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict[str, float]:
        return {"total": self.total.item(), "perceptual": self.perceptual, "motion": self.motion,
                "detail": self.detail, **self.extra}


def combine_losses(
    cfg: LossConfig,
    perceptual: Tensor,
    motion: Tensor | float = 0.0,
    detail: Tensor | float = 0.0,
    extra: dict[str, tuple[float, Tensor]] | None = None,
) -> LossReport:
    """Weighted sum of the three terms; ``extra`` maps name -> (weight, term) for additional objectives."""
    perceptual, motion, detail = as_tensor(perceptual), as_tensor(motion), as_tensor(detail)
    total = cfg.lambda_perceptual * perceptual + cfg.lambda_motion * motion + cfg.lambda_detail * detail
    extras = {}
    for name, (weight, term) in (extra or {}).items():
        term = as_tensor(term)
        total = total + weight * term
        extras[name] = term.item()
    return LossReport(total, perceptual.item(), motion.item(), detail.item(), extras)


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------
@lru_cache(maxsize=8)
def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation over the two leading (image) axes
    y = np.tensordot(sliding_window_view(x, len(g), axis=0), g, axes=([-1], [0]))
    return np.tensordot(sliding_window_view(y, len(g), axis=1), g, axes=([-1], [0]))


def _filter_valid_adjoint(gy: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    h, w = gy.shape[:2]
    mid = np.zeros((h, w + k - 1) + gy.shape[2:])
    for i in range(k):
        mid[:, i : i + w] += g[i] * gy
    out = np.zeros((h + k - 1,) + mid.shape[1:])
    for i in range(k):
        out[i : i + h] += g[i] * mid
    return out


def gaussian_filter_valid(x, size: int = 11, sigma: float = 1.5) -> Tensor:
    g = gaussian_window(size, sigma)
    return linear_op(x, lambda a: _filter_valid(a, g), lambda gy: _filter_valid_adjoint(gy, g), "gaussian_filter")


def ssim_map(a, b, window: int = 11, sigma: float = 1.5) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape[:2]} smaller than SSIM window {window}")
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    f = lambda x: gaussian_filter_valid(x, window, sigma)  # noqa: E731
    mu_a, mu_b = f(a), f(b)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = f(a * a) - mu_aa
    var_b = f(b * b) - mu_bb
    cov = f(a * b) - mu_ab
    return ((2.0 * mu_ab + c1) * (2.0 * cov + c2)) / ((mu_aa + mu_bb + c1) * (var_a + var_b + c2))


def ssim(a, b, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all pixels and channels (data range 1)."""
    with no_grad():
        return float(ssim_map(a, b, window, sigma).data.mean())


# ---------------------------------------------------------------------------
# photometric
# ---------------------------------------------------------------------------
def perceptual_loss(render, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """``(1 - m) * L1 + m * (1 - SSIM) / 2`` with ``m = cfg.dssim_mix``."""
    render, target = as_tensor(render), as_tensor(target)
    if render.shape != target.shape:
        raise ValueError(f"image shapes differ: {render.shape} vs {target.shape}")
    m = cfg.dssim_mix
    loss = (1.0 - m) * abs_(render - target).mean() if m < 1.0 else 0.0
    if m > 0.0:
        loss = loss + m * (1.0 - ssim_map(render, target, cfg.ssim_window, cfg.ssim_sigma).mean()) * 0.5
    return as_tensor(loss)


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1]; identical images give ``inf``."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=float)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


# ---------------------------------------------------------------------------
# regularisers
# ---------------------------------------------------------------------------
def motion_sample_times(count: int, phase: float = 0.0) -> np.ndarray:
    """``count + 2`` equally spaced times in [0, 1): ``count`` centres plus their outer neighbours."""
    if count < 3:
        raise ValueError(f"motion loss needs at least 3 samples, got {count}")
    if not 0.0 <= phase < 1.0:
        raise ValueError("phase must lie in [0, 1)")
    h = 1.0 / (count + 2)
    return (np.arange(count + 2) + phase) * h


def motion_loss(
    raw_pose: Callable[[np.ndarray], tuple[Tensor, Tensor]],
    count: int = 32,
    phase: float = 0.0,
    include_translation: bool = True,
    mode: str = "abs",
) -> Tensor:
    """Mean second temporal difference of the raw pose outputs.

    ``raw_pose(times)`` returns un-normalised quaternions ``(n, J, 4)`` and root
    translations ``(n, 3)``.  The sum over joints, components and sample centres
    is divided by ``count * J``.
    """
    times = motion_sample_times(count, phase)
    quats, trans = raw_pose(times)
    J = quats.shape[1]
    lap_q = quats[:-2] - 2.0 * quats[1:-1] + quats[2:]
    if mode == "abs":
        total = abs_(lap_q).sum()
    else:
        total = sqrt((lap_q * lap_q).sum(axis=-1) + 1e-24).sum()
    if include_translation:
        lap_p = trans[:-2] - 2.0 * trans[1:-1] + trans[2:]
        total = total + (abs_(lap_p).sum() if mode == "abs" else sqrt((lap_p * lap_p).sum(axis=-1) + 1e-24).sum())
    return total / float(count * J)


def detail_loss(offsets) -> Tensor:
    """Mean squared Euclidean norm of per-Gaussian offsets ``(N, 3)``."""
    offsets = as_tensor(offsets)
    return (offsets * offsets).sum(axis=-1).mean()
