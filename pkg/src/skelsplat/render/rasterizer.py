"""Tile-binned front-to-back alpha compositing of 2D Gaussians and its exact adjoint.

Per pixel (centre at ``x + 0.5, y + 0.5``) and splats sorted by depth::

    alpha_k = min(alpha_clamp, opacity_k * exp(-0.5 * d^T conic_k d))
    C = sum_k c_k alpha_k T_k + T_final * background,   T_k = prod_{j<k} (1 - alpha_j)

A splat is skipped where its unclamped alpha would fall below
``alpha_cutoff``; compositing stops once ``T < min_transmittance``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numba
import numpy as np

from ..autodiff import Tensor, make_op


class RenderStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class RasterSettings:
    alpha_clamp: float = 0.99
    min_transmittance: float = 1e-7
    alpha_cutoff: float = 1e-10
    tile_size: int = 16

    @classmethod
    def fast(cls) -> "RasterSettings":
        """Looser guards for optimisation loops (cut at alpha 1/255, stop at T < 1e-4)."""
        return cls(alpha_cutoff=1.0 / 255.0, min_transmittance=1e-4)


@numba.njit(cache=True)
def _bin_splats(order, xmin, xmax, ymin, ymax, tiles_x, tiles_y, tile):
    counts = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    ranges = np.empty((order.shape[0], 4), dtype=np.int64)
    for n in range(order.shape[0]):
        s = order[n]
        tx0 = max(int(np.floor(xmin[s] / tile)), 0)
        tx1 = min(int(np.floor(xmax[s] / tile)), tiles_x - 1)
        ty0 = max(int(np.floor(ymin[s] / tile)), 0)
        ty1 = min(int(np.floor(ymax[s] / tile)), tiles_y - 1)
        ranges[n, 0] = tx0
        ranges[n, 1] = tx1
        ranges[n, 2] = ty0
        ranges[n, 3] = ty1
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    lists = np.empty(offsets[-1], dtype=np.int64)
    for n in range(order.shape[0]):
        s = order[n]
        for ty in range(ranges[n, 2], ranges[n, 3] + 1):
            for tx in range(ranges[n, 0], ranges[n, 1] + 1):
                t = ty * tiles_x + tx
                lists[fill[t]] = s
                fill[t] += 1
    return offsets, lists


@numba.njit(cache=True)
def _forward(offsets, lists, means, conics, opac, qcut, colors, bg, width, height, tile, tiles_x, alpha_clamp, t_min):
    image = np.empty((height, width, 3))
    final_t = np.empty((height, width))
    last = np.empty((height, width), dtype=np.int64)
    for py in range(height):
        ty = py // tile
        for px in range(width):
            t_idx = ty * tiles_x + px // tile
            start = offsets[t_idx]
            end = offsets[t_idx + 1]
            fx = px + 0.5
            fy = py + 0.5
            T = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            stop = start - 1
            for k in range(start, end):
                s = lists[k]
                dx = fx - means[s, 0]
                dy = fy - means[s, 1]
                q = conics[s, 0] * dx * dx + 2.0 * conics[s, 1] * dx * dy + conics[s, 2] * dy * dy
                if q > qcut[s]:
                    continue
                a = opac[s] * np.exp(-0.5 * q)
                if a > alpha_clamp:
                    a = alpha_clamp
                w = a * T
                c0 += colors[s, 0] * w
                c1 += colors[s, 1] * w
                c2 += colors[s, 2] * w
                T *= 1.0 - a
                stop = k
                if T < t_min:
                    break
            image[py, px, 0] = c0 + T * bg[0]
            image[py, px, 1] = c1 + T * bg[1]
            image[py, px, 2] = c2 + T * bg[2]
            final_t[py, px] = T
            last[py, px] = stop
    return image, final_t, last


@numba.njit(cache=True)
def _backward(offsets, lists, means, conics, opac, qcut, colors, bg, final_t, last, grad_img, width, height, tile, tiles_x, alpha_clamp):
    n = means.shape[0]
    g_means = np.zeros((n, 2))
    g_conics = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_colors = np.zeros((n, 3))
    for py in range(height):
        ty = py // tile
        for px in range(width):
            t_idx = ty * tiles_x + px // tile
            start = offsets[t_idx]
            g0 = grad_img[py, px, 0]
            g1 = grad_img[py, px, 1]
            g2 = grad_img[py, px, 2]
            if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                continue
            fx = px + 0.5
            fy = py + 0.5
            T = final_t[py, px]
            s0 = T * bg[0]
            s1 = T * bg[1]
            s2 = T * bg[2]
            for k in range(last[py, px], start - 1, -1):
                s = lists[k]
                dx = fx - means[s, 0]
                dy = fy - means[s, 1]
                q = conics[s, 0] * dx * dx + 2.0 * conics[s, 1] * dx * dy + conics[s, 2] * dy * dy
                if q > qcut[s]:
                    continue
                gauss = np.exp(-0.5 * q)
                a = opac[s] * gauss
                clamped = a > alpha_clamp
                if clamped:
                    a = alpha_clamp
                one_m = 1.0 - a
                T = T / one_m
                w = a * T
                g_colors[s, 0] += w * g0
                g_colors[s, 1] += w * g1
                g_colors[s, 2] += w * g2
                g_alpha = g0 * (colors[s, 0] * T - s0 / one_m)
                g_alpha += g1 * (colors[s, 1] * T - s1 / one_m)
                g_alpha += g2 * (colors[s, 2] * T - s2 / one_m)
                s0 += colors[s, 0] * w
                s1 += colors[s, 1] * w
                s2 += colors[s, 2] * w
                if clamped:
                    continue
                g_opac[s] += g_alpha * gauss
                g_q = -0.5 * a * g_alpha
                g_means[s, 0] -= g_q * (2.0 * conics[s, 0] * dx + 2.0 * conics[s, 1] * dy)
                g_means[s, 1] -= g_q * (2.0 * conics[s, 1] * dx + 2.0 * conics[s, 2] * dy)
                g_conics[s, 0] += g_q * dx * dx
                g_conics[s, 1] += g_q * 2.0 * dx * dy
                g_conics[s, 2] += g_q * dy * dy
    return g_means, g_conics, g_opac, g_colors


def _fingerprint(*arrays: np.ndarray) -> str:
    h = hashlib.blake2b(digest_size=16)
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


@dataclass
class RasterState:
    """Everything the adjoint needs, plus a fingerprint of the splats it was built from."""

    width: int
    height: int
    settings: RasterSettings
    means: np.ndarray
    cov: np.ndarray
    conics: np.ndarray
    opac: np.ndarray
    colors: np.ndarray
    qcut: np.ndarray
    background: np.ndarray
    offsets: np.ndarray
    lists: np.ndarray
    final_t: np.ndarray
    last: np.ndarray
    tiles_x: int
    valid: np.ndarray
    skipped: int
    version: str

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.final_t


def splat_support(cov: np.ndarray, opac: np.ndarray, alpha_cutoff: float) -> tuple[np.ndarray, np.ndarray]:
    """Mahalanobis^2 cutoff and axis-aligned half extents (pixels) of each splat."""
    with np.errstate(divide="ignore"):
        qcut = 2.0 * np.log(np.maximum(opac, 1e-300) / alpha_cutoff)
    qcut = np.where(opac > alpha_cutoff, qcut, -1.0)
    r = np.sqrt(np.maximum(qcut, 0.0))
    ext = np.stack([r * np.sqrt(np.maximum(cov[:, 0, 0], 0.0)), r * np.sqrt(np.maximum(cov[:, 1, 1], 0.0))], axis=1)
    return qcut, ext


def rasterize_forward(
    means2d: np.ndarray,
    cov2d: np.ndarray,
    colors: np.ndarray,
    opacities: np.ndarray,
    depths: np.ndarray,
    width: int,
    height: int,
    background=(0.0, 0.0, 0.0),
    settings: RasterSettings = RasterSettings(),
) -> tuple[np.ndarray, RasterState]:
    means = np.ascontiguousarray(means2d, dtype=np.float64).reshape(-1, 2)
    n = len(means)
    cov = np.asarray(cov2d, dtype=np.float64).reshape(n, 2, 2)
    colors = np.ascontiguousarray(colors, dtype=np.float64).reshape(n, 3)
    opac = np.ascontiguousarray(opacities, dtype=np.float64).reshape(n)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    a = cov[:, 0, 0]
    b = 0.5 * (cov[:, 0, 1] + cov[:, 1, 0])
    c = cov[:, 1, 1]
    det = a * c - b * b
    valid = (det > 1e-12) & (a > 0) & (c > 0) & np.all(np.isfinite(means), axis=1)
    safe_det = np.where(valid, det, 1.0)
    conics = np.ascontiguousarray(np.stack([c / safe_det, -b / safe_det, a / safe_det], axis=1))
    qcut, ext = splat_support(cov, opac, settings.alpha_cutoff)
    qcut = np.ascontiguousarray(np.where(valid, qcut, -1.0))
    keep = valid & (qcut >= 0)
    xmin = np.where(keep, means[:, 0] - ext[:, 0] - 0.5, 0.0)
    xmax = np.where(keep, means[:, 0] + ext[:, 0] - 0.5, 0.0)
    ymin = np.where(keep, means[:, 1] - ext[:, 1] - 0.5, 0.0)
    ymax = np.where(keep, means[:, 1] + ext[:, 1] - 0.5, 0.0)
    # splats whose support misses the viewport are not binned
    keep &= (xmax >= 0) & (xmin <= width - 1) & (ymax >= 0) & (ymin <= height - 1)
    idx = np.flatnonzero(keep)
    order = idx[np.argsort(np.asarray(depths, dtype=np.float64)[idx], kind="stable")].astype(np.int64)
    tile = settings.tile_size
    tiles_x = -(-width // tile)
    tiles_y = -(-height // tile)
    offsets, lists = _bin_splats(order, xmin, xmax, ymin, ymax, tiles_x, tiles_y, tile)
    image, final_t, last = _forward(
        offsets, lists, means, conics, opac, qcut, colors, bg, width, height, tile, tiles_x,
        settings.alpha_clamp, settings.min_transmittance,
    )
    state = RasterState(
        width, height, settings, means, cov, conics, opac, colors, qcut, bg, offsets, lists, final_t, last,
        tiles_x, valid, int(n - valid.sum()), _fingerprint(means, cov, colors, opac),
    )
    return image, state


def rasterize_backward(state: RasterState, grad_image: np.ndarray, splats=None) -> dict[str, np.ndarray]:
    """Adjoint of :func:`rasterize_forward`.

    ``splats``, when given as ``(means2d, cov2d, colors, opacities)``, must be
    the arrays the state was built from.
    """
    if splats is not None and _fingerprint(*(np.asarray(x, dtype=np.float64) for x in splats)) != state.version:
        raise RenderStateError("retained raster state does not match the supplied splats")
    grad_image = np.ascontiguousarray(grad_image, dtype=np.float64)
    if grad_image.shape != (state.height, state.width, 3):
        raise ValueError(f"gradient image has shape {grad_image.shape}, expected {(state.height, state.width, 3)}")
    g_means, g_conics, g_opac, g_colors = _backward(
        state.offsets, state.lists, state.means, state.conics, state.opac, state.qcut, state.colors,
        state.background, state.final_t, state.last, grad_image, state.width, state.height,
        state.settings.tile_size, state.tiles_x, state.settings.alpha_clamp,
    )
    # conic = cov^-1  =>  dL/dcov = -conic dL/dconic conic, with the symmetric split of the off-diagonal
    A = np.empty((len(g_conics), 2, 2))
    A[:, 0, 0] = state.conics[:, 0]
    A[:, 0, 1] = A[:, 1, 0] = state.conics[:, 1]
    A[:, 1, 1] = state.conics[:, 2]
    G = np.empty_like(A)
    G[:, 0, 0] = g_conics[:, 0]
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * g_conics[:, 1]
    G[:, 1, 1] = g_conics[:, 2]
    g_cov = -(A @ G @ A)
    g_cov[~state.valid] = 0.0
    return {"means2d": g_means, "cov2d": g_cov, "colors": g_colors, "opacities": g_opac}


def rasterize(
    means2d: Tensor,
    cov2d: Tensor,
    colors: Tensor,
    opacities: Tensor,
    depths: np.ndarray,
    width: int,
    height: int,
    background=(0.0, 0.0, 0.0),
    settings: RasterSettings = RasterSettings(),
) -> tuple[Tensor, RasterState]:
    """Tape-aware rasterisation: one recorded op whose adjoint is :func:`rasterize_backward`."""
    image, state = rasterize_forward(
        means2d.data, cov2d.data, colors.data, opacities.data, depths, width, height, background, settings
    )

    def vjp(g):
        grads = rasterize_backward(state, g)
        return grads["means2d"], grads["cov2d"], grads["colors"], grads["opacities"]

    out = make_op(image, (means2d, cov2d, colors, opacities), vjp, "rasterize")
    return out, state
