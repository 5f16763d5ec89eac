from .camera import Camera, CameraError
from .rasterizer import (
    RasterSettings,
    RasterState,
    RenderStateError,
    rasterize,
    rasterize_backward,
    rasterize_forward,
)
from .splat import BLUR_FLOOR, GaussianView, ProjectedSplats, RenderedImage, project_gaussians, render

__all__ = [
    "BLUR_FLOOR",
    "Camera",
    "CameraError",
    "GaussianView",
    "ProjectedSplats",
    "RasterSettings",
    "RasterState",
    "RenderStateError",
    "RenderedImage",
    "project_gaussians",
    "rasterize",
    "rasterize_backward",
    "rasterize_forward",
    "render",
]
