"""Skeleton-driven deformation of 3D Gaussian splats from sparse, posed observations."""

from .deformation import DeformationConfig, DeformationModel
from .gaussians import GaussianCloud, init_from_points
from .oracle import OracleSpec, generate_scene, make_dataset
from .render import Camera, RasterSettings, render
from .skeleton import JointPoseSample, SkeletonGraph, forward_kinematics, validate_skeleton
from .training import TrainConfig, evaluate, train_deformation

__all__ = [
    "Camera",
    "DeformationConfig",
    "DeformationModel",
    "GaussianCloud",
    "JointPoseSample",
    "OracleSpec",
    "RasterSettings",
    "SkeletonGraph",
    "TrainConfig",
    "evaluate",
    "forward_kinematics",
    "generate_scene",
    "init_from_points",
    "make_dataset",
    "render",
    "train_deformation",
    "validate_skeleton",
]

__version__ = "0.1.0"
