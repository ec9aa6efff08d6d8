"""splat4d: dynamic RGB-D SLAM on a differentiable CPU Gaussian rasterizer."""

from .config import Config, load_config, save_config
from .gaussians import GaussianPrimitive, GaussianSet, covariance_from_params
from .geometry import (CameraIntrinsics, PoseSE3, backproject_pixel, project_point,
                       se3_exp, se3_log)

__version__ = "0.1.0"

__all__ = [
    "Config", "load_config", "save_config",
    "GaussianPrimitive", "GaussianSet", "covariance_from_params",
    "CameraIntrinsics", "PoseSE3", "backproject_pixel", "project_point",
    "se3_exp", "se3_log",
    "__version__",
]
