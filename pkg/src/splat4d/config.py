"""Run configuration with loss weights, gates, and optimizer settings.

The config file format is flat ``key = value`` pairs grouped into INI
sections that mirror the field groups below.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path


@dataclass
class Config:
    # loss weights
    lambda_color: float = 0.9           # color vs depth balance in tracking/mapping
    lambda_flow: float = 3.0
    w1_arap: float = 1e-4
    w2_iso: float = 10.0

    # gates
    grad_gate_sigma: float = 0.01       # image-gradient threshold for the color term
    opacity_gate: float = 0.95          # rendered-opacity gate for the depth term

    # keyframing
    keyframe_max_gap: int = 5
    mask_iou_threshold: float = 0.8
    keyframe_visibility_threshold: float = 0.9
    keyframe_translation_threshold: float = 0.04
    window_capacity: int = 8
    eviction_overlap: float = 0.05
    sampling_overlap: float = 0.1

    # deformation field
    knn_k: int = 4
    control_point_count: int = 64
    deform_hidden: int = 64
    deform_pos_bands: int = 6
    deform_time_bands: int = 4
    learn_rbf_radii: bool = True

    # rasterizer
    cutoff_sigma: float = 3.0           # footprint truncation; <=0 disables
    cov2d_regularization: float = 0.3   # px^2 added to the projected covariance diagonal
    transmittance_min: float = 1e-4
    tile_size: int = 16

    # tracking (pose rates sized to cross degree/centimeter-scale offsets
    # within the iteration budget; keyframe refinement uses gentler ones)
    tracking_iters: int = 100
    tracking_convergence_eps: float = 1e-6
    tracking_patience: int = 5
    lr_pose_rot: float = 5e-3
    lr_pose_trans: float = 2e-3
    lr_exposure: float = 1e-2

    # mapping
    stage1_iters: int = 30
    stage2_iters: int = 60
    init_mapping_iters: int = 300   # first-keyframe bootstrap (new map from scratch)
    refine_iters: int = 1500
    refine_frames: int = 10
    densify_stride: int = 2
    densify_opacity: float = 0.5
    densify_depth_factor: float = 5.0
    densify_depth_floor: float = 0.05  # meters; keeps the relative gate off converged noise
    prune_opacity: float = 0.005
    prune_footprint_px: float = 0.1
    overlap_samples: int = 5
    global_samples: int = 2
    lr_means: float = 1.6e-4
    lr_rots: float = 1e-3
    lr_scales: float = 5e-3
    lr_opacities: float = 5e-2
    lr_colors: float = 2.5e-3
    lr_deform: float = 1e-4
    lr_control_points: float = 1e-4
    lr_kf_rot: float = 1e-3
    lr_kf_trans: float = 3e-4

    # dataset
    dynamic_init_frame: int = 0
    init_opacity: float = 0.5
    near_clip: float = 0.01
    mask_dilation_px: int = 2   # grow the dynamic region at load; the raw
                                # footprint leaves a mixed-color rim labeled static

    def __post_init__(self):
        for name in ("lambda_color", "lambda_flow", "w1_arap", "w2_iso"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.lambda_color <= 1.0:
            raise ValueError("lambda_color must be in [0, 1]")
        if self.knn_k < 1 or self.knn_k > self.control_point_count:
            raise ValueError("knn_k must be in [1, control_point_count]")


_SECTIONS = {
    "losses": ("lambda_color", "lambda_flow", "w1_arap", "w2_iso"),
    "gates": ("grad_gate_sigma", "opacity_gate"),
    "keyframes": ("keyframe_max_gap", "mask_iou_threshold", "keyframe_visibility_threshold",
                  "keyframe_translation_threshold", "window_capacity", "eviction_overlap",
                  "sampling_overlap"),
    "deform": ("knn_k", "control_point_count", "deform_hidden", "deform_pos_bands",
               "deform_time_bands", "learn_rbf_radii"),
    "rasterizer": ("cutoff_sigma", "cov2d_regularization", "transmittance_min", "tile_size"),
    "tracking": ("tracking_iters", "tracking_convergence_eps", "tracking_patience",
                 "lr_pose_rot", "lr_pose_trans", "lr_exposure"),
    "mapping": ("stage1_iters", "stage2_iters", "init_mapping_iters", "refine_iters", "refine_frames",
                "densify_stride", "densify_opacity", "densify_depth_factor", "densify_depth_floor",
                "prune_opacity", "prune_footprint_px", "overlap_samples", "global_samples",
                "lr_means", "lr_rots", "lr_scales", "lr_opacities", "lr_colors",
                "lr_deform", "lr_control_points", "lr_kf_rot", "lr_kf_trans"),
    "dataset": ("dynamic_init_frame", "init_opacity", "near_clip", "mask_dilation_px"),
}


def save_config(cfg: Config, path) -> None:
    parser = configparser.ConfigParser()
    for section, names in _SECTIONS.items():
        parser[section] = {name: repr(getattr(cfg, name)) for name in names}
    with open(path, "w") as fh:
        parser.write(fh)


def load_config(path) -> Config:
    """Load a config file; missing keys keep their defaults."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.read(path)
    fields = {f.name: f for f in dataclasses.fields(Config)}
    kwargs = {}
    for section in parser.sections():
        for key, raw in parser[section].items():
            if key not in fields:
                raise ValueError(f"unknown config key '{key}' in [{section}]")
            ftype = fields[key].type
            if ftype in ("bool", bool):
                kwargs[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif ftype in ("int", int):
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
    return Config(**kwargs)
