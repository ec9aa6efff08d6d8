"""Frame-to-map camera tracking against the static Gaussians only.

The pose is optimized on the SE(3) manifold: each Adam step produces a
small twist that is retracted onto the current pose (left multiplication),
with optimizer moments carried across steps. Exposure (gain + offset) is
estimated jointly. Dynamic Gaussians never enter this module; callers pass
the static subset.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .config import Config
from .gaussians import GaussianSet
from .geometry import CameraIntrinsics, PoseSE3, se3_exp
from .optim import ParamGroup, adam_step
from .render import RenderOutput, apply_exposure, apply_exposure_backward, composite_backward, render_set

DIVERGENCE_FACTOR = 10.0

_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64) / 8.0


class UntrackableFrameError(RuntimeError):
    """Raised when the motion mask leaves no usable static pixels."""


@dataclass
class Exposure:
    log_gain: float = 0.0
    offset: float = 0.0

    def copy(self) -> "Exposure":
        return Exposure(self.log_gain, self.offset)


@dataclass
class TrackResult:
    pose: PoseSE3
    exposure: Exposure
    final_loss: float
    iterations_used: int
    converged: bool


def gradient_gate_mask(color_gt: np.ndarray, sigma: float) -> np.ndarray:
    """True where the Sobel gradient magnitude of the grayscale image
    exceeds sigma (kernels normalized so a unit step edge responds 0.5)."""
    gray = np.asarray(color_gt, dtype=np.float64)
    if gray.ndim == 3:
        gray = gray.mean(axis=2)
    gx = ndimage.correlate(gray, _SOBEL_X, mode="reflect")
    gy = ndimage.correlate(gray, _SOBEL_X.T, mode="reflect")
    return np.hypot(gx, gy) > sigma


def tracking_loss(render: RenderOutput, color_gt: np.ndarray, depth_gt: np.ndarray,
                  static_mask: np.ndarray, gate: np.ndarray, exposure: Exposure,
                  cfg: Config, depth_mask=None, color_mask=None):
    """Masked, opacity-weighted photometric + gated geometric objective.

    The color term is weighted per pixel by rendered opacity and restricted
    to static pixels passing the image-gradient gate; the depth term is
    restricted to static pixels where rendered opacity exceeds the gate and
    ground-truth depth is valid. ``depth_mask``/``color_mask`` pin the
    discrete masks (used by FD oracles).

    Returns (value, parts) with adjoints for color (pre-exposure), depth,
    opacity, and the exposure parameters.
    """
    static_mask = np.asarray(static_mask, dtype=bool)
    if not static_mask.any():
        raise UntrackableFrameError("motion mask labels every pixel dynamic")
    if color_mask is None:
        color_mask = static_mask & gate
    if depth_mask is None:
        depth_mask = static_mask & (render.opacity > cfg.opacity_gate) & (depth_gt > 0)

    lam = cfg.lambda_color
    corrected, exp_cache = apply_exposure(render.color, exposure.log_gain, exposure.offset)
    resid = corrected - color_gt
    l1_map = np.abs(resid).mean(axis=2)

    n_c = int(color_mask.sum())
    n_d = int(depth_mask.sum())
    opacity = render.opacity
    color_term = float(np.sum(opacity[color_mask] * l1_map[color_mask]) / n_c) if n_c else 0.0
    depth_term = (float(np.sum(np.abs(render.depth - depth_gt)[depth_mask]) / n_d)
                  if n_d else 0.0)
    value = lam * color_term + (1.0 - lam) * depth_term

    g_corrected = np.zeros_like(corrected)
    g_opacity = np.zeros_like(opacity)
    g_depth = np.zeros_like(opacity)
    if n_c:
        scale = lam / (3.0 * n_c)
        g_corrected[color_mask] = scale * np.sign(resid[color_mask]) * opacity[color_mask][:, None]
        g_opacity[color_mask] = lam * l1_map[color_mask] / n_c
    if n_d:
        g_depth[depth_mask] = (1.0 - lam) * np.sign((render.depth - depth_gt)[depth_mask]) / n_d
    g_color, d_gain, d_offset = apply_exposure_backward(exp_cache, g_corrected)
    parts = {"g_color": g_color, "g_depth": g_depth, "g_opacity": g_opacity,
             "d_log_gain": d_gain, "d_offset": d_offset,
             "color_term": color_term, "depth_term": depth_term}
    return value, parts


def constant_velocity_extrapolate(prev: PoseSE3, prev2: PoseSE3 | None) -> PoseSE3:
    """Next-pose guess assuming the last inter-frame motion repeats."""
    if prev2 is None:
        return prev
    delta = prev.compose(prev2.inverse())
    return delta.compose(prev)


def track_frame(static_map: GaussianSet, color_gt, depth_gt, static_mask,
                init_pose: PoseSE3, cam: CameraIntrinsics, cfg: Config,
                init_exposure: Exposure | None = None) -> TrackResult:
    """Estimate this frame's pose and exposure by photometric alignment."""
    if len(static_map) == 0:
        raise ValueError("cannot track against an empty map")
    gate = gradient_gate_mask(color_gt, cfg.grad_gate_sigma)
    pose = init_pose
    exposure = (init_exposure or Exposure()).copy()
    g_trans = ParamGroup("pose_trans", np.zeros(3), cfg.lr_pose_trans)
    g_rot = ParamGroup("pose_rot", np.zeros(3), cfg.lr_pose_rot)
    g_exp = ParamGroup("exposure", np.array([exposure.log_gain, exposure.offset]),
                       cfg.lr_exposure)

    initial_loss = None
    prev_loss = None
    flat_steps = 0
    loss = float("inf")
    iters = 0
    for iters in range(1, cfg.tracking_iters + 1):
        out = render_set(static_map, pose, cam, cfg)
        loss, parts = tracking_loss(out, color_gt, depth_gt, static_mask, gate,
                                    exposure, cfg)
        if initial_loss is None:
            initial_loss = loss
        if not np.isfinite(loss) or loss > DIVERGENCE_FACTOR * max(initial_loss, 1e-12):
            return TrackResult(init_pose, (init_exposure or Exposure()).copy(),
                               loss, iters, False)
        if prev_loss is not None:
            flat_steps = flat_steps + 1 if prev_loss - loss < cfg.tracking_convergence_eps else 0
            if flat_steps >= cfg.tracking_patience:
                return TrackResult(pose, exposure, loss, iters, True)
        prev_loss = loss

        grads = composite_backward(out, cfg, g_color=parts["g_color"],
                                   g_depth=parts["g_depth"],
                                   g_opacity=parts["g_opacity"])
        g_trans.params[:] = 0.0
        g_rot.params[:] = 0.0
        adam_step(g_trans, grads.pose_twist[:3])
        adam_step(g_rot, grads.pose_twist[3:])
        pose = se3_exp(np.concatenate([g_trans.params, g_rot.params])).compose(pose)
        adam_step(g_exp, np.array([parts["d_log_gain"], parts["d_offset"]]))
        exposure.log_gain = float(g_exp.params[0])
        exposure.offset = float(g_exp.params[1])
    return TrackResult(pose, exposure, loss, iters, False)


def format_trajectory_line(timestamp: float, pose: PoseSE3) -> str:
    """TUM trajectory line (camera-to-world): ts tx ty tz qx qy qz qw."""
    inv = pose.inverse()
    t = inv.translation
    w, x, y, z = inv.rotation
    vals = [timestamp, t[0], t[1], t[2], x, y, z, w]
    return " ".join(f"{v:.9f}" for v in vals)


def append_trajectory(path, timestamp: float, pose: PoseSE3) -> None:
    with open(path, "a") as fh:
        fh.write(format_trajectory_line(timestamp, pose) + "\n")
