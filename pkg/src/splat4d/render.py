"""Differentiable CPU rasterizer for 3D Gaussians.

Forward: perspective-project each Gaussian, approximate its screen-space
covariance with the affine (EWA) Jacobian, then alpha-composite color,
depth, opacity and per-Gaussian 2D displacement ("flow") front-to-back.

Backward: the compositing kernels return adjoints w.r.t. the projected
quantities; this module chains them analytically to every Gaussian
parameter and to a left-multiplied camera-pose twist. No autodiff anywhere;
tests compare everything against central finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .config import Config
from .gaussians import GaussianSet
from .geometry import CameraIntrinsics, PoseSE3, quats_to_rotmats, quats_to_rotmats_backward

from . import kernels

ALPHA_MAX = 1.0 - 1e-7  # keeps transmittance positive without visibly biasing opaque splats
TOUCH_ALPHA = 0.01


@dataclass
class ProjectedGaussian:
    """One Gaussian after EWA projection (diagnostic / single-splat view)."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    base_opacity: float
    color: np.ndarray
    flow_dx: np.ndarray | None = None
    source_index: int = 0


@dataclass
class Projection:
    """Batch of visible Gaussians, depth-sorted, with backward caches."""

    order: np.ndarray            # indices into the input set, front-to-back
    n_input: int
    mean2d: np.ndarray           # (M,2)
    cov2d: np.ndarray            # (M,2,2), regularized
    conic: np.ndarray            # (M,3) packed inverse covariance
    depth: np.ndarray            # (M,)
    alpha_base: np.ndarray       # (M,)
    color: np.ndarray            # (M,3), clamped to [0,1]
    flow: np.ndarray             # (M,2)
    rect: np.ndarray             # (M,4) inclusive pixel bounds
    # caches for the backward chain
    p_cam: np.ndarray
    jac: np.ndarray              # (M,2,3) perspective Jacobian
    cov_cam: np.ndarray          # (M,3,3) camera-frame 3D covariance
    rotmats: np.ndarray          # (M,3,3) Gaussian orientation
    pose_rot: np.ndarray         # (3,3) world-to-camera rotation
    in_rots: np.ndarray          # raw quaternions of the visible Gaussians
    in_log_scales: np.ndarray
    in_logits: np.ndarray
    color_open: np.ndarray       # 1 where the [0,1] color clamp is inactive

    def __len__(self) -> int:
        return self.mean2d.shape[0]


@dataclass
class RenderOutput:
    """Per-pixel channels plus the cache needed to run the backward pass."""

    color: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    flow: np.ndarray | None = None
    touched: np.ndarray | None = None     # per-input-Gaussian bool
    projection: Projection | None = None
    cam: CameraIntrinsics | None = None


def _rect_from_footprint(mean2d, cov2d, cam, cutoff_sigma):
    """Inclusive pixel bounds of the truncated footprint; full image if cutoff<=0."""
    m = mean2d.shape[0]
    if cutoff_sigma is None or cutoff_sigma <= 0:
        rect = np.zeros((m, 4), dtype=np.int64)
        rect[:, 2] = cam.width - 1
        rect[:, 3] = cam.height - 1
        return rect
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    lam_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b ** 2)
    r = cutoff_sigma * np.sqrt(lam_max)
    rect = np.empty((m, 4), dtype=np.int64)
    rect[:, 0] = np.maximum(np.ceil(mean2d[:, 0] - r), 0).astype(np.int64)
    rect[:, 1] = np.maximum(np.ceil(mean2d[:, 1] - r), 0).astype(np.int64)
    rect[:, 2] = np.minimum(np.floor(mean2d[:, 0] + r), cam.width - 1).astype(np.int64)
    rect[:, 3] = np.minimum(np.floor(mean2d[:, 1] + r), cam.height - 1).astype(np.int64)
    return rect


def project_gaussians(means, rots, log_scales, opacity_logits, colors,
                      pose: PoseSE3, cam: CameraIntrinsics, cfg: Config,
                      flow_dx: np.ndarray | None = None) -> Projection:
    """EWA-project a batch; culls behind-near-plane and off-screen footprints."""
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    n = means.shape[0]
    rots = np.asarray(rots, dtype=np.float64).reshape(n, 4)
    log_scales = np.asarray(log_scales, dtype=np.float64).reshape(n, 3)
    opacity_logits = np.asarray(opacity_logits, dtype=np.float64).reshape(n)
    colors = np.asarray(colors, dtype=np.float64).reshape(n, 3)
    flow_dx = np.zeros((n, 2)) if flow_dx is None else np.asarray(flow_dx, dtype=np.float64).reshape(n, 2)

    r_cw = pose.rotation_matrix()
    p_cam = means @ r_cw.T + pose.translation
    front = p_cam[:, 2] > cam.near_clip
    idx = np.nonzero(front)[0]

    p = p_cam[idx]
    z = p[:, 2]
    u = cam.fx * p[:, 0] / z + cam.cx
    v = cam.fy * p[:, 1] / z + cam.cy
    mean2d = np.stack([u, v], axis=1)

    jac = np.zeros((idx.size, 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * p[:, 0] / z ** 2
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * p[:, 1] / z ** 2

    rotmats = quats_to_rotmats(rots[idx])
    scale2 = np.exp(2.0 * log_scales[idx])
    cov_world = np.einsum("nij,nj,nkj->nik", rotmats, scale2, rotmats)
    cov_cam = np.einsum("ij,njk,lk->nil", r_cw, cov_world, r_cw)
    cov2d = np.einsum("nij,njk,nlk->nil", jac, cov_cam, jac)
    cov2d[:, 0, 0] += cfg.cov2d_regularization
    cov2d[:, 1, 1] += cfg.cov2d_regularization

    rect = _rect_from_footprint(mean2d, cov2d, cam, cfg.cutoff_sigma)
    on_screen = (rect[:, 0] <= rect[:, 2]) & (rect[:, 1] <= rect[:, 3])
    keep = np.nonzero(on_screen)[0]

    idx = idx[keep]
    mean2d = mean2d[keep]
    cov2d = cov2d[keep]
    rect = rect[keep]
    p = p[keep]
    jac = jac[keep]
    cov_cam = cov_cam[keep]
    rotmats = rotmats[keep]
    z = z[keep]

    # front-to-back by camera depth, ties by input index for determinism
    order_local = np.lexsort((idx, z))
    idx = idx[order_local]
    mean2d = mean2d[order_local]
    cov2d = cov2d[order_local]
    rect = rect[order_local]
    p = p[order_local]
    jac = jac[order_local]
    cov_cam = cov_cam[order_local]
    rotmats = rotmats[order_local]
    z = z[order_local]

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack([cov2d[:, 1, 1] / det,
                      -cov2d[:, 0, 1] / det,
                      cov2d[:, 0, 0] / det], axis=1)

    colors_vis = colors[idx]
    color_open = ((colors_vis > 0.0) & (colors_vis < 1.0)).astype(np.float64)
    return Projection(
        order=idx, n_input=n, mean2d=mean2d, cov2d=cov2d, conic=conic,
        depth=z.copy(), alpha_base=1.0 / (1.0 + np.exp(-opacity_logits[idx])),
        color=np.clip(colors_vis, 0.0, 1.0), flow=flow_dx[idx], rect=rect,
        p_cam=p, jac=jac, cov_cam=cov_cam, rotmats=rotmats, pose_rot=r_cw,
        in_rots=rots[idx], in_log_scales=log_scales[idx],
        in_logits=opacity_logits[idx], color_open=color_open,
    )


def project_gaussian_ewa(g, pose: PoseSE3, cam: CameraIntrinsics, cfg: Config,
                         flow_dx=None) -> ProjectedGaussian | None:
    """Single-Gaussian projection; None when culled."""
    proj = project_gaussians(g.mean[None], g.rot[None], g.log_scale[None],
                             np.array([g.opacity_logit]), g.color[None],
                             pose, cam, cfg,
                             None if flow_dx is None else np.asarray(flow_dx)[None])
    if len(proj) == 0:
        return None
    return ProjectedGaussian(mean2d=proj.mean2d[0], cov2d=proj.cov2d[0],
                             depth=float(proj.depth[0]),
                             base_opacity=float(proj.alpha_base[0]),
                             color=proj.color[0],
                             flow_dx=proj.flow[0] if flow_dx is not None else None,
                             source_index=0)


def _projection_from_list(projected, cam: CameraIntrinsics, cfg: Config) -> Projection:
    """Build a Projection batch from explicit ProjectedGaussian values."""
    m = len(projected)
    mean2d = np.array([p.mean2d for p in projected], dtype=np.float64).reshape(m, 2)
    cov2d = np.array([p.cov2d for p in projected], dtype=np.float64).reshape(m, 2, 2)
    depth = np.array([p.depth for p in projected], dtype=np.float64)
    alpha = np.array([p.base_opacity for p in projected], dtype=np.float64)
    color = np.array([p.color for p in projected], dtype=np.float64).reshape(m, 3)
    flow = np.array([np.zeros(2) if p.flow_dx is None else p.flow_dx for p in projected],
                    dtype=np.float64).reshape(m, 2)
    src = np.array([p.source_index for p in projected], dtype=np.int64)
    order = np.lexsort((src, depth))
    mean2d, cov2d, depth, alpha, color, flow = (
        mean2d[order], cov2d[order], depth[order], alpha[order], color[order], flow[order])
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    rect = _rect_from_footprint(mean2d, cov2d, cam, cfg.cutoff_sigma)
    ok = (rect[:, 0] <= rect[:, 2]) & (rect[:, 1] <= rect[:, 3])
    dummy = np.zeros((m, 3, 3))
    proj = Projection(order=src[order], n_input=m, mean2d=mean2d, cov2d=cov2d,
                      conic=conic, depth=depth, alpha_base=alpha,
                      color=np.clip(color, 0.0, 1.0), flow=flow, rect=rect,
                      p_cam=np.zeros((m, 3)), jac=np.zeros((m, 2, 3)),
                      cov_cam=dummy, rotmats=dummy, pose_rot=np.eye(3),
                      in_rots=np.zeros((m, 4)), in_log_scales=np.zeros((m, 3)),
                      in_logits=np.zeros(m), color_open=np.ones((m, 3)))
    if not ok.all():
        keep = np.nonzero(ok)[0]
        for name in ("order", "mean2d", "cov2d", "conic", "depth", "alpha_base",
                     "color", "flow", "rect", "p_cam", "jac", "cov_cam", "rotmats",
                     "in_rots", "in_log_scales", "in_logits", "color_open"):
            setattr(proj, name, getattr(proj, name)[keep])
    return proj


def composite(projected, cam: CameraIntrinsics, cfg: Config,
              want_flow: bool = True) -> RenderOutput:
    """Alpha-composite projected Gaussians into per-pixel channels.

    Accepts a Projection batch or a list of ProjectedGaussian. Empty input
    renders background: color 0, depth 0, opacity 0, flow 0.
    """
    proj = projected if isinstance(projected, Projection) else _projection_from_list(projected, cam, cfg)
    backend = kernels.get_backend()
    offsets, cand, _, _ = kernels.build_tile_lists(proj.rect, cam.height, cam.width, cfg.tile_size)
    color_img, depth_img, trans_img, flow_img, touched_vis = backend.forward(
        proj.mean2d, proj.conic, proj.alpha_base, proj.color, proj.depth, proj.flow,
        proj.rect, offsets, cand, cam.height, cam.width, cfg.tile_size,
        cfg.transmittance_min, ALPHA_MAX)
    touched = np.zeros(proj.n_input, dtype=bool)
    touched[proj.order] = touched_vis
    return RenderOutput(color=color_img, depth=depth_img, opacity=1.0 - trans_img,
                        flow=flow_img if want_flow else None,
                        touched=touched, projection=proj, cam=cam)


def render_set(gs: GaussianSet, pose: PoseSE3, cam: CameraIntrinsics, cfg: Config,
               flow_dx: np.ndarray | None = None, means=None, rots=None) -> RenderOutput:
    """Project and composite a GaussianSet; means/rots may be overridden
    (used for rendering a deformed configuration)."""
    proj = project_gaussians(gs.means if means is None else means,
                             gs.rots if rots is None else rots,
                             gs.log_scales, gs.opacity_logits, gs.colors,
                             pose, cam, cfg, flow_dx)
    return composite(proj, cam, cfg)


@dataclass
class RenderGrads:
    """Gradients per parameter group; arrays aligned with the input set."""

    means: np.ndarray
    rots: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    flow_dx: np.ndarray
    pose_twist: np.ndarray       # (6,) = (d_translation, d_rotation)
    # adjoints of the projected quantities, kept for chained consumers
    d_mean2d_vis: np.ndarray = field(default=None, repr=False)
    d_depth_vis: np.ndarray = field(default=None, repr=False)


def _zero_grads(n: int) -> RenderGrads:
    return RenderGrads(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)),
                       np.zeros(n), np.zeros((n, 3)), np.zeros((n, 2)), np.zeros(6))


def composite_backward(out: RenderOutput, cfg: Config,
                       g_color=None, g_depth=None, g_opacity=None, g_flow=None) -> RenderGrads:
    """Chain per-pixel channel adjoints to all Gaussian parameters and pose.

    Gradients of culled Gaussians are exactly zero.
    """
    proj = out.projection
    cam = out.cam
    h, w = out.depth.shape
    if g_color is None:
        g_color = np.zeros((h, w, 3))
    if g_depth is None:
        g_depth = np.zeros((h, w))
    if g_opacity is None:
        g_opacity = np.zeros((h, w))
    if g_flow is None:
        g_flow = np.zeros((h, w, 2))
    if len(proj) == 0:
        return _zero_grads(proj.n_input)

    backend = kernels.get_backend()
    offsets, cand, _, _ = kernels.build_tile_lists(proj.rect, h, w, cfg.tile_size)
    d_mean2d, d_conic, d_alpha, d_color, d_depth, d_flow = backend.backward(
        proj.mean2d, proj.conic, proj.alpha_base, proj.color, proj.depth, proj.flow,
        proj.rect, offsets, cand, h, w, cfg.tile_size,
        cfg.transmittance_min, ALPHA_MAX,
        np.ascontiguousarray(g_color, dtype=np.float64),
        np.ascontiguousarray(g_depth, dtype=np.float64),
        np.ascontiguousarray(g_opacity, dtype=np.float64),
        np.ascontiguousarray(g_flow, dtype=np.float64))

    m = len(proj)
    # conic -> 2D covariance: dC = -A G A with the packed off-diagonal halved
    ga = np.empty((m, 2, 2))
    ga[:, 0, 0] = d_conic[:, 0]
    ga[:, 0, 1] = 0.5 * d_conic[:, 1]
    ga[:, 1, 0] = 0.5 * d_conic[:, 1]
    ga[:, 1, 1] = d_conic[:, 2]
    conic_full = np.empty((m, 2, 2))
    conic_full[:, 0, 0] = proj.conic[:, 0]
    conic_full[:, 0, 1] = proj.conic[:, 1]
    conic_full[:, 1, 0] = proj.conic[:, 1]
    conic_full[:, 1, 1] = proj.conic[:, 2]
    d_cov2d = -np.einsum("nij,njk,nkl->nil", conic_full, ga, conic_full)

    # 2D covariance -> camera covariance and perspective Jacobian
    d_cov_cam = np.einsum("nji,njk,nkl->nil", proj.jac, d_cov2d, proj.jac)
    d_jac = 2.0 * np.einsum("nij,njk,nkl->nil", d_cov2d, proj.jac, proj.cov_cam)

    # camera covariance -> world covariance (+ pose-rotation twist term)
    r_cw = proj.pose_rot
    d_cov_world = np.einsum("ji,njk,kl->nil", r_cw, d_cov_cam, r_cw)
    commut = (np.einsum("nij,njk->nik", d_cov_cam, proj.cov_cam)
              - np.einsum("nij,njk->nik", proj.cov_cam, d_cov_cam))
    d_omega_cov = np.stack([
        commut[:, 2, 1] - commut[:, 1, 2],
        commut[:, 0, 2] - commut[:, 2, 0],
        commut[:, 1, 0] - commut[:, 0, 1],
    ], axis=1)

    # world covariance -> orientation and log-scales
    scale2 = np.exp(2.0 * proj.in_log_scales)
    d_rotmat = 2.0 * np.einsum("nij,njk,nk->nik", d_cov_world, proj.rotmats, scale2)
    mtm = np.einsum("nji,njk,nkl->nil", proj.rotmats, d_cov_world, proj.rotmats)
    d_log_scales_vis = 2.0 * scale2 * np.einsum("nii->ni", mtm)
    d_rots_vis = quats_to_rotmats_backward(proj.in_rots, d_rotmat)

    # projected mean / depth / Jacobian -> camera-frame point
    d_p_cam = np.einsum("nji,nj->ni", proj.jac, d_mean2d)
    d_p_cam[:, 2] += d_depth
    x, y, z = proj.p_cam[:, 0], proj.p_cam[:, 1], proj.p_cam[:, 2]
    fx, fy = cam.fx, cam.fy
    d_p_cam[:, 0] += d_jac[:, 0, 2] * (-fx / z ** 2)
    d_p_cam[:, 1] += d_jac[:, 1, 2] * (-fy / z ** 2)
    d_p_cam[:, 2] += (d_jac[:, 0, 0] * (-fx / z ** 2) + d_jac[:, 1, 1] * (-fy / z ** 2)
                      + d_jac[:, 0, 2] * (2 * fx * x / z ** 3)
                      + d_jac[:, 1, 2] * (2 * fy * y / z ** 3))

    d_means_vis = d_p_cam @ r_cw
    d_rho = d_p_cam.sum(axis=0)
    d_omega = np.cross(proj.p_cam, d_p_cam).sum(axis=0) + d_omega_cov.sum(axis=0)

    sig = proj.alpha_base
    d_logits_vis = d_alpha * sig * (1.0 - sig)
    d_colors_vis = d_color * proj.color_open

    grads = _zero_grads(proj.n_input)
    grads.means[proj.order] = d_means_vis
    grads.rots[proj.order] = d_rots_vis
    grads.log_scales[proj.order] = d_log_scales_vis
    grads.opacity_logits[proj.order] = d_logits_vis
    grads.colors[proj.order] = d_colors_vis
    grads.flow_dx[proj.order] = d_flow
    grads.pose_twist = np.concatenate([d_rho, d_omega])
    grads.d_mean2d_vis = d_mean2d
    grads.d_depth_vis = d_depth
    return grads


# ---------------------------------------------------------------------------
# exposure
# ---------------------------------------------------------------------------

def apply_exposure(color_img: np.ndarray, log_gain: float, offset: float):
    """color' = exp(log_gain) * color + offset, clamped to [0,1] for losses."""
    gain = np.exp(log_gain)
    raw = gain * color_img + offset
    corrected = np.clip(raw, 0.0, 1.0)
    open_mask = ((raw > 0.0) & (raw < 1.0)).astype(np.float64)
    return corrected, (color_img, gain, open_mask)


def apply_exposure_backward(cache, g_corrected: np.ndarray):
    color_img, gain, open_mask = cache
    g_open = g_corrected * open_mask
    d_color = g_open * gain
    d_log_gain = float(np.sum(g_open * gain * color_img))
    d_offset = float(np.sum(g_open))
    return d_color, d_log_gain, d_offset


# ---------------------------------------------------------------------------
# optical-flow map rendering
# ---------------------------------------------------------------------------

def _project_uv(points, pose, cam):
    p = pose.apply(points)
    z = np.maximum(p[:, 2], cam.near_clip)
    valid = p[:, 2] > cam.near_clip
    uv = np.stack([cam.fx * p[:, 0] / z + cam.cx, cam.fy * p[:, 1] / z + cam.cy], axis=1)
    return uv, p, valid


def _uv_backward(d_uv, p_cam, pose, cam, valid):
    """Chain d(uv) to world points and the pose twist of the projecting camera."""
    z = p_cam[:, 2]
    d_p = np.zeros_like(p_cam)
    live = valid.astype(np.float64)
    d_p[:, 0] = d_uv[:, 0] * cam.fx / z * live
    d_p[:, 1] = d_uv[:, 1] * cam.fy / z * live
    d_p[:, 2] = (-(d_uv[:, 0] * cam.fx * p_cam[:, 0] + d_uv[:, 1] * cam.fy * p_cam[:, 1])
                 / z ** 2) * live
    d_points = d_p @ pose.rotation_matrix()
    d_twist = np.concatenate([d_p.sum(axis=0), np.cross(p_cam, d_p).sum(axis=0)])
    return d_points, d_twist


@dataclass
class FlowRenderCache:
    out: RenderOutput
    uv_cur: np.ndarray
    uv_prev: np.ndarray
    p_cam_cur: np.ndarray
    p_cam_prev: np.ndarray
    valid: np.ndarray
    pose: PoseSE3


def render_flow_map(means_src, rots_src, means_other, dyn: GaussianSet,
                    pose: PoseSE3, cam: CameraIntrinsics, cfg: Config,
                    src_is_current: bool):
    """Composite per-Gaussian projected displacement on one camera.

    The displacement is always current-minus-previous; ``src_is_current``
    says which deformed configuration supplies footprints and opacities.
    """
    if src_is_current:
        means_cur, means_prev = means_src, means_other
    else:
        means_cur, means_prev = means_other, means_src
    uv_cur, p_cam_cur, valid_cur = _project_uv(means_cur, pose, cam)
    uv_prev, p_cam_prev, valid_prev = _project_uv(means_prev, pose, cam)
    valid = valid_cur & valid_prev
    dx = np.where(valid[:, None], uv_cur - uv_prev, 0.0)
    out = render_set(dyn, pose, cam, cfg, flow_dx=dx, means=means_src, rots=rots_src)
    cache = FlowRenderCache(out=out, uv_cur=uv_cur, uv_prev=uv_prev,
                            p_cam_cur=p_cam_cur, p_cam_prev=p_cam_prev,
                            valid=valid, pose=pose)
    return out.flow, cache


def render_flow_map_backward(cache: FlowRenderCache, cfg: Config, g_flow: np.ndarray,
                             src_is_current: bool):
    """Adjoints of one flow map w.r.t. both deformed configurations and pose."""
    cam = cache.out.cam
    grads = composite_backward(cache.out, cfg, g_flow=g_flow)
    d_dx = grads.flow_dx
    d_uv_cur = d_dx * cache.valid[:, None]
    d_uv_prev = -d_dx * cache.valid[:, None]
    d_means_cur, d_twist_cur = _uv_backward(d_uv_cur, cache.p_cam_cur, cache.pose, cam, cache.valid)
    d_means_prev, d_twist_prev = _uv_backward(d_uv_prev, cache.p_cam_prev, cache.pose, cam, cache.valid)
    if src_is_current:
        d_means_cur = d_means_cur + grads.means
        d_rots_cur = grads.rots
        d_rots_prev = np.zeros_like(grads.rots)
    else:
        d_means_prev = d_means_prev + grads.means
        d_rots_prev = grads.rots
        d_rots_cur = np.zeros_like(grads.rots)
    d_twist = grads.pose_twist + d_twist_cur + d_twist_prev
    return {
        "means_cur": d_means_cur, "rots_cur": d_rots_cur,
        "means_prev": d_means_prev, "rots_prev": d_rots_prev,
        "log_scales": grads.log_scales, "opacity_logits": grads.opacity_logits,
        "pose_twist": d_twist,
    }


def render_flow_pair(dyn: GaussianSet, deform, t_prev: float, t_cur: float,
                     pose_prev: PoseSE3, pose_cur: PoseSE3,
                     cam: CameraIntrinsics, cfg: Config):
    """Forward (prev camera/config) and backward (current camera/config) flow
    maps of the dynamic set between two times.

    Both maps composite current-minus-previous projected displacement; an
    empty dynamic set yields zero maps.
    """
    if len(dyn) == 0:
        zeros = np.zeros((cam.height, cam.width, 2))
        return zeros, zeros.copy(), None
    means_prev, rots_prev, cache_prev = deform.deform(dyn, t_prev)
    means_cur, rots_cur, cache_cur = deform.deform(dyn, t_cur)
    bwd_flow, bwd_cache = render_flow_map(means_cur, rots_cur, means_prev, dyn,
                                          pose_cur, cam, cfg, src_is_current=True)
    fwd_flow, fwd_cache = render_flow_map(means_prev, rots_prev, means_cur, dyn,
                                          pose_prev, cam, cfg, src_is_current=False)
    caches = {"bwd": bwd_cache, "fwd": fwd_cache,
              "deform_prev": cache_prev, "deform_cur": cache_cur}
    return fwd_flow, bwd_flow, caches


# ---------------------------------------------------------------------------
# debug dumps
# ---------------------------------------------------------------------------

def dump_channels(out: RenderOutput, directory, prefix: str = "render") -> None:
    """Write color/depth/opacity PNGs (and .flo flow) for inspection."""
    from pathlib import Path
    from .dataset import write_flo

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rgb = (np.clip(out.color, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(rgb).save(directory / f"{prefix}_color.png")
    d = out.depth
    dmax = d.max() if d.max() > 0 else 1.0
    Image.fromarray((np.clip(d / dmax, 0, 1) * 65535).astype(np.uint16)).save(
        directory / f"{prefix}_depth.png")
    Image.fromarray((np.clip(out.opacity, 0, 1) * 255).astype(np.uint8)).save(
        directory / f"{prefix}_opacity.png")
    if out.flow is not None:
        write_flo(directory / f"{prefix}_flow.flo", out.flow)
