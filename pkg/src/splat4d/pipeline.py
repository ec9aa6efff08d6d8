"""End-to-end SLAM loop: initialize, track, keyframe, map, refine, report."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .dataset import SequenceSource, atomic_write_text
from .deform import ControlPointSet, DeformNet, DeformationField, init_control_points
from .gaussians import GaussianSet
from .geometry import CameraIntrinsics, PoseSE3, backproject_pixels
from .mapping import Mapper, should_insert_keyframe
from .metrics import ate_rmse, psnr, ssim
from .render import apply_exposure
from .tracking import (Exposure, constant_velocity_extrapolate, format_trajectory_line,
                       track_frame)


@dataclass
class FrameRecord:
    frame_id: int
    timestamp: float
    pose: PoseSE3
    exposure: Exposure
    tracked_loss: float = 0.0
    converged: bool = True
    is_keyframe: bool = False


@dataclass
class SlamResult:
    records: list
    mapper: Mapper
    cfg: Config
    cam: CameraIntrinsics
    n_frames: int
    runtime_s: float = 0.0
    flow_loss_initial: float = 0.0
    flow_loss_final: float = 0.0

    def trajectory(self) -> list:
        """Per-frame (timestamp, camera-to-world pose), keyframes refined."""
        out = []
        for rec in self.records:
            pose = rec.pose
            if rec.is_keyframe and rec.frame_id in self.mapper.window.registry:
                pose = self.mapper.window.registry[rec.frame_id].pose
            out.append((rec.timestamp, pose.inverse()))
        return out

    def trajectory_text(self) -> str:
        lines = []
        for rec in self.records:
            pose = rec.pose
            if rec.is_keyframe and rec.frame_id in self.mapper.window.registry:
                pose = self.mapper.window.registry[rec.frame_id].pose
            lines.append(format_trajectory_line(rec.timestamp, pose))
        return "\n".join(lines) + "\n"


def _backproject_region(frame, region, pose, cam, cfg, stride):
    grid = np.zeros_like(region)
    grid[::stride, ::stride] = True
    sel = region & grid & (frame.depth > 0)
    vs, us = np.nonzero(sel)
    if us.size == 0:
        return None
    pts = backproject_pixels(us.astype(np.float64), vs.astype(np.float64),
                             frame.depth[sel], pose, cam)
    depths = frame.depth[sel]
    # one footprint per sampled pixel: at stride s each splat covers s pixels
    log_s = np.log(np.maximum(stride * depths / cam.fx, 1e-6))
    logit = float(np.log(cfg.init_opacity / (1.0 - cfg.init_opacity)))
    return (pts, np.stack([log_s] * 3, axis=1), np.full(len(pts), logit),
            frame.color[sel])


class SlamSystem:
    """Single-threaded orchestration of the tracker and mapper."""

    def __init__(self, source: SequenceSource, cfg: Config, seed: int = 0,
                 max_frames: int | None = None, log=print):
        self.source = source
        self.cfg = cfg
        self.cam = source.intrinsics
        self.seed = seed
        self.log = log
        self.n_frames = len(source) if max_frames is None else min(max_frames, len(source))
        self.mapper: Mapper | None = None
        self.records: list[FrameRecord] = []
        self._dynamic_ready = False
        self.flow_loss_initial = 0.0

    # -- initialization -------------------------------------------------------

    def _init_dynamic(self, frame, pose: PoseSE3):
        """Create dynamic Gaussians + control points from the motion region."""
        cfg = self.cfg
        dyn_region = ~frame.static_mask
        built = _backproject_region(frame, dyn_region, pose, self.cam, cfg,
                                    cfg.densify_stride)
        control = init_control_points(frame.depth, dyn_region, pose, self.cam,
                                      cfg.control_point_count)
        if built is None or len(control) < max(cfg.knn_k, 2):
            self.log(f"frame {frame.index}: motion region too small, staying static")
            return
        pts, log_s, logits, colors = built
        k = len(pts)
        self.mapper.gaussians.append(pts, np.tile([1.0, 0, 0, 0], (k, 1)), log_s,
                                     logits, colors, dy=True, birth_frame=frame.index)
        field = self.mapper.field
        field.control = control
        field.net = DeformNet(hidden=cfg.deform_hidden, pos_bands=cfg.deform_pos_bands,
                              time_bands=cfg.deform_time_bands, seed=self.seed)
        field.bind(self.mapper.gaussians.means[self.mapper.gaussians.dy])
        self.mapper._init_groups()
        self.mapper._sync_groups_from_state()
        self._dynamic_ready = True
        self.log(f"frame {frame.index}: initialized {k} dynamic gaussians, "
                 f"{len(control)} control points")

    def _initialize(self, frame):
        cfg = self.cfg
        pose = PoseSE3.identity()
        built = _backproject_region(frame, frame.static_mask, pose, self.cam, cfg,
                                    cfg.densify_stride)
        if built is None:
            raise ValueError("first frame has no usable static pixels")
        pts, log_s, logits, colors = built
        gs = GaussianSet()
        gs.append(pts, np.tile([1.0, 0, 0, 0], (len(pts), 1)), log_s, logits, colors,
                  dy=False, birth_frame=frame.index)
        field = DeformationField(
            ControlPointSet.empty(),
            DeformNet(hidden=cfg.deform_hidden, pos_bands=cfg.deform_pos_bands,
                      time_bands=cfg.deform_time_bands, seed=self.seed),
            cfg.knn_k)
        field.bind(np.zeros((0, 3)))
        self.mapper = Mapper(gs, field, self.cam, cfg, self.n_frames, seed=self.seed)
        if frame.index >= cfg.dynamic_init_frame and (~frame.static_mask).any():
            self._init_dynamic(frame, pose)
        self.mapper.insert_keyframe(frame.index, frame.timestamp, pose, frame.color,
                                    frame.depth, frame.static_mask, Exposure())
        self.records.append(FrameRecord(frame.index, frame.timestamp, pose, Exposure(),
                                        is_keyframe=True))
        self.mapper.map_stage1(frame.index, flow_provider=self.source.flow)
        self.mapper.map_stage2(frame.index, iters=cfg.init_mapping_iters,
                               flow_provider=self.source.flow)

    # -- flow diagnostic --------------------------------------------------------

    def _measure_flow_loss(self, at_initialization: bool = False) -> float:
        """Mean dynamic-region flow loss over consecutive keyframe pairs.

        With ``at_initialization`` the deformation is the identity (the
        zero-initialized field), under which rendered flow is exactly zero,
        so the loss reduces to the mean provider-flow magnitude.
        """
        from .losses import masked_l1
        from .mapping import flow_supervision_region
        from .render import render_flow_map

        mapper = self.mapper
        if not self._dynamic_ready or self.source.flow is None:
            return 0.0
        ids = sorted(mapper.window.registry)
        total = 0.0
        count = 0
        dyn = mapper.gaussians.subset(mapper.gaussians.dy)
        zero = None
        for prev_id, cur_id in zip(ids, ids[1:]):
            pair = self.source.flow.flow_pair(prev_id, cur_id)
            if pair is None:
                continue
            fwd_gt, bwd_gt = pair
            prev = mapper.window.registry[prev_id]
            cur = mapper.window.registry[cur_id]
            if at_initialization:
                if zero is None:
                    zero = np.zeros_like(fwd_gt)
                fwd, bwd = zero, zero
            else:
                m_prev, r_prev, _ = mapper.field.deform(dyn, mapper.frame_time(prev_id))
                m_cur, r_cur, _ = mapper.field.deform(dyn, mapper.frame_time(cur_id))
                bwd, _ = render_flow_map(m_cur, r_cur, m_prev, dyn, cur.pose,
                                         self.cam, self.cfg, True)
                fwd, _ = render_flow_map(m_prev, r_prev, m_cur, dyn, prev.pose,
                                         self.cam, self.cfg, False)
            l_b, _ = masked_l1(bwd, bwd_gt,
                               flow_supervision_region(cur.dynamic_region,
                                                       self.cfg.mask_dilation_px))
            l_f, _ = masked_l1(fwd, fwd_gt,
                               flow_supervision_region(prev.dynamic_region,
                                                       self.cfg.mask_dilation_px))
            total += l_b + l_f
            count += 1
        return total / count if count else 0.0

    # -- the main loop ------------------------------------------------------------

    def run(self) -> SlamResult:
        start = time.perf_counter()
        cfg = self.cfg
        first = self.source.frame(0)
        self._initialize(first)

        for i in range(1, self.n_frames):
            frame = self.source.frame(i)
            prev = self.records[-1]
            prev2 = self.records[-2] if len(self.records) >= 2 else None
            init_pose = constant_velocity_extrapolate(
                prev.pose if not prev.is_keyframe
                else self.mapper.window.registry[prev.frame_id].pose,
                prev2.pose if prev2 is not None else None)
            static_map = self.mapper.gaussians.static_subset()
            result = track_frame(static_map, frame.color, frame.depth,
                                 frame.static_mask, init_pose, self.cam, cfg,
                                 init_exposure=prev.exposure)
            rec = FrameRecord(frame.index, frame.timestamp, result.pose,
                              result.exposure, result.final_loss, result.converged)
            self.records.append(rec)

            if not self._dynamic_ready and frame.index >= cfg.dynamic_init_frame \
                    and (~frame.static_mask).any():
                self._init_dynamic(frame, result.pose)
                if self._dynamic_ready:
                    self._insert_and_map(frame, rec)
                    continue

            last_kf_id = self.mapper.window.order[0]
            last_kf = self.mapper.window.registry[last_kf_id]
            touched = self.mapper.touched_ids(result.pose,
                                              self.mapper.frame_time(frame.index))
            insert, reason = should_insert_keyframe(touched, result.pose,
                                                    ~frame.static_mask, last_kf,
                                                    frame.index, cfg)
            if insert:
                self.log(f"frame {frame.index}: keyframe ({reason}), "
                         f"loss={result.final_loss:.5f}")
                self._insert_and_map(frame, rec)

        self.log("refinement...")
        rng = np.random.default_rng(self.seed + 1)
        self.mapper.refine_colors(rng=rng)
        flow_initial = self._measure_flow_loss(at_initialization=True)
        flow_final = self._measure_flow_loss()
        runtime = time.perf_counter() - start
        return SlamResult(self.records, self.mapper, cfg, self.cam, self.n_frames,
                          runtime, flow_initial, flow_final)

    def _insert_and_map(self, frame, rec: FrameRecord):
        rec.is_keyframe = True
        self.mapper.insert_keyframe(frame.index, frame.timestamp, rec.pose,
                                    frame.color, frame.depth, frame.static_mask,
                                    rec.exposure)
        self.mapper.map_stage1(frame.index, flow_provider=self.source.flow)
        self.mapper.map_stage2(frame.index, flow_provider=self.source.flow)


# ---------------------------------------------------------------------------
# evaluation over a finished run
# ---------------------------------------------------------------------------

def evaluate_run(result: SlamResult, source: SequenceSource) -> dict:
    """Render every frame at its estimated pose and score against the inputs."""
    mapper = result.mapper
    psnrs = []
    ssims = []
    for rec in result.records:
        frame = source.frame(rec.frame_id)
        pose = rec.pose
        if rec.is_keyframe and rec.frame_id in mapper.window.registry:
            kf = mapper.window.registry[rec.frame_id]
            pose = kf.pose
            exposure = kf.exposure
        else:
            exposure = rec.exposure
        out, _ = mapper.render_at(pose, mapper.frame_time(rec.frame_id))
        corrected, _ = apply_exposure(out.color, exposure.log_gain, exposure.offset)
        psnrs.append(psnr(corrected, frame.color))
        ssims.append(ssim(corrected, frame.color))
    metrics = {
        "psnr_db": f"{np.mean(psnrs):.4f}",
        "ssim": f"{np.mean(ssims):.4f}",
        "lpips": "n/a",
        "n_frames": str(len(result.records)),
        "n_keyframes": str(sum(1 for r in result.records if r.is_keyframe)),
        "n_gaussians": str(len(mapper.gaussians)),
        "flow_loss_initial": f"{result.flow_loss_initial:.6f}",
        "flow_loss_final": f"{result.flow_loss_final:.6f}",
    }
    if source.groundtruth:
        metrics["ate_cm"] = f"{ate_rmse(result.trajectory(), source.groundtruth):.4f}"
    else:
        metrics["ate_cm"] = "n/a"
    return metrics


# ---------------------------------------------------------------------------
# checkpoint serialization of a full system state
# ---------------------------------------------------------------------------

def checkpoint_arrays(result: SlamResult) -> tuple[dict, dict]:
    mapper = result.mapper
    gs = mapper.gaussians
    kf_ids = sorted(mapper.window.registry)
    kf_pose = np.array([np.concatenate([mapper.window.registry[i].pose.rotation,
                                        mapper.window.registry[i].pose.translation])
                        for i in kf_ids]).reshape(len(kf_ids), 7)
    kf_expo = np.array([[mapper.window.registry[i].exposure.log_gain,
                         mapper.window.registry[i].exposure.offset] for i in kf_ids]
                       ).reshape(len(kf_ids), 2)
    arrays = {
        "means": gs.means, "rots": gs.rots, "log_scales": gs.log_scales,
        "opacity_logits": gs.opacity_logits, "colors": gs.colors,
        "dy": gs.dy.astype(np.uint8), "birth_frames": gs.birth_frames, "ids": gs.ids,
        "net_flat": mapper.field.net.get_flat(),
        "control_positions": mapper.field.control.positions,
        "control_log_radii": mapper.field.control.log_radii,
        "neighbors": (mapper.field.neighbors if mapper.field.neighbors is not None
                      else np.zeros((0, 0), dtype=np.int64)),
        "kf_ids": np.array(kf_ids, dtype=np.int64),
        "kf_poses": kf_pose, "kf_exposures": kf_expo,
        "frame_ids": np.array([r.frame_id for r in result.records], dtype=np.int64),
        "frame_stamps": np.array([r.timestamp for r in result.records]),
    }
    cam = result.cam
    meta = {
        "n_frames": result.n_frames,
        "cam": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                "width": cam.width, "height": cam.height, "near_clip": cam.near_clip},
        "deform": {"hidden": result.cfg.deform_hidden,
                   "pos_bands": result.cfg.deform_pos_bands,
                   "time_bands": result.cfg.deform_time_bands,
                   "knn_k": result.cfg.knn_k},
    }
    return arrays, meta


def restore_scene(arrays: dict, meta: dict):
    """Checkpoint -> (GaussianSet, DeformationField, CameraIntrinsics, n_frames)."""
    gs = GaussianSet(arrays["means"], arrays["rots"], arrays["log_scales"],
                     arrays["opacity_logits"], arrays["colors"],
                     arrays["dy"].astype(bool), arrays["birth_frames"], arrays["ids"])
    d = meta["deform"]
    net = DeformNet(hidden=d["hidden"], pos_bands=d["pos_bands"],
                    time_bands=d["time_bands"])
    net.set_flat(arrays["net_flat"])
    control = ControlPointSet(arrays["control_positions"], arrays["control_log_radii"])
    fld = DeformationField(control, net, d["knn_k"])
    fld.neighbors = arrays["neighbors"] if arrays["neighbors"].size else None
    c = meta["cam"]
    cam = CameraIntrinsics(fx=c["fx"], fy=c["fy"], cx=c["cx"], cy=c["cy"],
                           width=c["width"], height=c["height"],
                           near_clip=c["near_clip"])
    return gs, fld, cam, meta["n_frames"]
