"""Keyframe window, densification, two-stage 4D mapping, and refinement.

The mapper owns all mutable map state: the Gaussian set, the deformation
field, keyframes, and per-parameter-group optimizer moments. Stage 1
optimizes only keyframe poses/exposures and the deformation field (with
doubled photometric weight inside the motion region); stage 2 additionally
optimizes Gaussian parameters and prunes afterwards. Dynamic Gaussians are
created once at initialization and never densified or pruned.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .config import Config
from .deform import DeformationField
from .gaussians import GaussianSet
from .geometry import CameraIntrinsics, PoseSE3, se3_exp
from .losses import iso_loss, mapping_loss, masked_l1, refinement_loss
from .optim import ParamGroup, adam_step
from .render import (apply_exposure, apply_exposure_backward, composite_backward,
                     project_gaussians, render_flow_map, render_flow_map_backward,
                     render_set)
from .tracking import Exposure


def flow_supervision_region(dynamic_region: np.ndarray, dilation_px: int) -> np.ndarray:
    """Undo the robustness dilation for flow supervision: the rendered flow
    fades with dynamic opacity at footprint edges, so the dilated rim would
    compare a near-zero render against full-magnitude provider flow."""
    if dilation_px <= 0 or not dynamic_region.any():
        return dynamic_region
    from scipy import ndimage
    eroded = ndimage.binary_erosion(dynamic_region, iterations=dilation_px)
    return eroded if eroded.any() else dynamic_region


@dataclass
class Keyframe:
    frame_id: int
    timestamp: float
    pose: PoseSE3
    color: np.ndarray
    depth: np.ndarray
    static_mask: np.ndarray          # True = static/usable pixel
    exposure: Exposure
    touched_ids: frozenset = dc_field(default_factory=frozenset)

    @property
    def dynamic_region(self) -> np.ndarray:
        return ~self.static_mask


class KeyframeWindow:
    """Sliding window (newest first) over a global keyframe registry."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.order: list[int] = []            # frame ids, newest first
        self.registry: dict[int, Keyframe] = {}

    def __len__(self) -> int:
        return len(self.order)

    def insert(self, kf: Keyframe) -> None:
        if kf.frame_id in self.registry:
            raise ValueError(f"keyframe {kf.frame_id} already registered")
        self.registry[kf.frame_id] = kf
        self.order.insert(0, kf.frame_id)

    def evict(self, frame_id: int) -> None:
        self.order.remove(frame_id)           # stays in the registry

    def newest(self, k: int) -> list[int]:
        return self.order[:k]

    def consistent(self) -> bool:
        return all(fid in self.registry for fid in self.order) and \
            len(set(self.order)) == len(self.order) and len(self.order) <= self.capacity

    def previous_keyframe(self, frame_id: int) -> Keyframe | None:
        ids = sorted(self.registry)
        pos = ids.index(frame_id)
        return self.registry[ids[pos - 1]] if pos > 0 else None


def visibility_overlap(newer: frozenset, older: frozenset) -> float:
    """Fraction of the newer keyframe's touched Gaussians also touched by
    the older one; 0 when the newer keyframe touched nothing."""
    if not newer:
        return 0.0
    return len(newer & older) / len(newer)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two motion (dynamic-region) masks; two empty masks count as 1."""
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def should_insert_keyframe(cur_touched: frozenset, cur_pose: PoseSE3,
                           cur_dynamic_region: np.ndarray, last_kf: Keyframe,
                           frame_id: int, cfg: Config):
    """Keyframe decision; returns (bool, reason string)."""
    if visibility_overlap(cur_touched, last_kf.touched_ids) < cfg.keyframe_visibility_threshold:
        return True, "visibility"
    c_cur = cur_pose.inverse().translation
    c_last = last_kf.pose.inverse().translation
    if np.linalg.norm(c_cur - c_last) > cfg.keyframe_translation_threshold:
        return True, "translation"
    if mask_iou(cur_dynamic_region, last_kf.dynamic_region) < cfg.mask_iou_threshold:
        return True, "mask"
    if frame_id - last_kf.frame_id >= cfg.keyframe_max_gap:
        return True, "gap"
    return False, "none"


GAUSSIAN_GROUPS = ("means", "rots", "log_scales", "opacity_logits", "colors")
_GROUP_WIDTH = {"means": 3, "rots": 4, "log_scales": 3, "opacity_logits": 1, "colors": 3}


class Mapper:
    def __init__(self, gaussians: GaussianSet, field: DeformationField,
                 cam: CameraIntrinsics, cfg: Config, n_frames: int, seed: int = 0):
        self.gaussians = gaussians
        self.field = field
        self.cam = cam
        self.cfg = cfg
        self.n_frames = max(n_frames, 2)
        self.window = KeyframeWindow(cfg.window_capacity)
        self.rng = np.random.default_rng(seed)
        self._groups: dict[str, ParamGroup] = {}
        self._init_groups()

    # -- optimizer state ----------------------------------------------------

    def _init_groups(self):
        cfg = self.cfg
        lrs = {"means": cfg.lr_means, "rots": cfg.lr_rots, "log_scales": cfg.lr_scales,
               "opacity_logits": cfg.lr_opacities, "colors": cfg.lr_colors}
        for name in GAUSSIAN_GROUPS:
            self._groups[name] = ParamGroup(name, getattr(self.gaussians, name).reshape(-1).copy(),
                                            lrs[name])
        self._groups["deform_net"] = ParamGroup("deform_net", self.field.net.get_flat(),
                                                cfg.lr_deform)
        n_cp = len(self.field.control)
        self._groups["control_positions"] = ParamGroup(
            "control_positions", self.field.control.positions.reshape(-1).copy(),
            cfg.lr_control_points)
        self._groups["control_log_radii"] = ParamGroup(
            "control_log_radii", self.field.control.log_radii.copy(),
            cfg.lr_control_points)
        if not cfg.learn_rbf_radii:
            self._groups.pop("control_log_radii")
        self._kf_groups: dict[int, dict[str, ParamGroup]] = {}

    def _sync_groups_from_state(self):
        for name in GAUSSIAN_GROUPS:
            arr = getattr(self.gaussians, name).reshape(-1)
            grp = self._groups[name]
            if grp.params.size != arr.size:
                grp.resize(arr.size)
            grp.params[:] = arr

    def _kf_group(self, frame_id: int) -> dict[str, ParamGroup]:
        if frame_id not in self._kf_groups:
            cfg = self.cfg
            self._kf_groups[frame_id] = {
                "trans": ParamGroup(f"kf{frame_id}_trans", np.zeros(3), cfg.lr_kf_trans),
                "rot": ParamGroup(f"kf{frame_id}_rot", np.zeros(3), cfg.lr_kf_rot),
                "exposure": ParamGroup(f"kf{frame_id}_exposure", np.zeros(2), cfg.lr_exposure),
            }
            kf = self.window.registry[frame_id]
            self._kf_groups[frame_id]["exposure"].params[:] = [kf.exposure.log_gain,
                                                               kf.exposure.offset]
        return self._kf_groups[frame_id]

    # -- time normalization ---------------------------------------------------

    def frame_time(self, frame_id: int) -> float:
        return frame_id / (self.n_frames - 1)

    # -- keyframe insertion ---------------------------------------------------

    def touched_ids(self, pose: PoseSE3, t: float = 0.0) -> frozenset:
        """Ids of Gaussians contributing visibly when rendered at this pose."""
        out, _ = self.render_at(pose, t)
        return frozenset(self.gaussians.ids[out.touched].tolist())

    def _deformed_arrays(self, t: float):
        gs = self.gaussians
        dyn_mask = gs.dy
        if not dyn_mask.any() or self.field.identity():
            return gs.means, gs.rots, None
        dyn = gs.subset(dyn_mask)
        d_means, d_rots, cache = self.field.deform(dyn, t)
        means = gs.means.copy()
        rots = gs.rots.copy()
        means[dyn_mask] = d_means
        rots[dyn_mask] = d_rots
        return means, rots, cache

    def render_at(self, pose: PoseSE3, t: float):
        means, rots, cache = self._deformed_arrays(t)
        out = render_set(self.gaussians, pose, self.cam, self.cfg,
                         means=means, rots=rots)
        return out, cache

    def insert_keyframe(self, frame_id: int, timestamp: float, pose: PoseSE3,
                        color, depth, static_mask, exposure: Exposure) -> dict:
        """Register a keyframe, evict stale window members, densify statics."""
        cfg = self.cfg
        t = self.frame_time(frame_id)
        out, _ = self.render_at(pose, t)
        touched = frozenset(self.gaussians.ids[out.touched].tolist())
        kf = Keyframe(frame_id, timestamp, pose, np.asarray(color, dtype=np.float64),
                      np.asarray(depth, dtype=np.float64),
                      np.asarray(static_mask, dtype=bool), exposure.copy(), touched)

        evicted = [fid for fid in self.window.order
                   if visibility_overlap(touched, self.window.registry[fid].touched_ids)
                   < cfg.eviction_overlap]
        for fid in evicted:
            self.window.evict(fid)
        self.window.insert(kf)
        while len(self.window) > self.window.capacity:
            dropped = self.window.order[-1]
            self.window.evict(dropped)
            evicted.append(dropped)

        added = self._densify(kf, out)
        kf.touched_ids = frozenset(kf.touched_ids | added)
        return {"added": len(added), "evicted": evicted}

    def _densify(self, kf: Keyframe, rendered) -> set:
        """Backproject under-covered static pixels into new static Gaussians."""
        cfg = self.cfg
        stride = max(cfg.densify_stride, 1)
        grid = np.zeros_like(kf.static_mask)
        grid[::stride, ::stride] = True
        valid_depth = kf.depth > 0
        depth_err = np.abs(rendered.depth - kf.depth)
        scale = np.median(depth_err[kf.static_mask & valid_depth]) if \
            (kf.static_mask & valid_depth).any() else 0.0
        threshold = max(cfg.densify_depth_factor * scale, cfg.densify_depth_floor)
        poorly_explained = (rendered.opacity < cfg.densify_opacity) | (depth_err > threshold)
        candidates = grid & kf.static_mask & valid_depth & poorly_explained
        vs, us = np.nonzero(candidates)
        if us.size == 0:
            return set()
        from .geometry import backproject_pixels
        pts = backproject_pixels(us.astype(np.float64), vs.astype(np.float64),
                                 kf.depth[candidates], kf.pose, self.cam)
        depths = kf.depth[candidates]
        # footprint matched to the sampling stride so new splats tile coverage
        log_s = np.log(np.maximum(stride * depths / self.cam.fx, 1e-6))
        k = len(pts)
        logit = float(np.log(cfg.init_opacity / (1.0 - cfg.init_opacity)))
        new_ids = self.gaussians.append(
            pts, np.tile([1.0, 0, 0, 0], (k, 1)),
            np.stack([log_s] * 3, axis=1), np.full(k, logit),
            kf.color[candidates], dy=False, birth_frame=kf.frame_id)
        self._sync_groups_from_state()
        return set(new_ids.tolist())

    # -- mapping frame selection ---------------------------------------------

    def select_mapping_frames(self, cur_id: int, rng: np.random.Generator) -> list[int]:
        """Newest window trio + random overlapping + random global, dedup."""
        cfg = self.cfg
        chosen = list(self.window.newest(3))
        cur = self.window.registry[cur_id]
        overlapping = [fid for fid in sorted(self.window.registry)
                       if fid not in chosen
                       and visibility_overlap(cur.touched_ids,
                                              self.window.registry[fid].touched_ids)
                       > cfg.sampling_overlap]
        if overlapping:
            take = min(cfg.overlap_samples, len(overlapping))
            picks = rng.choice(len(overlapping), size=take, replace=False)
            chosen.extend(overlapping[i] for i in sorted(picks))
        rest = [fid for fid in sorted(self.window.registry) if fid not in chosen]
        if rest:
            take = min(cfg.global_samples, len(rest))
            picks = rng.choice(len(rest), size=take, replace=False)
            chosen.extend(rest[i] for i in sorted(picks))
        return chosen

    # -- loss/grad evaluation over a set of keyframes --------------------------

    def _flow_supervision(self, kf: Keyframe, flow_provider):
        prev = self.window.previous_keyframe(kf.frame_id)
        if prev is None or flow_provider is None or not self.gaussians.dy.any() \
                or self.field.identity():
            return None
        pair = flow_provider.flow_pair(prev.frame_id, kf.frame_id)
        if pair is None:
            return None
        fwd_gt, bwd_gt = pair
        return prev, fwd_gt, bwd_gt

    def _evaluate(self, kf_ids: list[int], stage: int, flow_provider,
                  train_gaussians: bool, refine: bool = False):
        """Total loss and gradients for one optimization step.

        Returns (loss, grads dict). Gradient keys mirror the param groups;
        per-keyframe pose twists appear as ("kf", frame_id).
        """
        cfg = self.cfg
        gs = self.gaussians
        n = len(gs)
        dyn_mask = gs.dy
        grads = {name: np.zeros_like(self._groups[name].params) for name in self._groups}
        kf_grads: dict[int, dict[str, np.ndarray]] = {}

        iso_val, iso_grad = iso_loss(gs.log_scales)
        total = 0.0
        n_kf = len(kf_ids)
        arap_total = 0.0

        for fid in kf_ids:
            kf = self.window.registry[fid]
            t = self.frame_time(fid)
            out, deform_cache = self.render_at(kf.pose, t)
            corrected, exp_cache = apply_exposure(out.color, kf.exposure.log_gain,
                                                  kf.exposure.offset)

            flow_sup = self._flow_supervision(kf, flow_provider)
            flow_val = 0.0
            flow_backward = None
            if flow_sup is not None:
                prev, fwd_gt, bwd_gt = flow_sup
                dyn = gs.subset(dyn_mask)
                m_prev, r_prev, c_prev = self.field.deform(dyn, self.frame_time(prev.frame_id))
                m_cur, r_cur, c_cur = self.field.deform(dyn, t)
                bwd_flow, bwd_cache = render_flow_map(m_cur, r_cur, m_prev, dyn,
                                                      kf.pose, self.cam, cfg, True)
                fwd_flow, fwd_cache = render_flow_map(m_prev, r_prev, m_cur, dyn,
                                                      prev.pose, self.cam, cfg, False)
                region_cur = flow_supervision_region(kf.dynamic_region, cfg.mask_dilation_px)
                region_prev = flow_supervision_region(prev.dynamic_region, cfg.mask_dilation_px)
                l_bwd, adj_bwd = masked_l1(bwd_flow, bwd_gt, region_cur)
                l_fwd, adj_fwd = masked_l1(fwd_flow, fwd_gt, region_prev)
                flow_val = l_bwd + l_fwd
                flow_backward = (adj_fwd, adj_bwd, fwd_cache, bwd_cache,
                                 c_prev, c_cur, prev)

            arap_val, arap_cache = self.field.arap_loss(t)
            arap_total += arap_val

            # until dynamic Gaussians exist, motion regions are unexplainable
            valid = None if dyn_mask.any() else kf.static_mask
            if refine:
                kf_loss, parts = refinement_loss(corrected, out.depth, out.opacity,
                                                 kf.color, kf.depth, arap_val, iso_val, cfg)
            else:
                kf_loss, parts = mapping_loss(corrected, out.depth, out.opacity,
                                              kf.color, kf.depth, kf.dynamic_region,
                                              flow_val, arap_val, iso_val, cfg, stage,
                                              valid_mask=valid)
            total += kf_loss / n_kf
            w = 1.0 / n_kf

            g_corrected = parts["g_color"] * w
            g_color, d_gain, d_offset = apply_exposure_backward(exp_cache, g_corrected)
            render_grads = composite_backward(out, cfg, g_color=g_color,
                                              g_depth=parts["g_depth"] * w)
            self._accumulate_scene_grads(grads, render_grads, dyn_mask,
                                         deform_cache, train_gaussians)
            kfg = kf_grads.setdefault(fid, {"twist": np.zeros(6), "exposure": np.zeros(2)})
            kfg["twist"] += render_grads.pose_twist
            kfg["exposure"] += [d_gain, d_offset]

            if flow_backward is not None and not refine:
                self._accumulate_flow_grads(grads, kf_grads, flow_backward,
                                            dyn_mask, cfg.lambda_flow * w,
                                            train_gaussians, fid)

            if arap_cache is not None:
                arap_w = parts["arap_weight"] * w
                a_net, a_pos = self.field.arap_backward(arap_cache, arap_w)
                grads["deform_net"] += a_net
                grads["control_positions"] += a_pos.reshape(-1)

        if train_gaussians:
            grads["log_scales"] += (self.cfg.w2_iso * iso_grad).reshape(-1)
        return total, grads, kf_grads

    def _accumulate_scene_grads(self, grads, render_grads, dyn_mask, deform_cache,
                                train_gaussians):
        g_means = render_grads.means
        g_rots = render_grads.rots
        if deform_cache is not None:
            dg = self.field.deform_backward(deform_cache, g_means[dyn_mask],
                                            g_rots[dyn_mask])
            grads["deform_net"] += dg.net_flat
            grads["control_positions"] += dg.control_positions.reshape(-1)
            if "control_log_radii" in grads:
                grads["control_log_radii"] += dg.control_log_radii
            g_means = g_means.copy()
            g_rots = g_rots.copy()
            g_means[dyn_mask] = dg.dyn_means
            g_rots[dyn_mask] = dg.dyn_rots
        if train_gaussians:
            grads["means"] += g_means.reshape(-1)
            grads["rots"] += g_rots.reshape(-1)
            grads["log_scales"] += render_grads.log_scales.reshape(-1)
            grads["opacity_logits"] += render_grads.opacity_logits
            grads["colors"] += render_grads.colors.reshape(-1)

    def _accumulate_flow_grads(self, grads, kf_grads, flow_backward, dyn_mask,
                               weight, train_gaussians, fid):
        adj_fwd, adj_bwd, fwd_cache, bwd_cache, c_prev, c_cur, prev = flow_backward
        gb = render_flow_map_backward(bwd_cache, self.cfg, adj_bwd * weight, True)
        gf = render_flow_map_backward(fwd_cache, self.cfg, adj_fwd * weight, False)
        d_m_cur = gb["means_cur"] + gf["means_cur"]
        d_r_cur = gb["rots_cur"] + gf["rots_cur"]
        d_m_prev = gb["means_prev"] + gf["means_prev"]
        d_r_prev = gb["rots_prev"] + gf["rots_prev"]
        for cache, d_m, d_r in ((c_cur, d_m_cur, d_r_cur), (c_prev, d_m_prev, d_r_prev)):
            dg = self.field.deform_backward(cache, d_m, d_r)
            grads["deform_net"] += dg.net_flat
            grads["control_positions"] += dg.control_positions.reshape(-1)
            if "control_log_radii" in grads:
                grads["control_log_radii"] += dg.control_log_radii
            if train_gaussians:
                means_g = np.zeros((len(self.gaussians), 3))
                rots_g = np.zeros((len(self.gaussians), 4))
                means_g[dyn_mask] = dg.dyn_means
                rots_g[dyn_mask] = dg.dyn_rots
                grads["means"] += means_g.reshape(-1)
                grads["rots"] += rots_g.reshape(-1)
        if train_gaussians:
            sc = np.zeros((len(self.gaussians), 3))
            lo = np.zeros(len(self.gaussians))
            dyn_idx = np.nonzero(dyn_mask)[0]
            sc[dyn_idx] = gb["log_scales"] + gf["log_scales"]
            lo[dyn_idx] = gb["opacity_logits"] + gf["opacity_logits"]
            grads["log_scales"] += sc.reshape(-1)
            grads["opacity_logits"] += lo
        kfg = kf_grads.setdefault(fid, {"twist": np.zeros(6), "exposure": np.zeros(2)})
        kfg["twist"] += gb["pose_twist"]
        pkg = kf_grads.setdefault(prev.frame_id, {"twist": np.zeros(6), "exposure": np.zeros(2)})
        pkg["twist"] += gf["pose_twist"]

    # -- optimizer application -------------------------------------------------

    def _apply_gaussian_steps(self, grads):
        for name in GAUSSIAN_GROUPS:
            grp = self._groups[name]
            adam_step(grp, grads[name])
            getattr(self.gaussians, name)[:] = grp.params.reshape(
                getattr(self.gaussians, name).shape)
        self.gaussians.normalize_rotations()
        self._groups["rots"].params[:] = self.gaussians.rots.reshape(-1)

    def _apply_deform_steps(self, grads):
        grp = self._groups["deform_net"]
        adam_step(grp, grads["deform_net"])
        self.field.net.set_flat(grp.params)
        grp_p = self._groups["control_positions"]
        adam_step(grp_p, grads["control_positions"])
        self.field.control.positions = grp_p.params.reshape(-1, 3).copy()
        if "control_log_radii" in self._groups:
            grp_r = self._groups["control_log_radii"]
            adam_step(grp_r, grads["control_log_radii"])
            self.field.control.log_radii = grp_r.params.copy()

    def _apply_kf_steps(self, kf_grads, optimizable: list[int]):
        for fid in optimizable:
            if fid not in kf_grads:
                continue
            kf = self.window.registry[fid]
            groups = self._kf_group(fid)
            if fid != 0:  # the first keyframe anchors the gauge
                groups["trans"].params[:] = 0.0
                groups["rot"].params[:] = 0.0
                adam_step(groups["trans"], kf_grads[fid]["twist"][:3])
                adam_step(groups["rot"], kf_grads[fid]["twist"][3:])
                kf.pose = se3_exp(np.concatenate([groups["trans"].params,
                                                  groups["rot"].params])).compose(kf.pose)
            adam_step(groups["exposure"], kf_grads[fid]["exposure"])
            kf.exposure.log_gain = float(groups["exposure"].params[0])
            kf.exposure.offset = float(groups["exposure"].params[1])

    # -- the two mapping stages -------------------------------------------------

    def _snapshot(self):
        return (self.gaussians.copy(), self.field.net.get_flat(),
                self.field.control.positions.copy(), self.field.control.log_radii.copy(),
                {fid: (kf.pose, kf.exposure.copy()) for fid, kf in self.window.registry.items()})

    def _restore(self, snap):
        gaussians, net_flat, cp, lr_, kf_state = snap
        self.gaussians = gaussians
        self.field.net.set_flat(net_flat)
        self.field.control.positions = cp
        self.field.control.log_radii = lr_
        for fid, (pose, exposure) in kf_state.items():
            self.window.registry[fid].pose = pose
            self.window.registry[fid].exposure = exposure
        self._sync_groups_from_state()

    def _run_stage(self, stage: int, cur_id: int, iters: int, flow_provider) -> list[float]:
        snap = self._snapshot()
        optimizable = [fid for fid in self.window.newest(3)]
        losses = []
        train_gaussians = stage == 2
        for _ in range(iters):
            kf_ids = self.select_mapping_frames(cur_id, self.rng)
            loss, grads, kf_grads = self._evaluate(kf_ids, stage, flow_provider,
                                                   train_gaussians)
            if not np.isfinite(loss):
                self._restore(snap)
                return losses
            losses.append(loss)
            if train_gaussians:
                self._apply_gaussian_steps(grads)
            self._apply_deform_steps(grads)
            self._apply_kf_steps(kf_grads, optimizable)
        return losses

    def map_stage1(self, cur_id: int, iters: int | None = None, flow_provider=None):
        return self._run_stage(1, cur_id, iters or self.cfg.stage1_iters, flow_provider)

    def map_stage2(self, cur_id: int, iters: int | None = None, flow_provider=None):
        losses = self._run_stage(2, cur_id, iters or self.cfg.stage2_iters, flow_provider)
        self.prune(self.select_mapping_frames(cur_id, self.rng))
        return losses

    # -- pruning -----------------------------------------------------------------

    def prune(self, kf_ids: list[int]) -> int:
        """Drop static Gaussians that are nearly transparent or that project
        below the footprint floor in every selected view where visible."""
        cfg = self.cfg
        gs = self.gaussians
        low_alpha = gs.opacities < cfg.prune_opacity
        max_fp = np.zeros(len(gs))
        seen = np.zeros(len(gs), dtype=bool)
        for fid in kf_ids:
            kf = self.window.registry[fid]
            t = self.frame_time(fid)
            means, rots, _ = self._deformed_arrays(t)
            proj = project_gaussians(means, rots, gs.log_scales, gs.opacity_logits,
                                     gs.colors, kf.pose, self.cam, cfg)
            cov = proj.cov2d.copy()
            cov[:, 0, 0] -= cfg.cov2d_regularization
            cov[:, 1, 1] -= cfg.cov2d_regularization
            a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
            lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b ** 2, 0.0))
            fp = np.sqrt(np.maximum(lam_max, 0.0))
            seen[proj.order] = True
            max_fp[proj.order] = np.maximum(max_fp[proj.order], fp)
        tiny = seen & (max_fp < cfg.prune_footprint_px)
        drop = (low_alpha | tiny) & ~gs.dy
        if not drop.any():
            return 0
        keep = ~drop
        gs.keep(keep)
        for name in GAUSSIAN_GROUPS:
            self._groups[name].keep(keep, _GROUP_WIDTH[name])
        self._sync_groups_from_state()
        return int(drop.sum())

    # -- global color refinement ---------------------------------------------------

    def refine_colors(self, iters: int | None = None, rng: np.random.Generator | None = None,
                      flow_provider=None) -> list[float]:
        """Final global optimization of Gaussians + deformation, poses frozen."""
        cfg = self.cfg
        iters = cfg.refine_iters if iters is None else iters
        rng = rng or self.rng
        all_ids = sorted(self.window.registry)
        losses = []
        for _ in range(iters):
            take = min(cfg.refine_frames, len(all_ids))
            picks = rng.choice(len(all_ids), size=take, replace=False)
            kf_ids = [all_ids[i] for i in sorted(picks)]
            loss, grads, _ = self._evaluate(kf_ids, 2, None, train_gaussians=True,
                                            refine=True)
            if not np.isfinite(loss):
                break
            losses.append(loss)
            self._apply_gaussian_steps(grads)
            self._apply_deform_steps(grads)
        return losses
