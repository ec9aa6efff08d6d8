"""Tracking: gradient gate, masked loss, and pose recovery.

The Sobel kernels are normalized by 1/8, so a unit step edge responds with
gradient magnitude 0.5 on the two columns adjacent to the edge.
"""
from __future__ import annotations

import numpy as np
import pytest

from splat4d.config import Config
from splat4d.gaussians import GaussianSet
from splat4d.geometry import PoseSE3, se3_exp, se3_log
from splat4d.render import render_set
from splat4d.tracking import (Exposure, UntrackableFrameError,
                              constant_velocity_extrapolate, format_trajectory_line,
                              gradient_gate_mask, track_frame, tracking_loss)

from conftest import (assert_grad_close, fd_gradient, gradcheck_config,
                      random_scene, toy_camera)


class TestGradientGate:
    def test_constant_image_all_false(self):
        assert not gradient_gate_mask(np.full((16, 16, 3), 0.3), 0.01).any()

    def test_step_edge_response(self):
        img = np.zeros((10, 10))
        img[:, 5:] = 1.0
        mask = gradient_gate_mask(img, 0.45)
        assert mask[:, 4].all() and mask[:, 5].all()   # |gx| = 0.5 at the edge
        assert not mask[:, :4].any() and not mask[:, 7:].any()

    def test_zero_threshold_marks_any_gradient(self, rng):
        img = rng.uniform(size=(12, 12, 3))
        mask = gradient_gate_mask(img, 0.0)
        gray = img.mean(axis=2)
        flat = np.isclose(gray, gray[0, 0]).all()
        assert mask.any() and not flat


def _tracked_scene(seed, n=12):
    rng = np.random.default_rng(seed)
    cam = toy_camera(24, 20)
    cfg = gradcheck_config()
    gs = random_scene(rng, n, cam)
    pose = se3_exp(rng.normal(size=6) * 0.02)
    out = render_set(gs, pose, cam, cfg)
    color_gt = rng.uniform(0.1, 0.9, size=(cam.height, cam.width, 3))
    depth_gt = rng.uniform(1.0, 3.0, size=(cam.height, cam.width))
    static = rng.uniform(size=(cam.height, cam.width)) > 0.2
    gate = rng.uniform(size=(cam.height, cam.width)) > 0.3
    exposure = Exposure(0.05, 0.02)
    return rng, cam, cfg, gs, pose, out, color_gt, depth_gt, static, gate, exposure


class TestTrackingLoss:
    def test_perfect_render_zero_loss(self, rng):
        cam = toy_camera()
        cfg = Config()
        gs = random_scene(rng, 10, cam)
        out = render_set(gs, PoseSE3.identity(), cam, cfg)
        static = np.ones((cam.height, cam.width), dtype=bool)
        gate = np.ones_like(static)
        value, _ = tracking_loss(out, out.color.copy(), out.depth.copy(), static,
                                 gate, Exposure(), cfg)
        assert value == 0.0

    def test_untrackable_when_all_dynamic(self, rng):
        cam = toy_camera()
        cfg = Config()
        gs = random_scene(rng, 5, cam)
        out = render_set(gs, PoseSE3.identity(), cam, cfg)
        with pytest.raises(UntrackableFrameError):
            tracking_loss(out, out.color, out.depth,
                          np.zeros((cam.height, cam.width), dtype=bool),
                          np.ones((cam.height, cam.width), dtype=bool),
                          Exposure(), cfg)

    def test_color_term_weighted_by_opacity(self):
        # lambda * mean(O * |e|) with a hand-built render output
        from splat4d.render import RenderOutput
        cfg = Config()
        h = w = 8
        opacity = np.full((h, w), 0.5)
        color = np.zeros((h, w, 3))
        out = RenderOutput(color=color, depth=np.zeros((h, w)), opacity=opacity)
        gt = np.full((h, w, 3), 0.2)
        static = np.ones((h, w), dtype=bool)
        value, parts = tracking_loss(out, gt, np.zeros((h, w)), static, static,
                                     Exposure(), cfg)
        # every pixel: O=0.5, |e|=0.2; depth term empty
        assert value == pytest.approx(cfg.lambda_color * 0.5 * 0.2)
        assert parts["depth_term"] == 0.0

    def test_low_opacity_pixels_skip_depth_loss(self):
        from splat4d.render import RenderOutput
        cfg = Config()
        h = w = 8
        out = RenderOutput(color=np.zeros((h, w, 3)), depth=np.full((h, w), 5.0),
                           opacity=np.full((h, w), 0.5))
        static = np.ones((h, w), dtype=bool)
        value, parts = tracking_loss(out, np.zeros((h, w, 3)), np.ones((h, w)),
                                     static, static, Exposure(), cfg)
        assert parts["depth_term"] == 0.0  # O=0.5 < 0.95 gate everywhere

    def test_invariant_to_dynamic_region_pixels(self, rng):
        _, cam, cfg, gs, pose, out, color_gt, depth_gt, static, gate, expo = \
            _tracked_scene(11)
        v1, _ = tracking_loss(out, color_gt, depth_gt, static, gate, expo, cfg)
        color2 = color_gt.copy()
        depth2 = depth_gt.copy()
        color2[~static] = rng.uniform(size=(int((~static).sum()), 3))
        depth2[~static] = rng.uniform(size=int((~static).sum())) * 9
        v2, _ = tracking_loss(out, color2, depth2, static, gate, expo, cfg)
        assert v1 == v2

    def test_grads_match_fd(self):
        _, cam, cfg, gs, pose, out, color_gt, depth_gt, static, gate, expo = \
            _tracked_scene(12)
        from splat4d.render import composite_backward
        value, parts = tracking_loss(out, color_gt, depth_gt, static, gate, expo, cfg)
        depth_mask = static & (out.opacity > cfg.opacity_gate) & (depth_gt > 0)
        color_mask = static & gate

        def f_twist(eps):
            o = render_set(gs, se3_exp(eps).compose(pose), cam, cfg)
            v, _ = tracking_loss(o, color_gt, depth_gt, static, gate, expo, cfg,
                                 depth_mask=depth_mask, color_mask=color_mask)
            return v

        grads = composite_backward(out, cfg, g_color=parts["g_color"],
                                   g_depth=parts["g_depth"],
                                   g_opacity=parts["g_opacity"])
        fd = fd_gradient(f_twist, np.zeros(6))
        assert_grad_close(grads.pose_twist, fd, context="tracking twist")

        def f_expo(p):
            v, _ = tracking_loss(out, color_gt, depth_gt, static, gate,
                                 Exposure(p[0], p[1]), cfg,
                                 depth_mask=depth_mask, color_mask=color_mask)
            return v

        fd_e = fd_gradient(f_expo, np.array([expo.log_gain, expo.offset]))
        assert_grad_close([parts["d_log_gain"], parts["d_offset"]], fd_e,
                          context="tracking exposure")


class TestTrackFrame:
    def _scene(self, seed, n=120):
        rng = np.random.default_rng(seed)
        cam = toy_camera(48, 36, f=50.0)
        cfg = Config(tracking_iters=100)
        gs = random_scene(rng, n, cam, z_range=(1.8, 3.0))
        gs.opacity_logits = rng.uniform(1.5, 4.0, size=n)  # mostly opaque scene
        gs.log_scales = rng.uniform(np.log(0.08), np.log(0.2), size=(n, 3))
        pose_gt = se3_exp(rng.normal(size=6) * 0.01)
        out = render_set(gs, pose_gt, cam, cfg)
        static = np.ones((cam.height, cam.width), dtype=bool)
        return rng, cam, cfg, gs, pose_gt, out, static

    def test_fixed_point_at_ground_truth(self):
        rng, cam, cfg, gs, pose_gt, out, static = self._scene(0)
        result = track_frame(gs, out.color, out.depth, static, pose_gt, cam, cfg)
        assert result.converged
        err = se3_log(result.pose.compose(pose_gt.inverse()))
        assert np.linalg.norm(err[:3]) < 1e-4
        assert np.linalg.norm(err[3:]) < 1e-4

    def test_recovers_perturbed_pose(self):
        rng, cam, cfg, gs, pose_gt, out, static = self._scene(1)
        angle = np.deg2rad(1.0)
        axis = np.array([0.3, -0.5, 0.8])
        axis /= np.linalg.norm(axis)
        offset = np.array([0.012, -0.012, 0.008])  # ~2 cm translation offset
        init = se3_exp(np.concatenate([offset, axis * angle])).compose(pose_gt)
        result = track_frame(gs, out.color, out.depth, static, init, cam, cfg)
        err = se3_log(result.pose.compose(pose_gt.inverse()))
        assert np.rad2deg(np.linalg.norm(err[3:])) < 0.1
        assert np.linalg.norm(err[:3]) < 0.002

    def test_exposure_identifiability(self):
        # colors kept below 0.5 so the doubled frame never clips; background
        # pixels anchor the offset at zero, leaving the gain to explain x2
        rng, cam, cfg, gs, pose_gt, out, static = self._scene(2)
        gs.colors = rng.uniform(0.05, 0.45, size=gs.colors.shape)
        cfg = Config(tracking_iters=200, tracking_patience=30)
        out = render_set(gs, pose_gt, cam, cfg)
        doubled = out.color * 2.0
        assert doubled.max() < 1.0
        result = track_frame(gs, doubled, out.depth, static, pose_gt, cam, cfg)
        assert result.exposure.log_gain == pytest.approx(np.log(2.0), abs=0.1)
        assert abs(result.exposure.offset) < 0.05
        err = se3_log(result.pose.compose(pose_gt.inverse()))
        assert np.linalg.norm(err[:3]) < 0.005
        assert np.rad2deg(np.linalg.norm(err[3:])) < 0.3

    def test_empty_map_rejected(self):
        cam = toy_camera()
        with pytest.raises(ValueError):
            track_frame(GaussianSet(), np.zeros((cam.height, cam.width, 3)),
                        np.zeros((cam.height, cam.width)),
                        np.ones((cam.height, cam.width), dtype=bool),
                        PoseSE3.identity(), cam, Config())


class TestHelpers:
    def test_constant_velocity(self):
        p1 = se3_exp(np.array([0.1, 0, 0, 0, 0, 0.05]))
        p2 = se3_exp(np.array([0.2, 0, 0, 0, 0, 0.10]))
        pred = constant_velocity_extrapolate(p2, p1)
        expected = se3_exp(np.array([0.3, 0, 0, 0, 0, 0.15]))
        assert pred.almost_equal(expected, tol=1e-6)

    def test_trajectory_line_is_camera_to_world(self):
        pose = se3_exp(np.array([0.5, -0.2, 0.1, 0.0, 0.0, 0.3]))
        line = format_trajectory_line(2.5, pose)
        vals = [float(v) for v in line.split()]
        assert vals[0] == 2.5
        inv = pose.inverse()
        np.testing.assert_allclose(vals[1:4], inv.translation, atol=1e-8)
        w, x, y, z = inv.rotation
        np.testing.assert_allclose(vals[4:], [x, y, z, w], atol=1e-8)
