"""Optical-flow map rendering and its full backward chain.

Hand-derived case: a dynamic Gaussian at z=1 translated by 0.1 m in x with
fx=100 and identity cameras moves 100*0.1/1 = 10 px on screen, so both flow
maps read ~(10, 0) at its footprint (after normalizing by rendered opacity,
which removes the alpha attenuation of the raw composite).
"""
from __future__ import annotations

import numpy as np

from splat4d.config import Config
from splat4d.deform import ControlPointSet, DeformNet, DeformationField
from splat4d.gaussians import GaussianSet
from splat4d.geometry import CameraIntrinsics, PoseSE3
from splat4d.render import render_flow_pair, render_set

from conftest import assert_grad_close, gradcheck_config


class _ShiftField:
    """Deformation stub: translate everything by t * velocity."""

    def __init__(self, velocity):
        self.velocity = np.asarray(velocity, dtype=np.float64)

    def deform(self, dyn, t):
        return dyn.means + t * self.velocity, dyn.rots.copy(), None


def _cam(w=40, h=32, f=100.0):
    return CameraIntrinsics(fx=f, fy=f, cx=(w - 1) / 2, cy=(h - 1) / 2, width=w, height=h)


def _single_dyn(logit=8.0):
    return GaussianSet(np.array([[0.0, 0.0, 1.0]]), np.array([[1.0, 0, 0, 0]]),
                       np.full((1, 3), np.log(0.05)), np.array([logit]),
                       np.array([[0.8, 0.2, 0.2]]), np.ones(1, dtype=bool))


class TestFlowPairSemantics:
    def test_translated_gaussian_pinhole_displacement(self):
        cam = _cam()
        cfg = Config()
        dyn = _single_dyn()
        field = _ShiftField([0.1, 0.0, 0.0])
        fwd, bwd, _ = render_flow_pair(dyn, field, t_prev=0.0, t_cur=1.0,
                                       pose_prev=PoseSE3.identity(),
                                       pose_cur=PoseSE3.identity(), cam=cam, cfg=cfg)
        # normalize the composite by rendered opacity at the footprint
        out_cur = render_set(dyn, PoseSE3.identity(), cam, cfg,
                             means=dyn.means + field.velocity)
        out_prev = render_set(dyn, PoseSE3.identity(), cam, cfg)
        for flow, out in ((bwd, out_cur), (fwd, out_prev)):
            sel = out.opacity > 0.9
            assert sel.any()
            u = flow[:, :, 0][sel] / out.opacity[sel]
            v = flow[:, :, 1][sel] / out.opacity[sel]
            np.testing.assert_allclose(u, 10.0, atol=1e-4)
            np.testing.assert_allclose(v, 0.0, atol=1e-4)

    def test_identity_deformation_zero_flow(self):
        cam = _cam()
        dyn = _single_dyn()
        fwd, bwd, _ = render_flow_pair(dyn, _ShiftField([0, 0, 0]), 0.0, 1.0,
                                       PoseSE3.identity(), PoseSE3.identity(),
                                       cam, Config())
        assert np.all(fwd == 0.0) and np.all(bwd == 0.0)

    def test_negating_translation_negates_flow(self):
        cam = _cam()
        dyn = _single_dyn()
        args = (0.0, 1.0, PoseSE3.identity(), PoseSE3.identity(), cam, Config())
        fwd_p, bwd_p, _ = render_flow_pair(dyn, _ShiftField([0.05, -0.02, 0]), *args)
        fwd_n, bwd_n, _ = render_flow_pair(dyn, _ShiftField([-0.05, 0.02, 0]), *args)
        # same displacement magnitude but opposite sign; footprints differ
        # slightly, so compare at the shared center pixel
        cy, cx = cam.height // 2, cam.width // 2
        np.testing.assert_allclose(fwd_p[cy, cx], -fwd_n[cy, cx], atol=1e-6)

    def test_empty_dynamic_set_zero_maps(self):
        cam = _cam()
        dyn = GaussianSet()
        field = DeformationField(ControlPointSet.empty(), DeformNet(hidden=8), 4)
        fwd, bwd, caches = render_flow_pair(dyn, field, 0.0, 1.0, PoseSE3.identity(),
                                            PoseSE3.identity(), cam, Config())
        assert caches is None
        assert fwd.shape == (cam.height, cam.width, 2)
        assert np.all(fwd == 0.0) and np.all(bwd == 0.0)

    def test_static_only_scene_zero_flow_channel(self, rng):
        from conftest import random_scene, toy_camera
        cam = toy_camera()
        gs = random_scene(rng, 10, cam)
        out = render_set(gs, PoseSE3.identity(), cam, Config())
        assert np.all(out.flow == 0.0)


class TestFlowChainGradients:
    """FD check of the mapper's full flow-supervision backward: loss ->
    flow maps -> both deformed configurations -> MLP/control points/canonical
    Gaussians and both camera twists."""

    def _setup(self, seed=0):
        rng = np.random.default_rng(seed)
        cam = _cam(24, 20, f=60.0)
        cfg = gradcheck_config(knn_k=3)
        n = 4
        means = np.array([[0.0, 0.0, 1.0]]) + rng.normal(scale=0.08, size=(n, 3))
        rots = rng.normal(size=(n, 4))
        rots /= np.linalg.norm(rots, axis=1, keepdims=True)
        dyn = GaussianSet(means, rots, np.full((n, 3), np.log(0.06)),
                          rng.uniform(0.0, 1.5, n), rng.uniform(0.2, 0.8, (n, 3)),
                          np.ones(n, dtype=bool))
        control = ControlPointSet(means[:3] + rng.normal(scale=0.05, size=(3, 3)),
                                  np.full(3, np.log(0.3)))
        net = DeformNet(hidden=8, seed=seed)
        flat = net.get_flat()
        net.set_flat(flat + rng.normal(scale=0.25, size=flat.size))
        field = DeformationField(control, net, 3)
        field.bind(dyn.means)
        prov_f = rng.normal(scale=2.0, size=(cam.height, cam.width, 2))
        prov_b = rng.normal(scale=2.0, size=(cam.height, cam.width, 2))
        mask = rng.uniform(size=(cam.height, cam.width)) > 0.4
        pose_prev = PoseSE3.identity()
        pose_cur = PoseSE3(np.array([1.0, 0, 0.01, 0]), np.array([0.01, 0.0, 0.0]))
        return cam, cfg, dyn, field, prov_f, prov_b, mask, pose_prev, pose_cur

    def _loss(self, cam, cfg, dyn, field, prov_f, prov_b, mask, pose_prev, pose_cur):
        from splat4d.losses import flow_loss
        fwd, bwd, _ = render_flow_pair(dyn, field, 0.2, 0.7, pose_prev, pose_cur,
                                       cam, cfg)
        value, _, _ = flow_loss(fwd, bwd, prov_f, prov_b, mask)
        return value

    def _analytic(self, cam, cfg, dyn, field, prov_f, prov_b, mask, pose_prev, pose_cur):
        from splat4d.losses import flow_loss
        from splat4d.render import render_flow_map, render_flow_map_backward

        m_prev, r_prev, c_prev = field.deform(dyn, 0.2)
        m_cur, r_cur, c_cur = field.deform(dyn, 0.7)
        bwd, bwd_cache = render_flow_map(m_cur, r_cur, m_prev, dyn, pose_cur, cam, cfg, True)
        fwd, fwd_cache = render_flow_map(m_prev, r_prev, m_cur, dyn, pose_prev, cam, cfg, False)
        value, adj_f, adj_b = flow_loss(fwd, bwd, prov_f, prov_b, mask)
        gb = render_flow_map_backward(bwd_cache, cfg, adj_b, True)
        gf = render_flow_map_backward(fwd_cache, cfg, adj_f, False)
        out = {"net": np.zeros(field.net.n_params()),
               "cp": np.zeros_like(field.control.positions),
               "radii": np.zeros_like(field.control.log_radii),
               "means": np.zeros_like(dyn.means), "rots": np.zeros_like(dyn.rots),
               "log_scales": gb["log_scales"] + gf["log_scales"],
               "logits": gb["opacity_logits"] + gf["opacity_logits"],
               "twist_cur": gb["pose_twist"], "twist_prev": gf["pose_twist"]}
        for cache, d_m, d_r in ((c_cur, gb["means_cur"] + gf["means_cur"],
                                 gb["rots_cur"] + gf["rots_cur"]),
                                (c_prev, gb["means_prev"] + gf["means_prev"],
                                 gb["rots_prev"] + gf["rots_prev"])):
            dg = field.deform_backward(cache, d_m, d_r)
            out["net"] += dg.net_flat
            out["cp"] += dg.control_positions
            out["radii"] += dg.control_log_radii
            out["means"] += dg.dyn_means
            out["rots"] += dg.dyn_rots
        return value, out

    def test_full_chain_matches_fd(self):
        from conftest import fd_gradient
        args = self._setup(0)
        cam, cfg, dyn, field, prov_f, prov_b, mask, pose_prev, pose_cur = args
        value, grads = self._analytic(*args)
        assert value > 0.1

        def f_net(flat):
            field.net.set_flat(flat)
            return self._loss(*args)

        fd = fd_gradient(f_net, field.net.get_flat(), h=1e-5)
        assert_grad_close(grads["net"], fd, context="flow->net")

        def f_cp(x):
            field.control.positions = x
            return self._loss(*args)

        x0 = field.control.positions.copy()
        fd = fd_gradient(f_cp, x0, h=1e-5)
        field.control.positions = x0
        assert_grad_close(grads["cp"], fd, context="flow->control points")

        def f_means(x):
            dyn.means = x
            field.bind(x)  # canonical neighbors track the canonical means
            return self._loss(*args)

        # neighbors are fixed in canonical space; keep them pinned during FD
        nb = field.neighbors.copy()

        def f_means_pinned(x):
            dyn.means = x
            field.neighbors = nb
            return self._loss(*args)

        m0 = dyn.means.copy()
        fd = fd_gradient(f_means_pinned, m0, h=1e-5)
        dyn.means = m0
        assert_grad_close(grads["means"], fd, context="flow->canonical means")

        def f_logits(x):
            dyn.opacity_logits = x
            return self._loss(*args)

        l0 = dyn.opacity_logits.copy()
        fd = fd_gradient(f_logits, l0, h=1e-5)
        dyn.opacity_logits = l0
        assert_grad_close(grads["logits"], fd, context="flow->opacity")

    def test_camera_twist_matches_fd(self):
        from conftest import fd_gradient
        from splat4d.geometry import se3_exp
        args = self._setup(1)
        cam, cfg, dyn, field, prov_f, prov_b, mask, pose_prev, pose_cur = args
        _, grads = self._analytic(*args)

        def f_cur(eps):
            return self._loss(cam, cfg, dyn, field, prov_f, prov_b, mask,
                              pose_prev, se3_exp(eps).compose(pose_cur))

        fd = fd_gradient(f_cur, np.zeros(6), h=1e-6)
        assert_grad_close(grads["twist_cur"], fd, context="flow->cur twist")

        def f_prev(eps):
            return self._loss(cam, cfg, dyn, field, prov_f, prov_b, mask,
                              se3_exp(eps).compose(pose_prev), pose_cur)

        fd = fd_gradient(f_prev, np.zeros(6), h=1e-6)
        assert_grad_close(grads["twist_prev"], fd, context="flow->prev twist")
