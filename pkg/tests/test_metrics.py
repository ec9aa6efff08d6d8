"""Trajectory and image metrics.

Hand-derived cases:
  * est = gt with a 2 cm length mismatch along the connecting axis: optimal
    rigid alignment centers the residual, leaving +-1 cm -> ATE-RMSE = 1 cm
    (verified below against an independent scipy optimizer oracle);
  * constant 0.5 vs 0.0: MSE = 0.25 -> PSNR = 10*log10(4) = 6.0206 dB.
"""
from __future__ import annotations

import numpy as np
import pytest
from scipy.optimize import minimize

from splat4d.geometry import PoseSE3, se3_exp
from splat4d.metrics import (associate_trajectories, ate_rmse, format_report,
                             parse_report, psnr, ssim, umeyama_alignment)


def _traj(points, t0=0.0):
    return [(t0 + i, PoseSE3(np.array([1.0, 0, 0, 0]), -np.asarray(p, dtype=float)).inverse())
            for i, p in enumerate(points)]


def _brute_force_ate_cm(est_pts, gt_pts):
    """Independent oracle: direct minimization over a 6-dof rigid transform."""
    est_pts = np.asarray(est_pts, dtype=float)
    gt_pts = np.asarray(gt_pts, dtype=float)

    def cost(x):
        pose = se3_exp(x)
        moved = est_pts @ pose.rotation_matrix().T + pose.translation
        return np.sum((moved - gt_pts) ** 2)

    best = None
    for start in (np.zeros(6), np.full(6, 0.01), np.full(6, -0.05)):
        res = minimize(cost, start, method="Nelder-Mead",
                       options={"xatol": 1e-12, "fatol": 1e-16, "maxiter": 20000})
        if best is None or res.fun < best:
            best = res.fun
    return float(np.sqrt(best / len(est_pts)) * 100.0)


class TestAte:
    def test_identical_trajectories(self):
        traj = _traj([[0, 0, 0], [1, 0, 0], [1, 1, 0]])
        assert ate_rmse(traj, traj) == pytest.approx(0.0, abs=1e-9)

    def test_constant_offset_alignment_invariance(self):
        gt = _traj([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 1]])
        est = _traj([[0.3, -0.2, 0.5], [1.3, -0.2, 0.5], [1.3, 0.8, 0.5], [0.3, 0.8, 1.5]])
        assert ate_rmse(est, gt) == pytest.approx(0.0, abs=1e-9)

    def test_global_rigid_transform_invariance(self, rng):
        pts = rng.normal(size=(10, 3))
        gt = _traj(pts)
        rot = se3_exp(np.array([0.2, -0.1, 0.4, 0.3, 0.2, -0.5]))
        moved = pts @ rot.rotation_matrix().T + rot.translation
        est = _traj(moved)
        assert ate_rmse(est, gt) < 1e-9

    def test_two_pose_stretch_is_one_cm(self):
        gt = _traj([[0, 0, 0], [1.0, 0, 0]])
        est = _traj([[0, 0, 0], [1.02, 0, 0]])
        value = ate_rmse(est, gt)
        assert value == pytest.approx(1.0, abs=1e-6)
        oracle = _brute_force_ate_cm([[0, 0, 0], [1.02, 0, 0]], [[0, 0, 0], [1.0, 0, 0]])
        assert value == pytest.approx(oracle, abs=1e-3)

    def test_matches_optimizer_oracle_on_random(self, rng):
        gt_pts = rng.normal(size=(6, 3))
        est_pts = gt_pts + rng.normal(scale=0.02, size=(6, 3))
        ours = ate_rmse(_traj(est_pts), _traj(gt_pts))
        oracle = _brute_force_ate_cm(est_pts, gt_pts)
        assert ours == pytest.approx(oracle, rel=1e-3)

    def test_association_by_timestamp(self):
        gt = _traj([[0, 0, 0], [1, 0, 0], [2, 0, 0]])
        est = [(0.005, gt[0][1]), (1.004, gt[1][1])]
        assert len(associate_trajectories(est, gt)) == 2
        far = [(10.0, gt[0][1])]
        with pytest.raises(ValueError):
            ate_rmse(far, gt)

    def test_umeyama_recovers_known_transform(self, rng):
        src = rng.normal(size=(20, 3))
        pose = se3_exp(np.array([0.1, 0.2, -0.1, 0.3, -0.2, 0.1]))
        dst = src @ pose.rotation_matrix().T + pose.translation
        r, t = umeyama_alignment(src, dst)
        np.testing.assert_allclose(r, pose.rotation_matrix(), atol=1e-10)
        np.testing.assert_allclose(t, pose.translation, atol=1e-10)


class TestImageMetrics:
    def test_identical_images_hit_caps(self, rng):
        img = rng.uniform(size=(20, 20, 3))
        assert psnr(img, img.copy()) == 99.0
        assert ssim(img, img.copy()) == pytest.approx(1.0, abs=1e-12)

    def test_half_vs_zero_hand_value(self):
        pred = np.full((16, 16, 3), 0.5)
        target = np.zeros((16, 16, 3))
        assert psnr(pred, target) == pytest.approx(10 * np.log10(4.0), abs=1e-9)

    def test_psnr_monotone_in_noise(self, rng):
        base = rng.uniform(0.3, 0.7, size=(24, 24, 3))
        values = []
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2]:
            noisy = base + rng.normal(scale=amp, size=base.shape)
            values.append(psnr(np.clip(noisy, 0, 1), base))
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4)), np.zeros((5, 4)))

    def test_ssim_symmetric(self, rng):
        a = rng.uniform(size=(20, 20, 3))
        b = rng.uniform(size=(20, 20, 3))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_masked_psnr(self, rng):
        pred = rng.uniform(size=(10, 10, 3))
        target = pred.copy()
        target[:5] += 0.5  # corrupt the top half
        mask = np.zeros((10, 10), dtype=bool)
        mask[5:] = True
        assert psnr(pred, np.clip(target, 0, 1), mask=mask) == 99.0


class TestReport:
    def test_round_trip_and_stable_order(self):
        metrics = {"psnr_db": "31.2", "ate_cm": "0.8", "ssim": "0.93", "lpips": "n/a"}
        text = format_report(metrics)
        assert text == format_report(dict(reversed(list(metrics.items()))))
        assert parse_report(text) == metrics
        keys = [line.split(" = ")[0] for line in text.strip().splitlines()]
        assert keys == sorted(keys)
