"""Shared helpers: finite-difference oracle and random scene builders.

The FD oracle is the independent reference for every analytic gradient in
the package. Gradient-check scenes use an untruncated rasterizer config
(no footprint cutoff, no early termination) so the rendered loss is smooth
in every parameter; production truncation is validated separately against
the exact path.
"""
from __future__ import annotations

import numpy as np
import pytest

from splat4d.config import Config
from splat4d.gaussians import GaussianSet
from splat4d.geometry import CameraIntrinsics


def fd_gradient(f, x, h=1e-4):
    """Central finite differences of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def fd_gradient_indices(f, x, indices, h=1e-4):
    """Central finite differences at selected flat indices only."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.zeros(len(indices))
    for k, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        out[k] = (fp - fm) / (2.0 * h)
    return out


def assert_grad_close(analytic, numeric, rel_tol=1e-3, abs_floor=1e-6, context=""):
    """Relative comparison with an absolute floor for near-zero gradients."""
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.abs(numeric), abs_floor)
    err = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(err))
    assert err.max() < rel_tol, (
        f"{context}: rel err {err.max():.3e} at flat index {worst} "
        f"(analytic={analytic[worst]:.6e}, fd={numeric[worst]:.6e})")


def gradcheck_config(**overrides) -> Config:
    """Rasterizer config without truncation kinks, for FD comparisons."""
    base = dict(cutoff_sigma=0.0, transmittance_min=0.0)
    base.update(overrides)
    return Config(**base)


def toy_camera(width=32, height=32, f=40.0) -> CameraIntrinsics:
    return CameraIntrinsics(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                            width=width, height=height)


def random_scene(rng: np.random.Generator, n: int, cam: CameraIntrinsics,
                 z_range=(1.5, 3.5), dynamic_fraction=0.0) -> GaussianSet:
    """Random Gaussians filling the view frustum with moderate opacities.

    Opacity logits stay in [-2, 2] so the per-pixel alpha clamp never binds
    and FD perturbations stay within smooth regions.
    """
    z = rng.uniform(*z_range, size=n)
    half_w = (cam.width / (2 * cam.fx)) * z * 0.8
    half_h = (cam.height / (2 * cam.fy)) * z * 0.8
    means = np.stack([rng.uniform(-1, 1, n) * half_w,
                      rng.uniform(-1, 1, n) * half_h,
                      z], axis=1)
    rots = rng.normal(size=(n, 4))
    rots /= np.linalg.norm(rots, axis=1, keepdims=True)
    log_scales = rng.uniform(np.log(0.05), np.log(0.25), size=(n, 3))
    logits = rng.uniform(-2.0, 2.0, size=n)
    colors = rng.uniform(0.1, 0.9, size=(n, 3))
    dy = rng.uniform(size=n) < dynamic_fraction
    return GaussianSet(means, rots, log_scales, logits, colors, dy)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
