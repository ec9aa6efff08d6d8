"""Loss terms: masked L1, structural dissimilarity, scale-isotropy,
flow supervision, and the weighted mapping / refinement combinations.

Every loss returns its scalar value together with the adjoint(s) needed to
continue backpropagation; all adjoints are finite-difference-checked.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .config import Config

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


# ---------------------------------------------------------------------------
# masked L1
# ---------------------------------------------------------------------------

def masked_l1(pred: np.ndarray, target: np.ndarray, mask: np.ndarray,
              weight_map: np.ndarray | None = None):
    """Mean absolute error over mask-true pixels, optionally weighted.

    The denominator is the unweighted pixel count, so a weight map scales
    individual pixels' contributions without renormalizing the rest.
    Returns (value, adjoint w.r.t. pred); empty mask -> (0, zeros).
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        return 0.0, np.zeros_like(pred)
    diff = pred - target
    per_channel = pred.ndim == 3
    w = np.ones(mask.shape) if weight_map is None else np.asarray(weight_map, dtype=np.float64)
    w = np.where(mask, w, 0.0)
    channels = pred.shape[2] if per_channel else 1
    if per_channel:
        value = float(np.sum(w[:, :, None] * np.abs(diff)) / (count * channels))
        adj = np.sign(diff) * w[:, :, None] / (count * channels)
    else:
        value = float(np.sum(w * np.abs(diff)) / count)
        adj = np.sign(diff) * w / count
    return value, adj


# ---------------------------------------------------------------------------
# D-SSIM
# ---------------------------------------------------------------------------

def _gaussian_kernel(win: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (win - 1) / 2.0
    x = np.arange(win) - half
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


_KERNEL = _gaussian_kernel()
_PAD = (SSIM_WIN - 1) // 2


def _blur_valid(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian filtering, valid region only."""
    out = ndimage.correlate1d(img, _KERNEL, axis=0, mode="constant")
    out = ndimage.correlate1d(out, _KERNEL, axis=1, mode="constant")
    return out[_PAD:-_PAD, _PAD:-_PAD]


def _blur_adjoint(grad_valid: np.ndarray, shape) -> np.ndarray:
    """Adjoint of _blur_valid (the kernel is symmetric)."""
    full = np.zeros(shape)
    full[_PAD:-_PAD, _PAD:-_PAD] = grad_valid
    out = ndimage.correlate1d(full, _KERNEL, axis=0, mode="constant")
    return ndimage.correlate1d(out, _KERNEL, axis=1, mode="constant")


def _ssim_channel(x: np.ndarray, y: np.ndarray):
    mu_x = _blur_valid(x)
    mu_y = _blur_valid(y)
    var_x = _blur_valid(x * x) - mu_x ** 2
    var_y = _blur_valid(y * y) - mu_y ** 2
    cov = _blur_valid(x * y) - mu_x * mu_y
    lum = (2 * mu_x * mu_y + SSIM_C1) / (mu_x ** 2 + mu_y ** 2 + SSIM_C1)
    struct = (2 * cov + SSIM_C2) / (var_x + var_y + SSIM_C2)
    return lum * struct, (mu_x, mu_y, var_x, var_y, cov, lum, struct)

def _ssim_channel_backward(x, y, cache, d_map):
    mu_x, mu_y, var_x, var_y, cov, lum, struct = cache
    denom_l = mu_x ** 2 + mu_y ** 2 + SSIM_C1
    denom_s = var_x + var_y + SSIM_C2
    d_lum = d_map * struct
    d_struct = d_map * lum
    d_mu_x = d_lum * (2 * mu_y * denom_l - (2 * mu_x * mu_y + SSIM_C1) * 2 * mu_x) / denom_l ** 2
    d_var_x = d_struct * (-(2 * cov + SSIM_C2) / denom_s ** 2)
    d_cov = d_struct * 2 / denom_s
    # var_x = blur(x^2) - mu_x^2, cov = blur(xy) - mu_x mu_y
    d_mu_x = d_mu_x - 2 * mu_x * d_var_x - mu_y * d_cov
    shape = x.shape
    return (_blur_adjoint(d_mu_x, shape) + 2 * x * _blur_adjoint(d_var_x, shape)
            + y * _blur_adjoint(d_cov, shape))


def _ssim_global(x, y):
    mu_x, mu_y = x.mean(), y.mean()
    var_x, var_y = x.var(), y.var()
    cov = float(np.mean((x - mu_x) * (y - mu_y)))
    lum = (2 * mu_x * mu_y + SSIM_C1) / (mu_x ** 2 + mu_y ** 2 + SSIM_C1)
    struct = (2 * cov + SSIM_C2) / (var_x + var_y + SSIM_C2)
    return lum * struct, (mu_x, mu_y, var_x, var_y, cov, lum, struct)


def _ssim_global_backward(x, y, cache, d_val):
    mu_x, mu_y, var_x, var_y, cov, lum, struct = cache
    n = x.size
    denom_l = mu_x ** 2 + mu_y ** 2 + SSIM_C1
    denom_s = var_x + var_y + SSIM_C2
    d_mu_x = d_val * struct * (2 * mu_y * denom_l - (2 * mu_x * mu_y + SSIM_C1) * 2 * mu_x) / denom_l ** 2
    d_var_x = d_val * lum * (-(2 * cov + SSIM_C2) / denom_s ** 2)
    d_cov = d_val * lum * 2 / denom_s
    return (d_mu_x / n + d_var_x * 2 * (x - mu_x) / n + d_cov * (y - mu_y) / n)


def ssim(pred: np.ndarray, target: np.ndarray):
    """Mean SSIM over channels; returns (value, adjoint w.r.t. pred).

    Uses an 11x11 Gaussian window (sigma 1.5) averaged over the interior
    region; images smaller than the window fall back to global statistics.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("shape mismatch")
    if pred.ndim == 2:
        pred = pred[:, :, None]
        target = target[:, :, None]
        squeeze = True
    else:
        squeeze = False
    h, w, c = pred.shape
    adj = np.zeros_like(pred)
    total = 0.0
    if min(h, w) < SSIM_WIN:
        for ch in range(c):
            val, cache = _ssim_global(pred[:, :, ch], target[:, :, ch])
            total += val
            adj[:, :, ch] = _ssim_global_backward(pred[:, :, ch], target[:, :, ch], cache, 1.0 / c)
    else:
        n_valid = (h - SSIM_WIN + 1) * (w - SSIM_WIN + 1)
        for ch in range(c):
            smap, cache = _ssim_channel(pred[:, :, ch], target[:, :, ch])
            total += float(smap.mean())
            d_map = np.full(smap.shape, 1.0 / (n_valid * c))
            adj[:, :, ch] = _ssim_channel_backward(pred[:, :, ch], target[:, :, ch], cache, d_map)
    value = total / c
    if squeeze:
        adj = adj[:, :, 0]
    return value, adj


def d_ssim(pred: np.ndarray, target: np.ndarray):
    """Structural dissimilarity (1 - SSIM)/2 in [0, 1], with adjoint."""
    value, adj = ssim(pred, target)
    return (1.0 - value) / 2.0, -0.5 * adj


# ---------------------------------------------------------------------------
# scale isotropy
# ---------------------------------------------------------------------------

def iso_loss(log_scales: np.ndarray):
    """Sum over Gaussians of |scales - their own mean scale|_1.

    Penalizes needle-like ellipsoids; returns (value, d/d log_scales).
    """
    log_scales = np.asarray(log_scales, dtype=np.float64).reshape(-1, 3)
    s = np.exp(log_scales)
    centered = s - s.mean(axis=1, keepdims=True)
    value = float(np.sum(np.abs(centered)))
    sign = np.sign(centered)
    d_s = sign - sign.mean(axis=1, keepdims=True)
    return value, d_s * s


# ---------------------------------------------------------------------------
# flow supervision
# ---------------------------------------------------------------------------

def flow_loss(rendered_fwd, rendered_bwd, provider_fwd, provider_bwd,
              mask, mask_fwd=None):
    """L1 between rendered and provider flow pairs inside the supervision mask.

    ``mask`` marks pixels to supervise (the motion region); ``mask_fwd``
    overrides it for the forward map when the two cameras' masks differ.
    Returns (value, adjoint_fwd, adjoint_bwd).
    """
    l_bwd, adj_bwd = masked_l1(rendered_bwd, provider_bwd, mask)
    l_fwd, adj_fwd = masked_l1(rendered_fwd, provider_fwd,
                               mask if mask_fwd is None else mask_fwd)
    return l_bwd + l_fwd, adj_fwd, adj_bwd


# ---------------------------------------------------------------------------
# weighted combinations
# ---------------------------------------------------------------------------

def combine_mapping_terms(l1_color: float, l1_depth: float, flow: float,
                          arap: float, iso: float, cfg: Config) -> float:
    lam = cfg.lambda_color
    return (lam * l1_color + (1.0 - lam) * l1_depth + cfg.lambda_flow * flow
            + cfg.w1_arap * arap + cfg.w2_iso * iso)


def combine_refinement_terms(dssim: float, l1_color: float, l1_depth: float,
                             arap: float, iso: float, cfg: Config) -> float:
    return (0.2 * dssim + 0.8 * l1_color + 0.1 * l1_depth
            + cfg.w1_arap * arap + cfg.w2_iso * iso)


def depth_supervision_mask(depth_gt: np.ndarray) -> np.ndarray:
    """Mapping-side depth gate: valid ground truth only. The rendered-opacity
    gate belongs to tracking; applied during mapping it starves a young map
    of the very signal that saturates its opacity."""
    return depth_gt > 0


def mapping_loss(color_pred, depth_pred, opacity, color_gt, depth_gt, dyn_region,
                 flow_value, arap_value, iso_value, cfg: Config, stage: int,
                 depth_mask=None, valid_mask=None):
    """Weighted mapping objective over one keyframe's render.

    Stage 1 doubles the photometric/geometric weight inside the motion
    region; the depth term covers pixels with valid ground truth.
    ``depth_mask`` pins the gate (used by finite-difference tests);
    ``valid_mask`` restricts supervision, e.g. excluding motion regions
    while no dynamic model exists yet.

    Returns (total, parts) where parts carries the per-channel adjoints and
    the weights to route into flow/arap/iso gradients.
    """
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    h, w = depth_pred.shape
    dyn_region = np.asarray(dyn_region, dtype=bool)
    weight_map = np.ones((h, w)) + (dyn_region if stage == 1 else 0.0)
    full = np.ones((h, w), dtype=bool)
    if valid_mask is not None:
        full = full & np.asarray(valid_mask, dtype=bool)
    if depth_mask is None:
        depth_mask = depth_supervision_mask(depth_gt)
        if valid_mask is not None:
            depth_mask = depth_mask & np.asarray(valid_mask, dtype=bool)
    l1c, adj_c = masked_l1(color_pred, color_gt, full, weight_map)
    l1d, adj_d = masked_l1(depth_pred, depth_gt, depth_mask, weight_map)
    total = combine_mapping_terms(l1c, l1d, flow_value, arap_value, iso_value, cfg)
    lam = cfg.lambda_color
    parts = {
        "l1_color": l1c, "l1_depth": l1d,
        "g_color": lam * adj_c, "g_depth": (1.0 - lam) * adj_d,
        "flow_weight": cfg.lambda_flow, "arap_weight": cfg.w1_arap,
        "iso_weight": cfg.w2_iso,
    }
    return total, parts


def refinement_loss(color_pred, depth_pred, opacity, color_gt, depth_gt,
                    arap_value, iso_value, cfg: Config, depth_mask=None):
    """Global color-refinement objective (D-SSIM + photometric + geometric)."""
    h, w = depth_pred.shape
    full = np.ones((h, w), dtype=bool)
    if depth_mask is None:
        depth_mask = depth_supervision_mask(depth_gt)
    dssim_val, dssim_adj = d_ssim(color_pred, color_gt)
    l1c, adj_c = masked_l1(color_pred, color_gt, full)
    l1d, adj_d = masked_l1(depth_pred, depth_gt, depth_mask)
    total = combine_refinement_terms(dssim_val, l1c, l1d, arap_value, iso_value, cfg)
    parts = {
        "dssim": dssim_val, "l1_color": l1c, "l1_depth": l1d,
        "g_color": 0.2 * dssim_adj + 0.8 * adj_c, "g_depth": 0.1 * adj_d,
        "arap_weight": cfg.w1_arap, "iso_weight": cfg.w2_iso,
    }
    return total, parts
