"""Pure-numpy compositing kernels (fallback backend).

Gaussians arrive depth-sorted front-to-back; because the per-Gaussian depth
is constant across pixels, per-pixel compositing order equals the global
order restricted to covering footprints. The forward sweeps Gaussians
front-to-back updating a running transmittance image; the backward replays
that sweep, then walks it in reverse with per-pixel suffix accumulators so
no division by (1 - alpha) is ever needed.
"""
from __future__ import annotations

import numpy as np


def _footprint(mean2d, conic, rect, i):
    x0, y0, x1, y1 = rect[i]
    xs = np.arange(x0, x1 + 1, dtype=np.float64)
    ys = np.arange(y0, y1 + 1, dtype=np.float64)
    dx = xs[None, :] - mean2d[i, 0]
    dy = ys[:, None] - mean2d[i, 1]
    q = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
    return np.exp(-0.5 * q), dx, dy


def forward(mean2d, conic, alpha, color, depth, flow, rect, offsets, cand,
            height, width, tile, t_min, alpha_max):
    m = mean2d.shape[0]
    color_img = np.zeros((height, width, 3))
    depth_img = np.zeros((height, width))
    trans_img = np.ones((height, width))
    flow_img = np.zeros((height, width, 2))
    touched = np.zeros(m, dtype=bool)
    for i in range(m):
        x0, y0, x1, y1 = rect[i]
        win = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        t_sub = trans_img[win]
        alive = t_sub >= t_min
        if not alive.any():
            continue
        g, _, _ = _footprint(mean2d, conic, rect, i)
        al = np.minimum(alpha[i] * g, alpha_max)
        w = np.where(alive, al * t_sub, 0.0)
        color_img[win] += w[:, :, None] * color[i]
        depth_img[win] += w * depth[i]
        flow_img[win] += w[:, :, None] * flow[i]
        trans_img[win] = np.where(alive, t_sub * (1.0 - al), t_sub)
        touched[i] = bool(np.any(alive & (al > 0.01)))
    return color_img, depth_img, trans_img, flow_img, touched


def backward(mean2d, conic, alpha, color, depth, flow, rect, offsets, cand,
             height, width, tile, t_min, alpha_max,
             g_color, g_depth, g_opacity, g_flow):
    m = mean2d.shape[0]
    d_mean2d = np.zeros((m, 2))
    d_conic = np.zeros((m, 3))
    d_alpha = np.zeros(m)
    d_color = np.zeros((m, 3))
    d_depth = np.zeros(m)
    d_flow = np.zeros((m, 2))

    # pass 1: replay the forward, keeping per-Gaussian footprint slabs
    trans_img = np.ones((height, width))
    slabs = []
    for i in range(m):
        x0, y0, x1, y1 = rect[i]
        win = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        t_sub = trans_img[win]
        alive = t_sub >= t_min
        g, dx, dy = _footprint(mean2d, conic, rect, i)
        al = np.minimum(alpha[i] * g, alpha_max)
        slabs.append((g, t_sub.copy(), alive))
        trans_img[win] = np.where(alive, t_sub * (1.0 - al), t_sub)

    # pass 2: reverse sweep with suffix accumulators per channel
    acc_c = np.zeros((height, width, 3))
    acc_d = np.zeros((height, width))
    acc_o = np.zeros((height, width))
    acc_f = np.zeros((height, width, 2))
    for i in range(m - 1, -1, -1):
        x0, y0, x1, y1 = rect[i]
        win = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        g, t_sub, alive = slabs[i]
        raw = alpha[i] * g
        clamped = raw > alpha_max
        al = np.where(clamped, alpha_max, raw)
        live = np.where(alive, 1.0, 0.0)
        w = al * t_sub * live

        gc = g_color[win]
        gd = g_depth[win]
        go = g_opacity[win]
        gf = g_flow[win]
        d_color[i] = np.einsum("hw,hwc->c", w, gc)
        d_depth[i] = np.sum(w * gd)
        d_flow[i] = np.einsum("hw,hwc->c", w, gf)

        d_al = (np.einsum("hwc,hwc->hw", gc, color[i] - acc_c[win])
                + gd * (depth[i] - acc_d[win])
                + go * (1.0 - acc_o[win])
                + np.einsum("hwc,hwc->hw", gf, flow[i] - acc_f[win])) * t_sub * live
        open_mask = np.where(clamped, 0.0, 1.0)
        d_alpha[i] = np.sum(d_al * g * open_mask)
        dg = d_al * alpha[i] * open_mask
        _, dx, dy = _footprint(mean2d, conic, rect, i)
        qa = conic[i, 0] * dx + conic[i, 1] * dy
        qb = conic[i, 1] * dx + conic[i, 2] * dy
        d_mean2d[i, 0] = np.sum(dg * g * qa)
        d_mean2d[i, 1] = np.sum(dg * g * qb)
        d_conic[i, 0] = np.sum(-0.5 * dg * g * dx * dx)
        d_conic[i, 1] = np.sum(-dg * g * dx * dy)
        d_conic[i, 2] = np.sum(-0.5 * dg * g * dy * dy)

        upd = (al * live)[:, :, None]
        acc_c[win] = upd * color[i] + (1.0 - upd) * acc_c[win]
        acc_f[win] = upd * flow[i] + (1.0 - upd) * acc_f[win]
        upd2 = al * live
        acc_d[win] = upd2 * depth[i] + (1.0 - upd2) * acc_d[win]
        acc_o[win] = upd2 + (1.0 - upd2) * acc_o[win]
    return d_mean2d, d_conic, d_alpha, d_color, d_depth, d_flow
