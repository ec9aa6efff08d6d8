"""Numba-jitted compositing kernels (default backend).

Work is tiled: every pixel belongs to exactly one tile, forward outputs are
pixel-owned, and backward gradients accumulate into per-incidence slots of
the tile candidate lists, merged serially in fixed order afterwards. That
keeps results bit-identical across thread counts and runs.
"""
from __future__ import annotations

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True, fastmath=False)
def forward(mean2d, conic, alpha, color, depth, flow, rect, offsets, cand,
            height, width, tile, t_min, alpha_max):
    n_tx = (width + tile - 1) // tile
    n_ty = (height + tile - 1) // tile
    n_tiles = n_tx * n_ty
    m = mean2d.shape[0]
    color_img = np.zeros((height, width, 3))
    depth_img = np.zeros((height, width))
    trans_img = np.ones((height, width))
    flow_img = np.zeros((height, width, 2))
    touched_part = np.zeros(cand.shape[0], dtype=np.uint8)

    for t in prange(n_tiles):
        s0 = offsets[t]
        s1 = offsets[t + 1]
        if s1 == s0:
            continue
        ty = t // n_tx
        tx = t % n_tx
        y_end = min((ty + 1) * tile, height)
        x_end = min((tx + 1) * tile, width)
        for py in range(ty * tile, y_end):
            fy = float(py)
            for px in range(tx * tile, x_end):
                fx = float(px)
                trans = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                d = 0.0
                f0 = 0.0
                f1 = 0.0
                for s in range(s0, s1):
                    if trans < t_min:
                        break
                    i = cand[s]
                    if px < rect[i, 0] or px > rect[i, 2] or py < rect[i, 1] or py > rect[i, 3]:
                        continue
                    dx = fx - mean2d[i, 0]
                    dy = fy - mean2d[i, 1]
                    q = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
                    g = np.exp(-0.5 * q)
                    al = alpha[i] * g
                    if al > alpha_max:
                        al = alpha_max
                    w = al * trans
                    c0 += w * color[i, 0]
                    c1 += w * color[i, 1]
                    c2 += w * color[i, 2]
                    d += w * depth[i]
                    f0 += w * flow[i, 0]
                    f1 += w * flow[i, 1]
                    trans *= 1.0 - al
                    if al > 0.01:
                        touched_part[s] = 1
                color_img[py, px, 0] = c0
                color_img[py, px, 1] = c1
                color_img[py, px, 2] = c2
                depth_img[py, px] = d
                flow_img[py, px, 0] = f0
                flow_img[py, px, 1] = f1
                trans_img[py, px] = trans

    touched = np.zeros(m, dtype=np.bool_)
    for s in range(cand.shape[0]):
        if touched_part[s]:
            touched[cand[s]] = True
    return color_img, depth_img, trans_img, flow_img, touched


@njit(cache=True, parallel=True, fastmath=False)
def backward(mean2d, conic, alpha, color, depth, flow, rect, offsets, cand,
             height, width, tile, t_min, alpha_max,
             g_color, g_depth, g_opacity, g_flow):
    n_tx = (width + tile - 1) // tile
    n_ty = (height + tile - 1) // tile
    n_tiles = n_tx * n_ty
    m = mean2d.shape[0]
    k_total = cand.shape[0]
    # per-incidence partials: du, dv, dca, dcb, dcc, dr, dg_, db, dd, df0, df1, dal
    part = np.zeros((k_total, 12))

    for t in prange(n_tiles):
        s0 = offsets[t]
        s1 = offsets[t + 1]
        if s1 == s0:
            continue
        n_list = s1 - s0
        sl_slot = np.empty(n_list, dtype=np.int64)
        sl_g = np.empty(n_list)
        sl_t = np.empty(n_list)
        ty = t // n_tx
        tx = t % n_tx
        y_end = min((ty + 1) * tile, height)
        x_end = min((tx + 1) * tile, width)
        for py in range(ty * tile, y_end):
            fy = float(py)
            for px in range(tx * tile, x_end):
                fx = float(px)
                # replay the forward to recover (slot, gaussian weight, transmittance)
                trans = 1.0
                cnt = 0
                for s in range(s0, s1):
                    if trans < t_min:
                        break
                    i = cand[s]
                    if px < rect[i, 0] or px > rect[i, 2] or py < rect[i, 1] or py > rect[i, 3]:
                        continue
                    dx = fx - mean2d[i, 0]
                    dy = fy - mean2d[i, 1]
                    q = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
                    g = np.exp(-0.5 * q)
                    al = alpha[i] * g
                    if al > alpha_max:
                        al = alpha_max
                    sl_slot[cnt] = s
                    sl_g[cnt] = g
                    sl_t[cnt] = trans
                    cnt += 1
                    trans *= 1.0 - al
                if cnt == 0:
                    continue
                gc0 = g_color[py, px, 0]
                gc1 = g_color[py, px, 1]
                gc2 = g_color[py, px, 2]
                gd = g_depth[py, px]
                go = g_opacity[py, px]
                gf0 = g_flow[py, px, 0]
                gf1 = g_flow[py, px, 1]
                # reverse sweep with suffix accumulators (no 1/(1-al) division)
                ac0 = 0.0
                ac1 = 0.0
                ac2 = 0.0
                ad = 0.0
                ao = 0.0
                af0 = 0.0
                af1 = 0.0
                for kk in range(cnt - 1, -1, -1):
                    s = sl_slot[kk]
                    i = cand[s]
                    g = sl_g[kk]
                    ti = sl_t[kk]
                    raw = alpha[i] * g
                    clamped = raw > alpha_max
                    al = alpha_max if clamped else raw
                    w = al * ti
                    part[s, 5] += w * gc0
                    part[s, 6] += w * gc1
                    part[s, 7] += w * gc2
                    part[s, 8] += w * gd
                    part[s, 9] += w * gf0
                    part[s, 10] += w * gf1
                    d_al = (gc0 * (color[i, 0] - ac0) + gc1 * (color[i, 1] - ac1)
                            + gc2 * (color[i, 2] - ac2) + gd * (depth[i] - ad)
                            + go * (1.0 - ao) + gf0 * (flow[i, 0] - af0)
                            + gf1 * (flow[i, 1] - af1)) * ti
                    if not clamped:
                        part[s, 11] += d_al * g
                        dgg = d_al * alpha[i] * g
                        dx = fx - mean2d[i, 0]
                        dy = fy - mean2d[i, 1]
                        qa = conic[i, 0] * dx + conic[i, 1] * dy
                        qb = conic[i, 1] * dx + conic[i, 2] * dy
                        part[s, 0] += dgg * qa
                        part[s, 1] += dgg * qb
                        part[s, 2] += -0.5 * dgg * dx * dx
                        part[s, 3] += -dgg * dx * dy
                        part[s, 4] += -0.5 * dgg * dy * dy
                    ac0 = al * color[i, 0] + (1.0 - al) * ac0
                    ac1 = al * color[i, 1] + (1.0 - al) * ac1
                    ac2 = al * color[i, 2] + (1.0 - al) * ac2
                    ad = al * depth[i] + (1.0 - al) * ad
                    ao = al + (1.0 - al) * ao
                    af0 = al * flow[i, 0] + (1.0 - al) * af0
                    af1 = al * flow[i, 1] + (1.0 - al) * af1

    # deterministic merge: fixed tile order, ascending slots
    d_mean2d = np.zeros((m, 2))
    d_conic = np.zeros((m, 3))
    d_alpha = np.zeros(m)
    d_color = np.zeros((m, 3))
    d_depth = np.zeros(m)
    d_flow = np.zeros((m, 2))
    for s in range(k_total):
        i = cand[s]
        d_mean2d[i, 0] += part[s, 0]
        d_mean2d[i, 1] += part[s, 1]
        d_conic[i, 0] += part[s, 2]
        d_conic[i, 1] += part[s, 3]
        d_conic[i, 2] += part[s, 4]
        d_color[i, 0] += part[s, 5]
        d_color[i, 1] += part[s, 6]
        d_color[i, 2] += part[s, 7]
        d_depth[i] += part[s, 8]
        d_flow[i, 0] += part[s, 9]
        d_flow[i, 1] += part[s, 10]
        d_alpha[i] += part[s, 11]
    return d_mean2d, d_conic, d_alpha, d_color, d_depth, d_flow
