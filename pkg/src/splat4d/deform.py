"""Sparse-control-point deformation field for the dynamic Gaussians.

A small MLP maps (control point, time) to a 6-DoF transform (axis-angle +
translation); each dynamic Gaussian blends its K nearest control points'
transforms with normalized Gaussian-RBF weights (linear blend skinning).
Neighbor indices are fixed in the canonical space where the dynamic
Gaussians were initialized; weights are recomputed from the current
(learnable) control positions and radii. All backward passes are manual
and verified against finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussians import GaussianSet
from .geometry import (CameraIntrinsics, PoseSE3, backproject_pixels,
                       quats_to_rotmats, quats_to_rotmats_backward)

_W_EPS = 1e-300  # raw-weight underflow guard


# ---------------------------------------------------------------------------
# control points
# ---------------------------------------------------------------------------

@dataclass
class ControlPointSet:
    positions: np.ndarray       # (N,3), canonical space, learnable
    log_radii: np.ndarray       # (N,), learnable RBF radii in log-meters

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.log_radii = np.asarray(self.log_radii, dtype=np.float64).reshape(-1)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def radii(self) -> np.ndarray:
        return np.exp(self.log_radii)

    @staticmethod
    def empty() -> "ControlPointSet":
        return ControlPointSet(np.zeros((0, 3)), np.zeros(0))


def farthest_point_sample(points: np.ndarray, count: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point subset; returns indices, deterministic."""
    n = points.shape[0]
    if count >= n:
        return np.arange(n)
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start
    dist = np.linalg.norm(points - points[start], axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


def init_control_points(depth: np.ndarray, mask: np.ndarray, pose: PoseSE3,
                        cam: CameraIntrinsics, target_count: int) -> ControlPointSet:
    """Backproject motion-region pixels and farthest-point-sample proxies.

    Radii start at the mean nearest-neighbor distance of the sampled set.
    An empty mask yields an empty set (the scene runs fully static).
    """
    valid = np.asarray(mask, dtype=bool) & (depth > 0)
    vs, us = np.nonzero(valid)
    if us.size == 0:
        return ControlPointSet.empty()
    pts = backproject_pixels(us.astype(np.float64), vs.astype(np.float64),
                             depth[valid], pose, cam)
    idx = farthest_point_sample(pts, target_count)
    pts = pts[idx]
    if len(pts) > 1:
        d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
        np.fill_diagonal(d2, np.inf)
        radius = float(np.mean(np.sqrt(d2.min(axis=1))))
    else:
        radius = 0.1
    return ControlPointSet(pts, np.full(len(pts), np.log(max(radius, 1e-6))))


def knn_neighbors(points: ControlPointSet, query: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest control points; ties broken by index."""
    n = len(points)
    if k > n:
        raise ValueError(f"k={k} exceeds control point count {n}")
    d2 = np.sum((points.positions - np.asarray(query, dtype=np.float64)) ** 2, axis=1)
    return np.argsort(d2, kind="stable")[:k]


def knn_neighbors_batch(positions: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    d2 = np.sum((queries[:, None, :] - positions[None, :, :]) ** 2, axis=2)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def rbf_weights(points: ControlPointSet, neighbor_indices: np.ndarray,
                query: np.ndarray) -> np.ndarray:
    """Normalized Gaussian-RBF weights over the given neighbors.

    Falls back to uniform 1/k when every raw weight underflows.
    """
    p = points.positions[neighbor_indices]
    sig = points.radii[neighbor_indices]
    d2 = np.sum((p - np.asarray(query, dtype=np.float64)) ** 2, axis=1)
    raw = np.exp(-d2 / (2.0 * sig ** 2))
    total = raw.sum()
    if total < _W_EPS:
        return np.full(len(neighbor_indices), 1.0 / len(neighbor_indices))
    return raw / total


# ---------------------------------------------------------------------------
# deformation MLP
# ---------------------------------------------------------------------------

def _encode(x: np.ndarray, bands: int) -> np.ndarray:
    """[x, sin(2^k pi x), cos(2^k pi x)] feature stack."""
    feats = [x]
    for k in range(bands):
        f = (2.0 ** k) * np.pi
        feats.append(np.sin(f * x))
        feats.append(np.cos(f * x))
    return np.concatenate(feats, axis=-1)


def _encode_backward(x: np.ndarray, bands: int, d_feats: np.ndarray) -> np.ndarray:
    dim = x.shape[-1]
    grad = d_feats[..., :dim].copy()
    col = dim
    for k in range(bands):
        f = (2.0 ** k) * np.pi
        grad += d_feats[..., col:col + dim] * f * np.cos(f * x)
        col += dim
        grad -= d_feats[..., col:col + dim] * f * np.sin(f * x)
        col += dim
    return grad


class DeformNet:
    """Two-hidden-layer tanh MLP from (encoded position, encoded time) to a
    6-DoF transform. The output head is zero-initialized so the field starts
    as the identity everywhere."""

    def __init__(self, hidden: int = 64, pos_bands: int = 6, time_bands: int = 4,
                 seed: int = 0):
        self.hidden = hidden
        self.pos_bands = pos_bands
        self.time_bands = time_bands
        in_dim = 3 * (1 + 2 * pos_bands) + 1 * (1 + 2 * time_bands)
        rng = np.random.default_rng(seed)
        self.layers = [
            [rng.normal(scale=np.sqrt(1.0 / in_dim), size=(hidden, in_dim)), np.zeros(hidden)],
            [rng.normal(scale=np.sqrt(1.0 / hidden), size=(hidden, hidden)), np.zeros(hidden)],
            [np.zeros((6, hidden)), np.zeros(6)],
        ]

    # flat parameter vector interface for the optimizer
    def get_flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for w_b in self.layers for a in w_b])

    def set_flat(self, flat: np.ndarray) -> None:
        pos = 0
        for w_b in self.layers:
            for i, a in enumerate(w_b):
                w_b[i] = flat[pos:pos + a.size].reshape(a.shape).copy()
                pos += a.size

    def n_params(self) -> int:
        return sum(a.size for w_b in self.layers for a in w_b)

    def forward(self, points: np.ndarray, t: float):
        """(N,3), t -> axis-angle (N,3), translation (N,3), cache."""
        n = points.shape[0]
        te = _encode(np.full((n, 1), float(t)), self.time_bands)
        pe = _encode(points, self.pos_bands)
        h0 = np.concatenate([pe, te], axis=1)
        (w1, b1), (w2, b2), (w3, b3) = self.layers
        z1 = h0 @ w1.T + b1
        h1 = np.tanh(z1)
        z2 = h1 @ w2.T + b2
        h2 = np.tanh(z2)
        out = h2 @ w3.T + b3
        cache = (points, h0, h1, h2)
        return out[:, :3], out[:, 3:], cache

    def backward(self, cache, d_rot: np.ndarray, d_trans: np.ndarray):
        """Returns (flat param grads, grads w.r.t. input points)."""
        points, h0, h1, h2 = cache
        (w1, _), (w2, _), (w3, _) = self.layers
        d_out = np.concatenate([d_rot, d_trans], axis=1)
        d_w3 = d_out.T @ h2
        d_b3 = d_out.sum(axis=0)
        d_h2 = d_out @ w3
        d_z2 = d_h2 * (1.0 - h2 ** 2)
        d_w2 = d_z2.T @ h1
        d_b2 = d_z2.sum(axis=0)
        d_h1 = d_z2 @ w2
        d_z1 = d_h1 * (1.0 - h1 ** 2)
        d_w1 = d_z1.T @ h0
        d_b1 = d_z1.sum(axis=0)
        d_h0 = d_z1 @ w1
        pos_dim = 3 * (1 + 2 * self.pos_bands)
        d_points = _encode_backward(points, self.pos_bands, d_h0[:, :pos_dim])
        flat = np.concatenate([d_w1.reshape(-1), d_b1, d_w2.reshape(-1), d_b2,
                               d_w3.reshape(-1), d_b3])
        return flat, d_points


def query_control_transform(net: DeformNet, p: np.ndarray, t: float):
    """6-DoF transform of one control point at normalized time t in [0,1]."""
    rot_aa, trans, _ = net.forward(np.asarray(p, dtype=np.float64).reshape(1, 3), t)
    return quats_to_rotmats(_axis_angles_to_quats(rot_aa))[0], trans[0]


# ---------------------------------------------------------------------------
# axis-angle <-> quaternion, batched with jacobians
# ---------------------------------------------------------------------------

def _axis_angles_to_quats(r: np.ndarray) -> np.ndarray:
    theta2 = np.sum(r ** 2, axis=1)
    small = theta2 < 1e-14
    theta = np.sqrt(np.where(small, 1.0, theta2))
    s = np.where(small, 0.5 - theta2 / 48.0, np.sin(0.5 * theta) / theta)
    w = np.where(small, 1.0 - theta2 / 8.0, np.cos(0.5 * theta))
    return np.concatenate([w[:, None], r * s[:, None]], axis=1)


def _axis_angles_to_quats_backward(r: np.ndarray, d_q: np.ndarray) -> np.ndarray:
    theta2 = np.sum(r ** 2, axis=1)
    small = theta2 < 1e-14
    theta = np.sqrt(np.where(small, 1.0, theta2))
    s = np.where(small, 0.5 - theta2 / 48.0, np.sin(0.5 * theta) / theta)
    ds_dt2 = np.where(small, -1.0 / 48.0,
                      (0.25 * np.cos(0.5 * theta) / theta
                       - 0.5 * np.sin(0.5 * theta) / np.where(small, 1.0, theta2)) / theta)
    dw_dt2 = np.where(small, -0.125 + theta2 / 192.0, -0.25 * np.sin(0.5 * theta) / theta)
    coeff = d_q[:, 0] * dw_dt2 + np.sum(d_q[:, 1:] * r, axis=1) * ds_dt2
    return d_q[:, 1:] * s[:, None] + 2.0 * coeff[:, None] * r


def _quat_mul_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    bw, bx, by, bz = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=1)


def _quat_mul_backward(a, b, d_out):
    """Adjoints of the Hamilton product w.r.t. both factors."""
    # product is bilinear: build both 4x4 multiplication matrices
    aw, ax, ay, az = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    bw, bx, by, bz = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    d_a = np.stack([
        d_out[:, 0] * bw + d_out[:, 1] * bx + d_out[:, 2] * by + d_out[:, 3] * bz,
        -d_out[:, 0] * bx + d_out[:, 1] * bw - d_out[:, 2] * bz + d_out[:, 3] * by,
        -d_out[:, 0] * by + d_out[:, 1] * bz + d_out[:, 2] * bw - d_out[:, 3] * bx,
        -d_out[:, 0] * bz - d_out[:, 1] * by + d_out[:, 2] * bx + d_out[:, 3] * bw,
    ], axis=1)
    d_b = np.stack([
        d_out[:, 0] * aw + d_out[:, 1] * ax + d_out[:, 2] * ay + d_out[:, 3] * az,
        -d_out[:, 0] * ax + d_out[:, 1] * aw + d_out[:, 2] * az - d_out[:, 3] * ay,
        -d_out[:, 0] * ay - d_out[:, 1] * az + d_out[:, 2] * aw + d_out[:, 3] * ax,
        -d_out[:, 0] * az + d_out[:, 1] * ay - d_out[:, 2] * ax + d_out[:, 3] * aw,
    ], axis=1)
    return d_a, d_b


# ---------------------------------------------------------------------------
# linear blend skinning
# ---------------------------------------------------------------------------

@dataclass
class DeformGrads:
    net_flat: np.ndarray
    control_positions: np.ndarray
    control_log_radii: np.ndarray
    dyn_means: np.ndarray
    dyn_rots: np.ndarray


class DeformationField:
    """Control points + MLP + fixed canonical-space KNN assignments."""

    def __init__(self, control: ControlPointSet, net: DeformNet, knn_k: int):
        self.control = control
        self.net = net
        self.knn_k = knn_k
        self.neighbors: np.ndarray | None = None   # (G,K), bound in canonical space

    def bind(self, canonical_means: np.ndarray) -> None:
        if len(self.control) == 0:
            self.neighbors = np.zeros((len(canonical_means), 0), dtype=np.int64)
            return
        k = min(self.knn_k, len(self.control))
        self.neighbors = knn_neighbors_batch(self.control.positions,
                                             np.asarray(canonical_means, dtype=np.float64), k)

    def identity(self) -> bool:
        return len(self.control) == 0

    def _weights(self, means: np.ndarray):
        """Normalized RBF weights of each Gaussian's neighbor set, with cache."""
        nb = self.neighbors
        p = self.control.positions[nb]                    # (G,K,3)
        sig = np.exp(self.control.log_radii[nb])          # (G,K)
        diff = means[:, None, :] - p                      # (G,K,3)
        d2 = np.sum(diff ** 2, axis=2)
        raw = np.exp(-d2 / (2.0 * sig ** 2))
        total = raw.sum(axis=1)
        fallback = total < _W_EPS
        safe_total = np.where(fallback, 1.0, total)
        w = raw / safe_total[:, None]
        k = nb.shape[1]
        w[fallback] = 1.0 / k
        return w, (diff, d2, sig, raw, safe_total, fallback)

    def deform(self, dyn: GaussianSet, t: float):
        """Deformed (means, rots) of the dynamic set at normalized time t."""
        means = dyn.means
        rots = dyn.rots
        if self.identity() or len(dyn) == 0:
            return means.copy(), rots.copy(), None
        if self.neighbors is None or self.neighbors.shape[0] != len(dyn):
            raise RuntimeError("deformation field not bound to this dynamic set")
        nb = self.neighbors
        rot_aa, trans, net_cache = self.net.forward(self.control.positions, float(t))
        q_cp = _axis_angles_to_quats(rot_aa)              # (N,4)
        m_cp = quats_to_rotmats(q_cp)                     # (N,3,3)
        w, w_cache = self._weights(means)                 # (G,K)

        p_nb = self.control.positions[nb]                 # (G,K,3)
        t_nb = trans[nb]                                  # (G,K,3)
        m_nb = m_cp[nb]                                   # (G,K,3,3)
        local = means[:, None, :] - p_nb                  # (G,K,3)
        rotated = np.einsum("gkij,gkj->gki", m_nb, local)
        target = rotated + p_nb + t_nb
        new_means = np.sum(w[:, :, None] * target, axis=1)

        q_nb = q_cp[nb]                                   # (G,K,4)
        sign = np.sign(np.sum(q_nb * q_nb[:, :1, :], axis=2))
        sign[sign == 0] = 1.0
        q_aligned = q_nb * sign[:, :, None]
        blend_raw = np.sum(w[:, :, None] * q_aligned, axis=1)
        norm = np.linalg.norm(blend_raw, axis=1, keepdims=True)
        q_blend = blend_raw / norm
        new_rots = _quat_mul_batch(q_blend, rots)

        cache = dict(t=float(t), dyn_means=means, dyn_rots=rots, nb=nb,
                     rot_aa=rot_aa, trans=trans, net_cache=net_cache,
                     q_cp=q_cp, m_cp=m_cp, w=w, w_cache=w_cache, local=local,
                     rotated=rotated, target=target, sign=sign,
                     blend_raw=blend_raw, norm=norm, q_blend=q_blend)
        return new_means, new_rots, cache

    def deform_backward(self, cache, d_means: np.ndarray, d_rots: np.ndarray) -> DeformGrads:
        """Chain adjoints of the deformed configuration to every input."""
        if cache is None:
            return DeformGrads(np.zeros(self.net.n_params()),
                               np.zeros_like(self.control.positions),
                               np.zeros_like(self.control.log_radii),
                               d_means.copy(), d_rots.copy())
        nb = cache["nb"]
        n_cp = len(self.control)
        g, k = nb.shape
        w = cache["w"]

        # rotation chain: new_rots = q_blend * dyn_rots
        d_q_blend, d_dyn_rots = _quat_mul_backward(cache["q_blend"], cache["dyn_rots"], d_rots)
        norm = cache["norm"]
        qb = cache["q_blend"]
        d_blend_raw = (d_q_blend - qb * np.sum(qb * d_q_blend, axis=1, keepdims=True)) / norm
        d_w_rot = np.sum(cache["sign"][:, :, None] * cache["q_cp"][nb] * d_blend_raw[:, None, :], axis=2)
        d_q_nb = cache["sign"][:, :, None] * w[:, :, None] * d_blend_raw[:, None, :]

        # translation chain: new_means = sum_k w_k (M_k(mu-p_k) + p_k + T_k)
        d_w_mean = np.sum(cache["target"] * d_means[:, None, :], axis=2)
        d_target = w[:, :, None] * d_means[:, None, :]    # (G,K,3)
        d_t_nb = d_target
        d_p_nb_direct = d_target
        d_rotated = d_target
        m_nb = cache["m_cp"][nb]
        d_local = np.einsum("gkji,gkj->gki", m_nb, d_rotated)
        d_m_nb = np.einsum("gki,gkj->gkij", d_rotated, cache["local"])
        d_dyn_means = np.sum(d_local, axis=1)
        d_p_nb = d_p_nb_direct - d_local

        # weight chain (softmax-like normalization, then the RBF kernel)
        d_w = d_w_rot + d_w_mean
        diff, d2, sig, raw, safe_total, fallback = cache["w_cache"]
        inner = np.sum(d_w * w, axis=1, keepdims=True)
        d_raw = (d_w - inner) / safe_total[:, None]
        d_raw[fallback] = 0.0
        d_d2 = d_raw * raw * (-1.0 / (2.0 * sig ** 2))
        d_sig = d_raw * raw * (d2 / sig ** 3)
        d_dyn_means += np.sum(2.0 * diff * d_d2[:, :, None], axis=1)
        d_p_nb = d_p_nb - 2.0 * diff * d_d2[:, :, None]

        # scatter neighbor adjoints back to control points
        flat_nb = nb.reshape(-1)
        d_positions = np.zeros((n_cp, 3))
        np.add.at(d_positions, flat_nb, d_p_nb.reshape(-1, 3))
        d_log_radii = np.zeros(n_cp)
        np.add.at(d_log_radii, flat_nb, (d_sig * sig).reshape(-1))
        d_q_cp = np.zeros((n_cp, 4))
        np.add.at(d_q_cp, flat_nb, d_q_nb.reshape(-1, 4))
        d_m_cp = np.zeros((n_cp, 3, 3))
        np.add.at(d_m_cp, flat_nb, d_m_nb.reshape(-1, 3, 3))

        # control transforms -> MLP
        d_q_cp += quats_to_rotmats_backward(cache["q_cp"], d_m_cp)
        d_rot_aa = _axis_angles_to_quats_backward(cache["rot_aa"], d_q_cp)
        d_trans = np.zeros((n_cp, 3))
        np.add.at(d_trans, flat_nb, d_t_nb.reshape(-1, 3))
        net_flat, d_points_net = self.net.backward(cache["net_cache"], d_rot_aa, d_trans)
        d_positions += d_points_net

        return DeformGrads(net_flat, d_positions, d_log_radii, d_dyn_means, d_dyn_rots)

    # -- as-rigid-as-possible regularizer over the control graph -----------

    def arap_loss(self, t: float):
        """Sum over KNN edges of |deformed edge length - canonical length|."""
        n = len(self.control)
        if n < 2:
            return 0.0, None
        k = min(self.knn_k, n - 1)
        p = self.control.positions
        nbrs = knn_neighbors_batch(p, p, k + 1)[:, 1:]    # drop self
        _, trans, net_cache = self.net.forward(p, float(t))
        x = p + trans
        src = np.repeat(np.arange(n), k)
        dst = nbrs.reshape(-1)
        ex = x[src] - x[dst]
        ep = p[src] - p[dst]
        len_x = np.linalg.norm(ex, axis=1)
        len_p = np.linalg.norm(ep, axis=1)
        resid = len_x - len_p
        loss = float(np.sum(np.abs(resid)))
        cache = (src, dst, ex, ep, len_x, len_p, resid, net_cache)
        return loss, cache

    def arap_backward(self, cache, d_loss: float = 1.0):
        n = len(self.control)
        if cache is None:
            return np.zeros(self.net.n_params()), np.zeros((n, 3))
        src, dst, ex, ep, len_x, len_p, resid, net_cache = cache
        s = np.sign(resid) * d_loss
        ux = ex / np.maximum(len_x, 1e-12)[:, None]
        up = ep / np.maximum(len_p, 1e-12)[:, None]
        d_x = np.zeros((n, 3))
        np.add.at(d_x, src, s[:, None] * ux)
        np.add.at(d_x, dst, -s[:, None] * ux)
        d_p = np.zeros((n, 3))
        np.add.at(d_p, src, -s[:, None] * up)
        np.add.at(d_p, dst, s[:, None] * up)
        # x = p + T(p, t)
        net_flat, d_p_net = self.net.backward(net_cache, np.zeros((n, 3)), d_x)
        return net_flat, d_p + d_x + d_p_net


def deform_gaussians(dyn: GaussianSet, field: DeformationField, t: float) -> GaussianSet:
    """Convenience wrapper returning a deformed copy (scales untouched)."""
    means, rots, _ = field.deform(dyn, t)
    out = dyn.copy()
    out.means = means
    out.rots = rots
    return out
