"""Quaternions, SE(3) poses, and the pinhole camera model.

Conventions used throughout the package:

* quaternions are ``(w, x, y, z)``, unit norm;
* poses are world-to-camera: ``p_cam = R @ p_world + t``;
* twists are 6-vectors ``(rho, omega)`` = (translation, rotation),
  so ``se3_exp`` of a pure-rotation twist has zero translation;
* pixel ``(row, col)`` has continuous image coordinates ``(u=col, v=row)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EPS_ANGLE = 1e-9


# ---------------------------------------------------------------------------
# quaternion helpers
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b in (w, x, y, z) order."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a quaternion (normalized internally)."""
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quats_to_rotmats(q: np.ndarray) -> np.ndarray:
    """Batched quat_to_rotmat, q of shape (N, 4) -> (N, 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((q.shape[0], 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def _rotmat_grad_wrt_unit_quat(q: np.ndarray, d_m: np.ndarray) -> np.ndarray:
    """Adjoint of quat_to_rotmat restricted to the unit sphere.

    ``d_m`` is dL/dM (3x3); returns dL/dq for the already-normalized q.
    """
    w, x, y, z = q
    # dM/dw, dM/dx, dM/dy, dM/dz for the standard matrix above (q unit).
    dw = 2 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]], dtype=np.float64)
    dx = 2 * np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]], dtype=np.float64)
    dy = 2 * np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]], dtype=np.float64)
    dz = 2 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]], dtype=np.float64)
    return np.array([np.sum(d_m * d) for d in (dw, dx, dy, dz)])


def quat_to_rotmat_backward(q_raw: np.ndarray, d_m: np.ndarray) -> np.ndarray:
    """dL/dq_raw given dL/dM, including the normalization Jacobian."""
    q_raw = np.asarray(q_raw, dtype=np.float64)
    n = np.linalg.norm(q_raw)
    q = q_raw / n
    g_unit = _rotmat_grad_wrt_unit_quat(q, d_m)
    return (g_unit - q * np.dot(q, g_unit)) / n


def quats_to_rotmats_backward(q_raw: np.ndarray, d_m: np.ndarray) -> np.ndarray:
    """Batched quat_to_rotmat_backward: (N,4), (N,3,3) -> (N,4)."""
    q_raw = np.asarray(q_raw, dtype=np.float64)
    n = np.linalg.norm(q_raw, axis=1, keepdims=True)
    q = q_raw / n
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zeros = np.zeros_like(w)
    dw = 2 * np.stack([zeros, -z, y, z, zeros, -x, -y, x, zeros], axis=1)
    dx = 2 * np.stack([zeros, y, z, y, -2 * x, -w, z, w, -2 * x], axis=1)
    dy = 2 * np.stack([-2 * y, x, w, x, zeros, z, -w, z, -2 * y], axis=1)
    dz = 2 * np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, zeros], axis=1)
    dm_flat = d_m.reshape(-1, 9)
    g_unit = np.stack([
        np.sum(dm_flat * dw, axis=1),
        np.sum(dm_flat * dx, axis=1),
        np.sum(dm_flat * dy, axis=1),
        np.sum(dm_flat * dz, axis=1),
    ], axis=1)
    return (g_unit - q * np.sum(q * g_unit, axis=1, keepdims=True)) / n


def axis_angle_to_quat(r: np.ndarray) -> np.ndarray:
    """Quaternion of a rotation vector, series-expanded near zero."""
    r = np.asarray(r, dtype=np.float64)
    theta2 = float(np.dot(r, r))
    if theta2 < 1e-14:
        # sin(t/2)/t = 1/2 - t^2/48 + O(t^4)
        s = 0.5 - theta2 / 48.0
        w = 1.0 - theta2 / 8.0
    else:
        theta = np.sqrt(theta2)
        s = np.sin(0.5 * theta) / theta
        w = np.cos(0.5 * theta)
    return np.array([w, r[0] * s, r[1] * s, r[2] * s])


def axis_angle_to_quat_backward(r: np.ndarray, d_q: np.ndarray) -> np.ndarray:
    """dL/dr given dL/dq for q = axis_angle_to_quat(r)."""
    r = np.asarray(r, dtype=np.float64)
    theta2 = float(np.dot(r, r))
    if theta2 < 1e-14:
        s = 0.5 - theta2 / 48.0
        ds_dt2 = -1.0 / 48.0
        dw_dt2 = -0.125 + theta2 / 192.0  # from w = cos(t/2) series
    else:
        theta = np.sqrt(theta2)
        s = np.sin(0.5 * theta) / theta
        # d s / d(theta^2) = (0.25*cos(t/2)/t - 0.5*sin(t/2)/t^2) / t
        ds_dt2 = (0.25 * np.cos(0.5 * theta) / theta - 0.5 * np.sin(0.5 * theta) / theta2) / theta
        dw_dt2 = -0.25 * np.sin(0.5 * theta) / theta
    # q = (w(t2), r * s(t2)); t2 = r.r
    g = d_q[1:] * s
    coeff = d_q[0] * dw_dt2 + float(np.dot(d_q[1:], r)) * ds_dt2
    return g + 2.0 * coeff * r


def rotate_vector(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    return quat_to_rotmat(q) @ np.asarray(v, dtype=np.float64)


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


# ---------------------------------------------------------------------------
# SE(3)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PoseSE3:
    """World-to-camera rigid transform: ``p_cam = R @ p_world + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize(self.rotation))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    @staticmethod
    def identity() -> "PoseSE3":
        return PoseSE3()

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Transform world point(s), shape (3,) or (N, 3)."""
        p = np.asarray(p, dtype=np.float64)
        return p @ self.rotation_matrix().T + self.translation

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self ∘ other: apply ``other`` first, then ``self``."""
        q = quat_multiply(self.rotation, other.rotation)
        t = self.rotation_matrix() @ other.translation + self.translation
        return PoseSE3(q, t)

    def inverse(self) -> "PoseSE3":
        q_inv = quat_conjugate(self.rotation)
        return PoseSE3(q_inv, -(quat_to_rotmat(q_inv) @ self.translation))

    def almost_equal(self, other: "PoseSE3", tol: float = 1e-9) -> bool:
        dq = min(np.linalg.norm(self.rotation - other.rotation),
                 np.linalg.norm(self.rotation + other.rotation))
        return dq < tol and np.linalg.norm(self.translation - other.translation) < tol


def _so3_v_matrix(omega: np.ndarray) -> np.ndarray:
    theta2 = float(np.dot(omega, omega))
    k = skew(omega)
    if theta2 < _EPS_ANGLE ** 2:
        return np.eye(3) + 0.5 * k + k @ k / 6.0
    theta = np.sqrt(theta2)
    a = (1.0 - np.cos(theta)) / theta2
    b = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) + a * k + b * (k @ k)


def se3_exp(twist: np.ndarray) -> PoseSE3:
    """Exponential map of a (rho, omega) twist."""
    twist = np.asarray(twist, dtype=np.float64)
    rho, omega = twist[:3], twist[3:]
    q = axis_angle_to_quat(omega)
    t = _so3_v_matrix(omega) @ rho
    return PoseSE3(q, t)


def se3_log(pose: PoseSE3) -> np.ndarray:
    """Inverse of se3_exp for rotation angles < pi."""
    w = float(np.clip(pose.rotation[0], -1.0, 1.0))
    xyz = pose.rotation[1:]
    s = np.linalg.norm(xyz)
    if s < _EPS_ANGLE:
        omega = 2.0 * xyz  # small-angle: q ~ (1, omega/2)
    else:
        theta = 2.0 * np.arctan2(s, w)
        omega = xyz / s * theta
    rho = np.linalg.solve(_so3_v_matrix(omega), pose.translation)
    return np.concatenate([rho, omega])


# ---------------------------------------------------------------------------
# camera
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near_clip: float = 0.01

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 8 or self.height < 8:
            raise ValueError("image must be at least 8x8")


def project_point(p_world: np.ndarray, pose: PoseSE3, cam: CameraIntrinsics):
    """Pinhole projection; returns (u, v, z) or None when behind the camera."""
    p = pose.apply(np.asarray(p_world, dtype=np.float64))
    z = float(p[2])
    if z <= cam.near_clip:
        return None
    return (cam.fx * float(p[0]) / z + cam.cx,
            cam.fy * float(p[1]) / z + cam.cy,
            z)


def project_points(p_world: np.ndarray, pose: PoseSE3, cam: CameraIntrinsics):
    """Batched projection: (N,3) -> uv (N,2), z (N,), valid (N,) bool."""
    p = pose.apply(np.asarray(p_world, dtype=np.float64).reshape(-1, 3))
    z = p[:, 2]
    valid = z > cam.near_clip
    zs = np.where(valid, z, 1.0)
    uv = np.stack([cam.fx * p[:, 0] / zs + cam.cx,
                   cam.fy * p[:, 1] / zs + cam.cy], axis=1)
    return uv, z, valid


def backproject_pixel(u: float, v: float, depth: float, pose: PoseSE3,
                      cam: CameraIntrinsics) -> np.ndarray:
    """World point of a pixel at the given depth (inverse of project_point)."""
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    if not (-0.5 <= u <= cam.width - 0.5 and -0.5 <= v <= cam.height - 0.5):
        raise ValueError(f"pixel ({u}, {v}) outside {cam.width}x{cam.height} image")
    p_cam = np.array([(u - cam.cx) / cam.fx * depth,
                      (v - cam.cy) / cam.fy * depth,
                      depth])
    inv = pose.inverse()
    return inv.apply(p_cam)


def backproject_pixels(us: np.ndarray, vs: np.ndarray, depths: np.ndarray,
                       pose: PoseSE3, cam: CameraIntrinsics) -> np.ndarray:
    """Batched backprojection; all inputs 1-D of equal length."""
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    p_cam = np.stack([(us - cam.cx) / cam.fx * depths,
                      (vs - cam.cy) / cam.fy * depths,
                      depths], axis=1)
    return pose.inverse().apply(p_cam)
