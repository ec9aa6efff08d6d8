"""Gaussian scene primitives stored as structure-of-arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import quat_to_rotmat, quats_to_rotmats


@dataclass
class GaussianPrimitive:
    """One anisotropic 3D Gaussian.

    The dynamic flag ``dy`` is fixed at construction and never reassigned;
    opacity is stored as a logit and scales as log-meters so the optimizer
    stays unconstrained.
    """

    mean: np.ndarray
    rot: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    log_scale: np.ndarray = field(default_factory=lambda: np.zeros(3))
    opacity_logit: float = 0.0
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    dy: bool = False
    birth_frame: int = 0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.rot = np.asarray(self.rot, dtype=np.float64)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))


def covariance_from_params(g: GaussianPrimitive) -> np.ndarray:
    """World-frame covariance R diag(exp(2*log_scale)) R^T; symmetric PD."""
    r = quat_to_rotmat(g.rot)
    return r @ np.diag(np.exp(2.0 * g.log_scale)) @ r.T


class GaussianSet:
    """A batch of Gaussians with per-primitive stable ids.

    Arrays: means (N,3), rots (N,4), log_scales (N,3), opacity_logits (N,),
    colors (N,3), dy (N,) bool, birth_frames (N,) int, ids (N,) int64.
    Ids survive pruning and let keyframes remember which primitives they saw.
    """

    def __init__(self, means=None, rots=None, log_scales=None, opacity_logits=None,
                 colors=None, dy=None, birth_frames=None, ids=None):
        n = 0 if means is None else len(means)
        self.means = np.zeros((n, 3)) if means is None else np.asarray(means, dtype=np.float64).reshape(n, 3)
        self.rots = (np.tile([1.0, 0, 0, 0], (n, 1)) if rots is None
                     else np.asarray(rots, dtype=np.float64).reshape(n, 4))
        self.log_scales = (np.zeros((n, 3)) if log_scales is None
                           else np.asarray(log_scales, dtype=np.float64).reshape(n, 3))
        self.opacity_logits = (np.zeros(n) if opacity_logits is None
                               else np.asarray(opacity_logits, dtype=np.float64).reshape(n))
        self.colors = (np.full((n, 3), 0.5) if colors is None
                       else np.asarray(colors, dtype=np.float64).reshape(n, 3))
        self.dy = np.zeros(n, dtype=bool) if dy is None else np.asarray(dy, dtype=bool).reshape(n)
        self.birth_frames = (np.zeros(n, dtype=np.int64) if birth_frames is None
                             else np.asarray(birth_frames, dtype=np.int64).reshape(n))
        self.ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64).reshape(n)
        self._next_id = int(self.ids.max()) + 1 if n else 0

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def rotmats(self) -> np.ndarray:
        return quats_to_rotmats(self.rots)

    def covariances(self) -> np.ndarray:
        """(N,3,3) world covariances."""
        r = self.rotmats()
        d = np.exp(2.0 * self.log_scales)
        return np.einsum("nij,nj,nkj->nik", r, d, r)

    def normalize_rotations(self) -> None:
        """Renormalize quaternions in place (call after every optimizer step)."""
        self.rots /= np.linalg.norm(self.rots, axis=1, keepdims=True)

    def append(self, means, rots, log_scales, opacity_logits, colors, dy, birth_frame: int) -> np.ndarray:
        """Append new primitives; returns the assigned ids."""
        k = len(means)
        new_ids = np.arange(self._next_id, self._next_id + k, dtype=np.int64)
        self._next_id += k
        self.means = np.concatenate([self.means, np.asarray(means, dtype=np.float64).reshape(k, 3)])
        self.rots = np.concatenate([self.rots, np.asarray(rots, dtype=np.float64).reshape(k, 4)])
        self.log_scales = np.concatenate([self.log_scales, np.asarray(log_scales, dtype=np.float64).reshape(k, 3)])
        self.opacity_logits = np.concatenate([self.opacity_logits, np.asarray(opacity_logits, dtype=np.float64).reshape(k)])
        self.colors = np.concatenate([self.colors, np.asarray(colors, dtype=np.float64).reshape(k, 3)])
        self.dy = np.concatenate([self.dy, np.full(k, bool(dy))])
        self.birth_frames = np.concatenate([self.birth_frames, np.full(k, birth_frame, dtype=np.int64)])
        self.ids = np.concatenate([self.ids, new_ids])
        return new_ids

    def keep(self, mask: np.ndarray) -> None:
        """Drop primitives where mask is False (pruning)."""
        mask = np.asarray(mask, dtype=bool)
        self.means = self.means[mask]
        self.rots = self.rots[mask]
        self.log_scales = self.log_scales[mask]
        self.opacity_logits = self.opacity_logits[mask]
        self.colors = self.colors[mask]
        self.dy = self.dy[mask]
        self.birth_frames = self.birth_frames[mask]
        self.ids = self.ids[mask]

    def subset(self, mask: np.ndarray) -> "GaussianSet":
        mask = np.asarray(mask)
        sub = GaussianSet(self.means[mask], self.rots[mask], self.log_scales[mask],
                          self.opacity_logits[mask], self.colors[mask], self.dy[mask],
                          self.birth_frames[mask], self.ids[mask])
        sub._next_id = self._next_id
        return sub

    def static_subset(self) -> "GaussianSet":
        return self.subset(~self.dy)

    def dynamic_subset(self) -> "GaussianSet":
        return self.subset(self.dy)

    def copy(self) -> "GaussianSet":
        c = GaussianSet(self.means.copy(), self.rots.copy(), self.log_scales.copy(),
                        self.opacity_logits.copy(), self.colors.copy(), self.dy.copy(),
                        self.birth_frames.copy(), self.ids.copy())
        c._next_id = self._next_id
        return c

    @staticmethod
    def from_primitives(prims) -> "GaussianSet":
        return GaussianSet(
            np.array([p.mean for p in prims]),
            np.array([p.rot for p in prims]),
            np.array([p.log_scale for p in prims]),
            np.array([p.opacity_logit for p in prims]),
            np.array([p.color for p in prims]),
            np.array([p.dy for p in prims]),
            np.array([p.birth_frame for p in prims]),
        )
