"""Self-contained Adam optimizer over named flat parameter groups."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class ParamGroup:
    name: str
    params: np.ndarray
    lr: float
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)
    step: int = 0

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64).reshape(-1)
        if self.m is None:
            self.m = np.zeros_like(self.params)
        if self.v is None:
            self.v = np.zeros_like(self.params)

    def resize(self, n: int) -> None:
        """Grow (zero-filled moments) or shrink to n parameters."""
        old = self.params.size
        if n == old:
            return
        if n > old:
            self.m = np.concatenate([self.m, np.zeros(n - old)])
            self.v = np.concatenate([self.v, np.zeros(n - old)])
        else:
            self.m = self.m[:n]
            self.v = self.v[:n]
        self.params = np.resize(self.params, n)

    def keep(self, mask: np.ndarray, width: int = 1) -> None:
        """Drop per-row state for pruned primitives (params are row-major)."""
        mask2 = np.repeat(np.asarray(mask, dtype=bool), width)
        self.params = self.params[mask2]
        self.m = self.m[mask2]
        self.v = self.v[mask2]


def adam_step(group: ParamGroup, grads: np.ndarray) -> bool:
    """One Adam update in place; skips (returns False) on non-finite grads."""
    grads = np.asarray(grads, dtype=np.float64).reshape(-1)
    if grads.size != group.params.size:
        raise ValueError(f"grad size {grads.size} != param size {group.params.size} "
                         f"for group '{group.name}'")
    if not np.all(np.isfinite(grads)):
        return False
    group.step += 1
    group.m = BETA1 * group.m + (1.0 - BETA1) * grads
    group.v = BETA2 * group.v + (1.0 - BETA2) * grads * grads
    m_hat = group.m / (1.0 - BETA1 ** group.step)
    v_hat = group.v / (1.0 - BETA2 ** group.step)
    group.params -= group.lr * m_hat / (np.sqrt(v_hat) + EPS)
    return True
