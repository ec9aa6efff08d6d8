"""Rasterization kernels with two interchangeable backends.

The hot per-pixel compositing loops exist twice: a numba ``@njit`` version
(``numba_backend``) and a vectorized pure-numpy version (``numpy_backend``).
Both implement identical semantics; cross-backend agreement is covered by
tests and ``benchmarks/backend_bench.py`` compares their speed.

Selection: set ``SPLAT4D_BACKEND=numpy`` or ``SPLAT4D_BACKEND=numba``.
Unset, numba is used when importable and falls back to numpy otherwise.
"""
from __future__ import annotations

import os

import numpy as np

from . import numpy_backend

try:
    from . import numba_backend
    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba missing in minimal envs
    numba_backend = None
    NUMBA_AVAILABLE = False

_VALID = ("numba", "numpy")


def backend_name() -> str:
    name = os.environ.get("SPLAT4D_BACKEND", "").strip().lower()
    if name and name not in _VALID:
        raise ValueError(f"SPLAT4D_BACKEND must be one of {_VALID}, got '{name}'")
    if not name:
        name = "numba" if NUMBA_AVAILABLE else "numpy"
    if name == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("SPLAT4D_BACKEND=numba requested but numba is not importable")
    return name


def get_backend(name: str | None = None):
    name = name or backend_name()
    if name == "numba":
        if numba_backend is None:
            raise RuntimeError("numba backend unavailable")
        return numba_backend
    return numpy_backend


def build_tile_lists(rect: np.ndarray, height: int, width: int, tile: int):
    """CSR candidate lists per screen tile.

    ``rect`` holds inclusive pixel bounds (x0, y0, x1, y1) per Gaussian, in
    front-to-back order. Within each tile the list preserves that order, so
    per-pixel traversal of a tile list is depth-sorted.
    """
    n_tx = (width + tile - 1) // tile
    n_ty = (height + tile - 1) // tile
    n_tiles = n_tx * n_ty
    m = rect.shape[0]
    if m == 0:
        return np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), n_tx, n_ty
    tx0 = rect[:, 0] // tile
    ty0 = rect[:, 1] // tile
    tx1 = rect[:, 2] // tile
    ty1 = rect[:, 3] // tile
    wx = tx1 - tx0 + 1
    counts = wx * (ty1 - ty0 + 1)
    total = int(counts.sum())
    gidx = np.repeat(np.arange(m, dtype=np.int64), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
    wx_r = np.repeat(wx, counts)
    tile_x = np.repeat(tx0, counts) + local % wx_r
    tile_y = np.repeat(ty0, counts) + local // wx_r
    tile_id = tile_y * n_tx + tile_x
    order = np.argsort(tile_id, kind="stable")
    cand = gidx[order]
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile_id, minlength=n_tiles), out=offsets[1:])
    return offsets, cand, n_tx, n_ty
