#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Times the compositing forward and backward passes on random scenes of
increasing size and prints the speedup. The first numba call includes JIT
compilation and is excluded via a warmup render.

Usage:
    python benchmarks/backend_bench.py [--sizes 200,1000,4000] [--repeats 5]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

import splat4d.kernels as kernels
from splat4d.config import Config
from splat4d.geometry import CameraIntrinsics, PoseSE3
from splat4d.render import ALPHA_MAX, project_gaussians


def build_inputs(n: int, seed: int, cam: CameraIntrinsics, cfg: Config):
    rng = np.random.default_rng(seed)
    z = rng.uniform(1.5, 3.5, size=n)
    half_w = (cam.width / (2 * cam.fx)) * z
    half_h = (cam.height / (2 * cam.fy)) * z
    means = np.stack([rng.uniform(-1, 1, n) * half_w,
                      rng.uniform(-1, 1, n) * half_h, z], axis=1)
    rots = rng.normal(size=(n, 4))
    rots /= np.linalg.norm(rots, axis=1, keepdims=True)
    proj = project_gaussians(means, rots, rng.uniform(np.log(0.02), np.log(0.1), (n, 3)),
                             rng.uniform(-1, 3, n), rng.uniform(0, 1, (n, 3)),
                             PoseSE3.identity(), cam, cfg, rng.normal(size=(n, 2)))
    offsets, cand, _, _ = kernels.build_tile_lists(proj.rect, cam.height, cam.width,
                                                   cfg.tile_size)
    args = (proj.mean2d, proj.conic, proj.alpha_base, proj.color, proj.depth,
            proj.flow, proj.rect, offsets, cand, cam.height, cam.width,
            cfg.tile_size, cfg.transmittance_min, ALPHA_MAX)
    adj = (rng.normal(size=(cam.height, cam.width, 3)),
           rng.normal(size=(cam.height, cam.width)),
           rng.normal(size=(cam.height, cam.width)),
           rng.normal(size=(cam.height, cam.width, 2)))
    return args, adj, cand.shape[0]


def time_call(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", default="200,1000,4000",
                        help="comma-separated gaussian counts")
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--width", type=int, default=160)
    parser.add_argument("--height", type=int, default=120)
    args = parser.parse_args(argv)

    cam = CameraIntrinsics(fx=140.0, fy=140.0, cx=(args.width - 1) / 2,
                           cy=(args.height - 1) / 2, width=args.width,
                           height=args.height)
    cfg = Config()
    backends = {"numpy": kernels.get_backend("numpy")}
    if kernels.NUMBA_AVAILABLE:
        backends["numba"] = kernels.get_backend("numba")
        warm_args, warm_adj, _ = build_inputs(50, 0, cam, cfg)
        backends["numba"].forward(*warm_args)
        backends["numba"].backward(*warm_args, *warm_adj)
    else:
        print("numba unavailable; timing the numpy backend only")

    sizes = [int(s) for s in args.sizes.split(",")]
    header = f"{'N':>6} {'incidences':>11} | " + " | ".join(
        f"{name + ' fwd':>11} {name + ' bwd':>11}" for name in backends)
    print(header)
    print("-" * len(header))
    rows = {}
    for n in sizes:
        kargs, adj, k_inc = build_inputs(n, 1, cam, cfg)
        cells = []
        for name, backend in backends.items():
            fwd = time_call(lambda: backend.forward(*kargs), args.repeats)
            bwd = time_call(lambda: backend.backward(*kargs, *adj), args.repeats)
            rows[(n, name)] = (fwd, bwd)
            cells.append(f"{fwd * 1e3:>9.2f}ms {bwd * 1e3:>9.2f}ms")
        print(f"{n:>6} {k_inc:>11} | " + " | ".join(cells))

    if "numba" in backends:
        print()
        for n in sizes:
            f_np, b_np = rows[(n, "numpy")]
            f_nb, b_nb = rows[(n, "numba")]
            print(f"N={n}: numba speedup forward {f_np / f_nb:.1f}x, "
                  f"backward {b_np / b_nb:.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
