"""Trajectory and image-quality metrics (ATE-RMSE, PSNR, SSIM)."""
from __future__ import annotations

import numpy as np

from . import losses

PSNR_CAP_DB = 99.0


def associate_trajectories(est: list, gt: list, max_dt: float = 0.02):
    """Nearest-timestamp pairing of two [(ts, pose)] lists."""
    gt_ts = np.array([t for t, _ in gt])
    pairs = []
    used = set()
    for ts, pose in est:
        j = int(np.argmin(np.abs(gt_ts - ts)))
        if abs(gt_ts[j] - ts) <= max_dt and j not in used:
            used.add(j)
            pairs.append((pose, gt[j][1]))
    return pairs


def umeyama_alignment(src: np.ndarray, dst: np.ndarray):
    """Rigid (R, t) minimizing ||R src + t - dst||^2, scale fixed to 1."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    u, _, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    r = u @ s @ vt
    t = mu_d - r @ mu_s
    return r, t


def ate_rmse(estimated: list, ground_truth: list, max_dt: float = 0.02) -> float:
    """ATE-RMSE in centimeters after rigid alignment.

    Both trajectories are [(timestamp, camera-to-world PoseSE3)]; poses are
    associated by nearest timestamp within ``max_dt`` seconds.
    """
    pairs = associate_trajectories(estimated, ground_truth, max_dt)
    if len(pairs) < 2:
        raise ValueError(f"need at least 2 associated poses, got {len(pairs)}")
    est = np.array([p.translation for p, _ in pairs])
    gt = np.array([g.translation for _, g in pairs])
    r, t = umeyama_alignment(est, gt)
    resid = est @ r.T + t - gt
    return float(np.sqrt(np.mean(np.sum(resid ** 2, axis=1))) * 100.0)


def psnr(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio in dB on [0,1] images, capped at 99."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("shape mismatch")
    if mask is not None:
        sel = np.asarray(mask, dtype=bool)
        err = (pred - target)[sel]
    else:
        err = pred - target
    mse = float(np.mean(err ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB))


def ssim(pred: np.ndarray, target: np.ndarray) -> float:
    """Structural similarity; shares the windowed machinery with d_ssim."""
    return 1.0 - 2.0 * losses.d_ssim(pred, target)[0]


def format_report(metrics: dict) -> str:
    """Self-describing key = value text, stable key order."""
    lines = [f"{k} = {metrics[k]}" for k in sorted(metrics)]
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def print_report_table(metrics: dict, out=print) -> None:
    width = max((len(k) for k in metrics), default=0)
    out("-" * (width + 15))
    for k in sorted(metrics):
        out(f"{k:<{width}}  {metrics[k]}")
    out("-" * (width + 15))
