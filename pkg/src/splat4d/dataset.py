"""Sequence ingestion, synthetic scene generation, and persistence.

Directory layout (TUM RGB-D style):
    rgb.txt, depth.txt          timestamp -> image path listings
    rgb/, depth/                8-bit RGB and 16-bit depth (meters * 5000)
    groundtruth.txt             optional camera-to-world trajectory
    mask/<rgb-stem>.png         optional; nonzero pixels = dynamic
    flow/<a>_<b>.flo            optional; optical flow from frame a to b
    calibration.txt             optional "fx fy cx cy" (TUM fr3 defaults else)

All writers are atomic (write to a temp file, then rename). Flow files use
the Middlebury .flo format. The checkpoint container is a custom binary
format (magic/version/section table/CRC) so round trips are bit-exact.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import Config
from .gaussians import GaussianSet
from .geometry import (CameraIntrinsics, PoseSE3, backproject_pixels,
                       project_points, quat_multiply, quat_to_rotmat)

DEPTH_SCALE = 5000.0
ASSOCIATION_MAX_DT = 0.02
TUM_DEFAULT_INTRINSICS = (535.4, 539.2, 320.1, 247.6)  # freiburg3 calibration

FLO_MAGIC = 202021.25  # decodes to "PIEH" in the file header


# ---------------------------------------------------------------------------
# atomic file helpers
# ---------------------------------------------------------------------------

def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_image_rgb(path, img: np.ndarray) -> None:
    """Float [0,1] HxWx3 -> 8-bit PNG."""
    data = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(data).save(tmp, format="PNG")
    os.replace(tmp, path)


def load_image_rgb(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def save_image_depth(path, depth: np.ndarray) -> None:
    """Depth in meters -> 16-bit PNG at the TUM scale (0 = invalid)."""
    data = np.clip(depth * DEPTH_SCALE, 0, 65535).round().astype(np.uint16)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(data).save(tmp, format="PNG")
    os.replace(tmp, path)


def load_image_depth(path) -> np.ndarray:
    raw = np.asarray(Image.open(path), dtype=np.float64)
    return raw / DEPTH_SCALE


def save_image_mask(path, dynamic_region: np.ndarray) -> None:
    data = np.where(dynamic_region, 255, 0).astype(np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(data).save(tmp, format="PNG")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Middlebury .flo
# ---------------------------------------------------------------------------

def write_flo(path, flow: np.ndarray) -> None:
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError("flow must be HxWx2")
    h, w = flow.shape[:2]
    payload = struct.pack("<fii", FLO_MAGIC, w, h) + flow.tobytes(order="C")
    atomic_write_bytes(path, payload)


def read_flo(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(12)
        if len(header) < 12:
            raise ValueError(f"{path}: truncated .flo header")
        magic, w, h = struct.unpack("<fii", header)
        if abs(magic - FLO_MAGIC) > 1e-3:
            raise ValueError(f"{path}: bad .flo magic {magic!r}")
        data = fh.read(h * w * 2 * 4)
        if len(data) != h * w * 2 * 4:
            raise ValueError(f"{path}: truncated .flo payload")
    return np.frombuffer(data, dtype=np.float32).reshape(h, w, 2).astype(np.float64)


# ---------------------------------------------------------------------------
# flow providers
# ---------------------------------------------------------------------------

class FlowProvider:
    """Supplies dense flow supervision between frame pairs.

    ``flow_pair(a, b)`` returns (forward, backward) with the convention used
    by the flow-rendering loss: both maps hold later-minus-earlier projected
    displacement, the forward map sampled at frame-a pixels, the backward at
    frame-b pixels. Files store standard source-to-target flow, so the
    backward supervision is the negated b->a field.
    """

    def flow_pair(self, a: int, b: int):
        raise NotImplementedError

    def flow(self, a: int, b: int):
        """Standard optical flow from frame a to frame b, or None."""
        raise NotImplementedError


class FileFlowProvider(FlowProvider):
    def __init__(self, directory):
        self.directory = Path(directory)

    def _path(self, a, b):
        return self.directory / f"{a}_{b}.flo"

    def flow(self, a, b):
        if a == b:
            probe = sorted(self.directory.glob("*.flo"))
            if not probe:
                return None
            shape = read_flo(probe[0]).shape
            return np.zeros(shape)
        p = self._path(a, b)
        return read_flo(p) if p.exists() else None

    def flow_pair(self, a, b):
        fwd = self.flow(a, b)
        rev = self.flow(b, a)
        if fwd is None or rev is None:
            return None
        return fwd, -rev


class CallableFlowProvider(FlowProvider):
    """Wraps an analytic flow function f(a, b) -> HxWx2 (standard convention)."""

    def __init__(self, fn):
        self.fn = fn

    def flow(self, a, b):
        return self.fn(a, b)

    def flow_pair(self, a, b):
        fwd = self.fn(a, b)
        rev = self.fn(b, a)
        if fwd is None or rev is None:
            return None
        return fwd, -rev


# ---------------------------------------------------------------------------
# sequence source
# ---------------------------------------------------------------------------

@dataclass
class Frame:
    index: int
    timestamp: float
    color: np.ndarray
    depth: np.ndarray
    static_mask: np.ndarray


@dataclass
class SequenceSource:
    intrinsics: CameraIntrinsics
    timestamps: list
    _loaders: list
    groundtruth: list | None = None        # (timestamp, camera-to-world PoseSE3)
    flow: FlowProvider | None = None

    def __len__(self) -> int:
        return len(self.timestamps)

    def frame(self, i: int) -> Frame:
        color, depth, static_mask = self._loaders[i]()
        if color.shape[:2] != depth.shape or color.shape[:2] != static_mask.shape:
            raise ValueError(f"frame {i}: mismatched image dimensions")
        return Frame(i, self.timestamps[i], color, depth, static_mask)

    def __iter__(self):
        for i in range(len(self)):
            yield self.frame(i)


def _parse_listing(path: Path):
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'timestamp path', got {line!r}")
        try:
            entries.append((float(parts[0]), parts[1]))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad timestamp {parts[0]!r}") from exc
    return entries


def parse_trajectory_file(path) -> list:
    """TUM trajectory rows -> [(timestamp, camera-to-world PoseSE3)]."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        ts, tx, ty, tz, qx, qy, qz, qw = map(float, parts)
        out.append((ts, PoseSE3(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))))
    return out


def load_tum_sequence(root, warn=print, mask_dilation: int = 0) -> SequenceSource:
    """TUM RGB-D directory -> SequenceSource with nearest-stamp association.

    ``mask_dilation`` grows the dynamic region by that many pixels before
    inverting it into the usable-static mask, discarding the mixed rim at
    object boundaries.
    """
    root = Path(root)
    rgb_listing = root / "rgb.txt"
    depth_listing = root / "depth.txt"
    if not rgb_listing.exists() or not depth_listing.exists():
        raise FileNotFoundError(f"{root} is not a TUM sequence (rgb.txt/depth.txt missing)")
    rgb_entries = _parse_listing(rgb_listing)
    depth_entries = _parse_listing(depth_listing)
    depth_ts = np.array([t for t, _ in depth_entries])

    calib = root / "calibration.txt"
    if calib.exists():
        fx, fy, cx, cy = map(float, calib.read_text().split()[:4])
    else:
        fx, fy, cx, cy = TUM_DEFAULT_INTRINSICS
    probe = load_image_rgb(root / rgb_entries[0][1])
    cam = CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy,
                           width=probe.shape[1], height=probe.shape[0])

    timestamps = []
    loaders = []
    taken = set()
    for ts, rgb_rel in rgb_entries:
        j = int(np.argmin(np.abs(depth_ts - ts)))
        if abs(depth_ts[j] - ts) > ASSOCIATION_MAX_DT or j in taken:
            warn(f"skipping frame at {ts}: no depth within {ASSOCIATION_MAX_DT}s")
            continue
        taken.add(j)
        depth_rel = depth_entries[j][1]
        mask_path = root / "mask" / (Path(rgb_rel).stem + ".png")

        def make_loader(rgb_rel=rgb_rel, depth_rel=depth_rel, mask_path=mask_path):
            def load():
                color = load_image_rgb(root / rgb_rel)
                depth = load_image_depth(root / depth_rel)
                if mask_path.exists():
                    dyn = np.asarray(Image.open(mask_path).convert("L")) > 0
                    if mask_dilation > 0 and dyn.any():
                        from scipy import ndimage
                        dyn = ndimage.binary_dilation(dyn, iterations=mask_dilation)
                    static = ~dyn
                else:
                    static = np.ones(color.shape[:2], dtype=bool)
                return color, depth, static
            return load

        timestamps.append(ts)
        loaders.append(make_loader())
    if any(b <= a for a, b in zip(timestamps, timestamps[1:])):
        raise ValueError("timestamps are not strictly increasing after association")

    gt_path = root / "groundtruth.txt"
    gt = parse_trajectory_file(gt_path) if gt_path.exists() else None
    flow_dir = root / "flow"
    flow = FileFlowProvider(flow_dir) if flow_dir.is_dir() else None
    return SequenceSource(cam, timestamps, loaders, gt, flow)


# ---------------------------------------------------------------------------
# synthetic dynamic scenes
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Script for a desk-scale dynamic scene: a textured static backdrop and
    one rigidly moving Gaussian cluster, with scripted camera motion."""

    n_frames: int = 30
    width: int = 80
    height: int = 60
    focal: float = 70.0
    wall_z: float = 2.6
    wall_gaussians: int = 320
    object_gaussians: int = 40
    object_center: tuple = (0.0, 0.0, 1.7)
    object_radius: float = 0.18
    object_sharpness: float = 0.26   # gaussian scale as a fraction of the radius
    object_velocity: tuple = (0.22, 0.0, 0.0)     # meters over the whole sequence
    object_spin: tuple = (0.0, 0.0, 0.0)          # axis-angle over the whole sequence
    camera_sweep: tuple = (0.12, 0.04, 0.0)       # camera translation over the sequence
    camera_yaw: float = 0.04                      # radians over the sequence
    fps: float = 10.0

    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(fx=self.focal, fy=self.focal,
                                cx=(self.width - 1) / 2.0, cy=(self.height - 1) / 2.0,
                                width=self.width, height=self.height)


@dataclass
class SyntheticScene:
    spec: SyntheticSpec
    statics: GaussianSet
    object_canonical: GaussianSet
    cam: CameraIntrinsics
    poses: list                      # world-to-camera per frame
    object_motion: list              # world-space rigid map per frame (q, t)

    def gaussians_at(self, i: int) -> GaussianSet:
        q, t = self.object_motion[i]
        rot = quat_to_rotmat(q)
        obj = self.object_canonical.copy()
        center = np.asarray(self.spec.object_center)
        obj.means = (obj.means - center) @ rot.T + center + t
        obj.rots = np.array([quat_multiply(q, r) for r in obj.rots])
        merged = self.statics.copy()
        merged.append(obj.means, obj.rots, obj.log_scales, obj.opacity_logits,
                      obj.colors, dy=True, birth_frame=0)
        return merged

    def world_motion(self, i: int, j: int, points: np.ndarray) -> np.ndarray:
        """Where frame-i object points sit at frame j (scripted rigid motion)."""
        qi, ti = self.object_motion[i]
        qj, tj = self.object_motion[j]
        center = np.asarray(self.spec.object_center)
        ri = quat_to_rotmat(qi)
        rj = quat_to_rotmat(qj)
        canonical = (points - center - ti) @ ri
        return canonical @ rj.T + center + tj


def _build_synthetic(spec: SyntheticSpec, seed: int) -> SyntheticScene:
    rng = np.random.default_rng(seed)
    cam = spec.camera()

    # static backdrop: jittered grid of fat gaussians on a wall, plus a floor strip
    n = spec.wall_gaussians
    half_w = spec.wall_z * spec.width / (2 * spec.focal) * 1.3
    half_h = spec.wall_z * spec.height / (2 * spec.focal) * 1.3
    cols = int(np.sqrt(n * half_w / half_h))
    rows = max(n // max(cols, 1), 1)
    xs = np.linspace(-half_w, half_w, cols)
    ys = np.linspace(-half_h, half_h, rows)
    gx, gy = np.meshgrid(xs, ys)
    means = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, spec.wall_z)], axis=1)
    means += rng.normal(scale=0.01, size=means.shape)
    means[:, 2] += rng.normal(scale=0.03, size=len(means))
    spacing = max(2 * half_w / max(cols - 1, 1), 2 * half_h / max(rows - 1, 1))
    log_s = np.log(np.full((len(means), 3), spacing * 0.7))
    colors = 0.25 + 0.5 * rng.uniform(size=(len(means), 3))
    statics = GaussianSet(means, np.tile([1.0, 0, 0, 0], (len(means), 1)), log_s,
                          np.full(len(means), 4.0), colors,
                          np.zeros(len(means), dtype=bool))

    # dynamic object: ball of gaussians
    m = spec.object_gaussians
    dirs = rng.normal(size=(m, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = spec.object_radius * rng.uniform(0.2, 1.0, m) ** (1 / 3)
    obj_means = np.asarray(spec.object_center) + dirs * radii[:, None]
    obj_scale = np.log(np.full((m, 3), spec.object_radius * spec.object_sharpness))
    obj_colors = np.stack([rng.uniform(0.6, 0.95, m), rng.uniform(0.1, 0.4, m),
                           rng.uniform(0.1, 0.4, m)], axis=1)
    obj = GaussianSet(obj_means, np.tile([1.0, 0, 0, 0], (m, 1)), obj_scale,
                      np.full(m, 8.0), obj_colors, np.ones(m, dtype=bool))

    poses = []
    motion = []
    for i in range(spec.n_frames):
        a = i / max(spec.n_frames - 1, 1)
        cam_t = -np.asarray(spec.camera_sweep) * a
        yaw = spec.camera_yaw * a
        q_cam = np.array([np.cos(yaw / 2), 0.0, np.sin(yaw / 2), 0.0])
        poses.append(PoseSE3(q_cam, cam_t))
        spin = np.asarray(spec.object_spin) * a
        angle = np.linalg.norm(spin)
        if angle < 1e-12:
            q_obj = np.array([1.0, 0, 0, 0])
        else:
            axis = spin / angle
            q_obj = np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])
        motion.append((q_obj, np.asarray(spec.object_velocity) * a))
    return SyntheticScene(spec, statics, obj, cam, poses, motion)


def generate_synthetic(spec: SyntheticSpec, out_dir, seed: int = 0,
                       flow_max_gap: int = 6) -> SyntheticScene:
    """Render a scripted scene into a TUM-layout directory (deterministic)."""
    from .render import render_set  # local import: dataset <-> render layering

    scene = _build_synthetic(spec, seed)
    cam = scene.cam
    cfg = Config()
    out_dir = Path(out_dir)
    for sub in ("rgb", "depth", "mask", "flow"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    rgb_lines = []
    depth_lines = []
    gt_lines = []
    depths = []
    masks = []
    for i in range(spec.n_frames):
        ts = i / spec.fps
        name = f"{ts:.6f}"
        merged = scene.gaussians_at(i)
        out = render_set(merged, scene.poses[i], cam, cfg)
        obj_only = render_set(merged.dynamic_subset(), scene.poses[i], cam, cfg)
        dyn_region = obj_only.opacity > 0.5
        save_image_rgb(out_dir / "rgb" / f"{name}.png", out.color)
        save_image_depth(out_dir / "depth" / f"{name}.png", out.depth)
        save_image_mask(out_dir / "mask" / f"{name}.png", dyn_region)
        depths.append(out.depth)
        masks.append(dyn_region)
        rgb_lines.append(f"{name} rgb/{name}.png")
        depth_lines.append(f"{name} depth/{name}.png")
        inv = scene.poses[i].inverse()
        w, x, y, z = inv.rotation
        t = inv.translation
        gt_lines.append(" ".join(f"{v:.9f}" for v in (ts, t[0], t[1], t[2], x, y, z, w)))

    atomic_write_text(out_dir / "rgb.txt", "\n".join(rgb_lines) + "\n")
    atomic_write_text(out_dir / "depth.txt", "\n".join(depth_lines) + "\n")
    atomic_write_text(out_dir / "groundtruth.txt", "\n".join(gt_lines) + "\n")
    atomic_write_text(out_dir / "calibration.txt",
                      f"{cam.fx} {cam.fy} {cam.cx} {cam.cy}\n")

    for a in range(spec.n_frames):
        for b in range(max(a - flow_max_gap, 0), min(a + flow_max_gap + 1, spec.n_frames)):
            if a == b:
                continue
            flow = analytic_flow(scene, depths[a], masks[a], a, b)
            write_flo(out_dir / "flow" / f"{a}_{b}.flo", flow)
    return scene


def analytic_flow(scene: SyntheticScene, depth_a: np.ndarray, dyn_a: np.ndarray,
                  a: int, b: int) -> np.ndarray:
    """Exact projection-difference flow of the scripted motion, frame a -> b.

    Static pixels move only with the camera; dynamic pixels additionally
    follow the object's rigid motion. Pixels without depth get zero flow.
    """
    cam = scene.cam
    h, w = depth_a.shape
    vs, us = np.nonzero(depth_a > 0)
    pts = backproject_pixels(us.astype(np.float64), vs.astype(np.float64),
                             depth_a[depth_a > 0], scene.poses[a], cam)
    moved = pts.copy()
    dyn_sel = dyn_a[depth_a > 0]
    if dyn_sel.any():
        moved[dyn_sel] = scene.world_motion(a, b, pts[dyn_sel])
    uv_b, _, valid = project_points(moved, scene.poses[b], cam)
    flow = np.zeros((h, w, 2))
    du = np.where(valid, uv_b[:, 0] - us, 0.0)
    dv = np.where(valid, uv_b[:, 1] - vs, 0.0)
    flow[vs, us, 0] = du
    flow[vs, us, 1] = dv
    return flow


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"S4DC"
CHECKPOINT_VERSION = 1


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    header = json.dumps({"name": name, "dtype": arr.dtype.str,
                         "shape": list(arr.shape)}, sort_keys=True).encode()
    return struct.pack("<I", len(header)) + header + struct.pack("<Q", arr.nbytes) + arr.tobytes()


def _unpack_arrays(buf: bytes) -> dict:
    arrays = {}
    pos = 0
    while pos < len(buf):
        (hlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        meta = json.loads(buf[pos:pos + hlen])
        pos += hlen
        (nbytes,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        arr = np.frombuffer(buf[pos:pos + nbytes], dtype=np.dtype(meta["dtype"]))
        arrays[meta["name"]] = arr.reshape(meta["shape"]).copy()
        pos += nbytes
    return arrays


def save_checkpoint(path, arrays: dict, meta: dict) -> None:
    """Versioned binary container: magic, version, section table, CRC32."""
    sections = [("meta", json.dumps(meta, sort_keys=True).encode("utf-8")),
                ("arrays", b"".join(_pack_array(k, v) for k, v in sorted(arrays.items())))]
    body = b""
    for name, payload in sections:
        nb = name.encode()
        body += struct.pack("<H", len(nb)) + nb + struct.pack("<Q", len(payload)) + payload
    blob = (CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
            + struct.pack("<Q", len(body)) + body + struct.pack("<I", zlib.crc32(body)))
    atomic_write_bytes(path, blob)


def load_checkpoint(path):
    """Returns (arrays dict, meta dict); raises on corruption or bad version."""
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (body_len,) = struct.unpack_from("<Q", blob, 8)
    body = blob[16:16 + body_len]
    if len(body) != body_len:
        raise ValueError(f"{path}: truncated checkpoint")
    (crc,) = struct.unpack_from("<I", blob, 16 + body_len)
    if zlib.crc32(body) != crc:
        raise ValueError(f"{path}: checksum mismatch")
    sections = {}
    pos = 0
    while pos < len(body):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode()
        pos += nlen
        (plen,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        sections[name] = body[pos:pos + plen]
        pos += plen
    meta = json.loads(sections["meta"])
    arrays = _unpack_arrays(sections["arrays"])
    return arrays, meta


# ---------------------------------------------------------------------------
# PLY export
# ---------------------------------------------------------------------------

def export_ply(path, gs: GaussianSet) -> None:
    """Binary little-endian PLY, one vertex per Gaussian."""
    n = len(gs)
    header = "\n".join([
        "ply", "format binary_little_endian 1.0", f"element vertex {n}",
        "property float x", "property float y", "property float z",
        "property float scale_0", "property float scale_1", "property float scale_2",
        "property float rot_0", "property float rot_1", "property float rot_2",
        "property float rot_3", "property float opacity",
        "property uchar red", "property uchar green", "property uchar blue",
        "property uchar dy", "end_header", ""])
    rec = np.zeros(n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                             ("s0", "<f4"), ("s1", "<f4"), ("s2", "<f4"),
                             ("r0", "<f4"), ("r1", "<f4"), ("r2", "<f4"), ("r3", "<f4"),
                             ("op", "<f4"), ("red", "u1"), ("green", "u1"),
                             ("blue", "u1"), ("dy", "u1")])
    rec["x"], rec["y"], rec["z"] = gs.means.T.astype(np.float32)
    scales = gs.scales.astype(np.float32)
    rec["s0"], rec["s1"], rec["s2"] = scales.T
    rec["r0"], rec["r1"], rec["r2"], rec["r3"] = gs.rots.T.astype(np.float32)
    rec["op"] = gs.opacities.astype(np.float32)
    rgb = (np.clip(gs.colors, 0, 1) * 255).round().astype(np.uint8)
    rec["red"], rec["green"], rec["blue"] = rgb.T
    rec["dy"] = gs.dy.astype(np.uint8)
    atomic_write_bytes(path, header.encode("ascii") + rec.tobytes())
