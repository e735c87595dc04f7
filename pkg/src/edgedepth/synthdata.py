"""Procedural scene triplets with ground-truth depth, poses, and binary
masks: textured fronto-parallel planes rendered through a pinhole camera
with painter's-algorithm occlusion."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, RigidTransform, rotation_matrix_np


class ParseError(ValueError):
    pass


@dataclass
class DatasetConfig:
    height: int = 64
    width: int = 192
    focal: float | None = None  # defaults to 0.58 * width
    bg_depth_range: tuple = (8.0, 30.0)
    obj_depth_range: tuple = (2.0, 8.0)
    obj_count_range: tuple = (1, 6)
    translation_range: tuple = (0.05, 0.3)
    max_rotation: float = 0.02
    texture_cells_px: float = 8.0  # noise lattice spacing in target pixels

    def intrinsics(self) -> Intrinsics:
        f = self.focal if self.focal is not None else 0.58 * self.width
        return Intrinsics(f, f, self.width / 2.0, self.height / 2.0,
                          self.width, self.height)


@dataclass
class _Layer:
    depth: float
    texture: np.ndarray      # (S, S, 3) noise lattice
    spacing: float           # lattice spacing in world units
    rect: tuple | None       # (x0, x1, y0, y1) world bounds; None = background


@dataclass
class SceneSpec:
    seed: int
    bg_depth: float
    layers: list  # far-to-near _Layer list; layers[0] is the background
    motion_prev: RigidTransform  # T*_{t -> t-1}
    motion_next: RigidTransform  # T*_{t -> t+1}

    @staticmethod
    def random(seed: int, cfg: DatasetConfig | None = None) -> "SceneSpec":
        cfg = cfg or DatasetConfig()
        rng = np.random.default_rng(seed)
        intr = cfg.intrinsics()
        bg_depth = rng.uniform(*cfg.bg_depth_range)
        layers = [_Layer(depth=bg_depth, texture=_lattice(rng), rect=None,
                         spacing=bg_depth * cfg.texture_cells_px / intr.fx)]
        k = int(rng.integers(cfg.obj_count_range[0], cfg.obj_count_range[1] + 1))
        depths = np.sort(rng.uniform(*cfg.obj_depth_range, size=k))[::-1]
        px = 1.0 / intr.fx  # world units per pixel per unit depth
        for d in depths:
            # keep the rectangle center inside the target view at depth d
            half_w_view = d * px * intr.cx
            half_h_view = d * px * intr.cy
            cx = rng.uniform(-0.8 * half_w_view, 0.8 * half_w_view)
            cy = rng.uniform(-0.8 * half_h_view, 0.8 * half_h_view)
            # extents from thin bars (2 px) up to ~40% of the view
            wx = d * px * rng.uniform(1.0, 0.4 * intr.width / 2.0)
            wy = d * px * rng.uniform(1.0, 0.4 * intr.height / 2.0)
            if rng.uniform() < 0.3:  # thin structure
                if rng.uniform() < 0.5:
                    wx = d * px * rng.uniform(1.0, 2.0)
                else:
                    wy = d * px * rng.uniform(1.0, 2.0)
            layers.append(_Layer(depth=float(d), texture=_lattice(rng),
                                 rect=(cx - wx, cx + wx, cy - wy, cy + wy),
                                 spacing=d * cfg.texture_cells_px / intr.fx))
        return SceneSpec(seed=seed, bg_depth=bg_depth, layers=layers,
                         motion_prev=_random_motion(rng, cfg),
                         motion_next=_random_motion(rng, cfg))


def _lattice(rng, size: int = 32) -> np.ndarray:
    return rng.uniform(0.05, 0.95, size=(size, size, 3))


def _random_motion(rng, cfg: DatasetConfig) -> RigidTransform:
    norm = rng.uniform(*cfg.translation_range)
    # bias toward lateral motion so parallax is informative
    direction = rng.normal(size=3) * np.array([1.0, 0.5, 0.5])
    direction /= np.linalg.norm(direction)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, cfg.max_rotation)
    return RigidTransform(axis * angle, direction * norm)


def _sample_texture(layer: _Layer, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Band-limited value noise: smoothstep-interpolated random lattice."""
    size = layer.texture.shape[0]
    u = x / layer.spacing
    v = y / layer.spacing
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    fu = u - u0
    fv = v - v0
    su = fu * fu * (3.0 - 2.0 * fu)
    sv = fv * fv * (3.0 - 2.0 * fv)
    t = layer.texture

    def g(i, j):
        return t[(v0 + j) % size, (u0 + i) % size]

    top = g(0, 0) * (1 - su[..., None]) + g(1, 0) * su[..., None]
    bot = g(0, 1) * (1 - su[..., None]) + g(1, 1) * su[..., None]
    return top * (1 - sv[..., None]) + bot * sv[..., None]  # (..., 3)


@dataclass
class SceneSample:
    prev: np.ndarray    # (3, H, W) in [0,1]
    target: np.ndarray
    next: np.ndarray
    depth: np.ndarray   # (H, W) metric target depth
    mask: np.ndarray    # (H, W) in {0,1}
    pose_prev: RigidTransform  # T*_{t -> t-1}
    pose_next: RigidTransform  # T*_{t -> t+1}
    intrinsics: Intrinsics
    depth_prev: np.ndarray | None = None
    depth_next: np.ndarray | None = None


def _render_view(spec: SceneSpec, intr: Intrinsics, pose: RigidTransform):
    """Render one camera; returns (image (3,H,W), depth (H,W), mask (H,W))."""
    h, w = intr.height, intr.width
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    rays = np.stack([(xs - intr.cx) / intr.fx, (ys - intr.cy) / intr.fy,
                     np.ones_like(xs)])  # (3, H, W) camera rays
    rm = pose.matrix_np()
    t = np.asarray(pose.translation, dtype=np.float64)
    rays_w = np.einsum("ij,jhw->ihw", rm.T, rays)
    t_w = rm.T @ t  # camera center offset in world frame is -t_w

    img = np.zeros((3, h, w))
    depth = np.full((h, w), np.inf)
    mask = np.zeros((h, w))
    for layer in spec.layers:  # far to near: painter's algorithm
        lam = (layer.depth + t_w[2]) / rays_w[2]  # distance along camera ray
        xw = lam * rays_w[0] - t_w[0]
        yw = lam * rays_w[1] - t_w[1]
        inside = lam > 1e-6
        if layer.rect is not None:
            x0, x1, y0, y1 = layer.rect
            inside &= (xw >= x0) & (xw <= x1) & (yw >= y0) & (yw <= y1)
        if not inside.any():
            continue
        tex = _sample_texture(layer, xw[inside], yw[inside])
        for c in range(3):
            img[c][inside] = tex[:, c]
        depth[inside] = lam[inside]
        mask[inside] = 0.0 if layer.rect is None else 1.0
    return img, depth, mask


def render(spec: SceneSpec, cfg: DatasetConfig | None = None) -> SceneSample:
    """Deterministic pinhole rendering of the (prev, target, next) triplet."""
    cfg = cfg or DatasetConfig()
    intr = cfg.intrinsics()
    target, depth, mask = _render_view(spec, intr, RigidTransform.identity())
    prev, depth_prev, _ = _render_view(spec, intr, spec.motion_prev)
    nxt, depth_next, _ = _render_view(spec, intr, spec.motion_next)
    return SceneSample(prev=prev, target=target, next=nxt, depth=depth,
                       mask=mask, pose_prev=spec.motion_prev,
                       pose_next=spec.motion_next, intrinsics=intr,
                       depth_prev=depth_prev, depth_next=depth_next)


def nonoccluded_mask(sample: SceneSample, which: str,
                     rel_tol: float = 0.03) -> np.ndarray:
    """Target pixels whose projection into the chosen source sees consistent
    depth (excludes occlusions, disocclusions, and depth-edge mixtures)."""
    pose = sample.pose_prev if which == "prev" else sample.pose_next
    src_depth = sample.depth_prev if which == "prev" else sample.depth_next
    intr = sample.intrinsics
    h, w = sample.depth.shape
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    rays = np.stack([(xs - intr.cx) / intr.fx, (ys - intr.cy) / intr.fy,
                     np.ones_like(xs)])
    cam = rays * sample.depth
    x_s = np.einsum("ij,jhw->ihw", pose.matrix_np(), cam) \
        + np.asarray(pose.translation).reshape(3, 1, 1)
    z = x_s[2]
    u = intr.fx * x_s[0] / z + intr.cx
    v = intr.fy * x_s[1] / z + intr.cy
    ok = (z > 1e-6) & (u >= 1) & (u <= w - 2) & (v >= 1) & (v <= h - 2)
    ui = np.clip(u, 0, w - 1)
    vi = np.clip(v, 0, h - 1)
    u0 = np.clip(np.floor(ui).astype(int), 0, w - 2)
    v0 = np.clip(np.floor(vi).astype(int), 0, h - 2)
    # depth must agree on all four bilinear corners (kills edge mixtures)
    for dv in (0, 1):
        for du in (0, 1):
            ds = src_depth[v0 + dv, u0 + du]
            ok &= np.abs(ds - z) <= rel_tol * z
    # also drop target pixels adjacent to a depth discontinuity
    edge = np.zeros_like(ok)
    dd = np.abs(np.diff(sample.depth, axis=0)) > 0.01
    edge[:-1] |= dd
    edge[1:] |= dd
    dd = np.abs(np.diff(sample.depth, axis=1)) > 0.01
    edge[:, :-1] |= dd
    edge[:, 1:] |= dd
    return ok & ~edge


# ---------------------------------------------------------------------------
# file formats


def write_ppm(path, image: np.ndarray):
    """image: (3, H, W) in [0,1] -> binary P6, maxval 255."""
    q = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape[1:]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(q.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    magic, (w, h), maxval, data, off = _read_netpbm(path, b"P6", 3)
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / maxval


def write_pgm(path, image: np.ndarray):
    q = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(q.tobytes())


def read_pgm(path) -> np.ndarray:
    magic, (w, h), maxval, data, off = _read_netpbm(path, b"P5", 1)
    return data.reshape(h, w).astype(np.float64) / maxval


def _read_netpbm(path, magic, channels):
    with open(path, "rb") as f:
        blob = f.read()
    fields = []
    off = 0
    while len(fields) < 4:
        while off < len(blob) and blob[off:off + 1].isspace():
            off += 1
        if off < len(blob) and blob[off:off + 1] == b"#":
            while off < len(blob) and blob[off:off + 1] != b"\n":
                off += 1
            continue
        start = off
        while off < len(blob) and not blob[off:off + 1].isspace():
            off += 1
        if off == start:
            raise ParseError(f"{path}: truncated header at byte {off}")
        fields.append(blob[start:off])
    if fields[0] != magic:
        raise ParseError(f"{path}: expected {magic.decode()} magic at byte 0, "
                         f"got {fields[0]!r}")
    off += 1  # single whitespace after maxval
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as e:
        raise ParseError(f"{path}: bad header field: {e}") from e
    need = w * h * channels
    data = np.frombuffer(blob[off:], dtype=np.uint8)
    if data.size < need:
        raise ParseError(f"{path}: truncated pixel data at byte "
                         f"{off + data.size}, need {need} bytes")
    return fields[0], (w, h), maxval, data[:need], off


def write_pfm(path, depth: np.ndarray):
    """Grayscale PFM, little-endian (scale -1.0), rows bottom-up."""
    d = np.asarray(depth, dtype="<f4")
    h, w = d.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode())
        f.write(d[::-1].tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4:
        raise ParseError(f"{path}: truncated PFM header")
    if parts[0] != b"Pf":
        raise ParseError(f"{path}: expected Pf magic at byte 0, got {parts[0]!r}")
    try:
        w, h = (int(v) for v in parts[1].split())
        scale = float(parts[2])
    except ValueError as e:
        raise ParseError(f"{path}: bad PFM header: {e}") from e
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(parts[3], dtype=dtype)
    off = len(blob) - len(parts[3])
    if data.size < w * h:
        raise ParseError(f"{path}: truncated PFM data at byte "
                         f"{off + data.size * 4}, need {w * h * 4} bytes")
    return data[:w * h].reshape(h, w)[::-1].copy()


def _pose_line(t: RigidTransform) -> str:
    r = np.asarray(t.rotation, dtype=np.float64)
    tr = np.asarray(t.translation, dtype=np.float64)
    return " ".join(repr(float(v)) for v in np.concatenate([r, tr]))


def write_sample(scene_dir, sample: SceneSample):
    os.makedirs(scene_dir, exist_ok=True)
    write_ppm(os.path.join(scene_dir, "prev.ppm"), sample.prev)
    write_ppm(os.path.join(scene_dir, "target.ppm"), sample.target)
    write_ppm(os.path.join(scene_dir, "next.ppm"), sample.next)
    write_pfm(os.path.join(scene_dir, "depth.pfm"), sample.depth)
    write_pgm(os.path.join(scene_dir, "mask.pgm"), sample.mask)
    intr = sample.intrinsics
    with open(os.path.join(scene_dir, "meta.txt"), "w") as f:
        f.write(f"{intr.fx!r} {intr.fy!r} {intr.cx!r} {intr.cy!r}\n")
        f.write(_pose_line(sample.pose_prev) + "\n")
        f.write(_pose_line(sample.pose_next) + "\n")


def read_sample(scene_dir) -> SceneSample:
    meta_path = os.path.join(scene_dir, "meta.txt")
    try:
        with open(meta_path) as f:
            lines = [ln.strip() for ln in f if ln.strip()]
        fx, fy, cx, cy = (float(v) for v in lines[0].split())
        prev_vals = np.array([float(v) for v in lines[1].split()])
        next_vals = np.array([float(v) for v in lines[2].split()])
    except (IndexError, ValueError) as e:
        raise ParseError(f"{meta_path}: malformed metadata: {e}") from e
    depth = read_pfm(os.path.join(scene_dir, "depth.pfm"))
    mask = (read_pgm(os.path.join(scene_dir, "mask.pgm")) >= 0.5).astype(np.float64)
    h, w = depth.shape
    return SceneSample(
        prev=read_ppm(os.path.join(scene_dir, "prev.ppm")),
        target=read_ppm(os.path.join(scene_dir, "target.ppm")),
        next=read_ppm(os.path.join(scene_dir, "next.ppm")),
        depth=depth.astype(np.float64), mask=mask,
        pose_prev=RigidTransform(prev_vals[:3], prev_vals[3:]),
        pose_next=RigidTransform(next_vals[:3], next_vals[3:]),
        intrinsics=Intrinsics(fx, fy, cx, cy, w, h))


def render_dataset(out_dir, count: int, seed: int,
                   cfg: DatasetConfig | None = None) -> list:
    """Render `count` disjoint-seed scenes into scene_%06d directories.

    Also records the ground-truth edge pixel count of every mask in
    edge_counts.txt (for sampler budget checks).
    """
    from .seem import edge_response

    cfg = cfg or DatasetConfig()
    os.makedirs(out_dir, exist_ok=True)
    dirs = []
    counts = []
    for i in range(count):
        spec = SceneSpec.random(seed + i, cfg)
        sample = render(spec, cfg)
        scene_dir = os.path.join(out_dir, f"scene_{i:06d}")
        write_sample(scene_dir, sample)
        dirs.append(scene_dir)
        counts.append(int((edge_response(sample.mask) > 0).sum()))
    with open(os.path.join(out_dir, "edge_counts.txt"), "w") as f:
        for d, c in zip(dirs, counts):
            f.write(f"{os.path.basename(d)} {c}\n")
    return dirs
