"""Semantic-guided edge enhancement: Sobel edge response, three-set point
sampling (edge / disturbed / random), multi-source point-feature extraction,
kernel-1 enhancement stack, and feature substitution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

LABEL_EDGE = 0
LABEL_DISTURBED = 1
LABEL_RANDOM = 2

LABEL_NAMES = {LABEL_EDGE: "edge", LABEL_DISTURBED: "disturbed", LABEL_RANDOM: "random"}

_SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                     [-2.0, 0.0, 2.0],
                     [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


@dataclass
class SamplerConfig:
    n_points: int
    mu: float = 0.4
    disturb_radius: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.n_points <= 0:
            raise ValueError("n_points must be positive")
        if not 0.0 <= 2.0 * self.mu <= 1.0:
            raise ValueError(f"need 2*mu <= 1, got mu={self.mu}")
        if self.disturb_radius < 0:
            raise ValueError("disturb_radius must be non-negative")

    @property
    def n_edge(self) -> int:
        return int(np.floor(self.mu * self.n_points))

    @property
    def n_random(self) -> int:
        return self.n_points - 2 * self.n_edge


@dataclass
class PointSet:
    coords: np.ndarray  # (N, 2) float (x, y) pixel coordinates
    labels: np.ndarray  # (N,) int labels

    @property
    def counts(self):
        return (int((self.labels == LABEL_EDGE).sum()),
                int((self.labels == LABEL_DISTURBED).sum()),
                int((self.labels == LABEL_RANDOM).sum()))

    def __len__(self):
        return self.coords.shape[0]

    def scatter_order(self) -> np.ndarray:
        """Row order for substitution: random first, then edge and disturbed,
        so edge-driven substitutions win pixel collisions."""
        return np.concatenate([np.nonzero(self.labels == LABEL_RANDOM)[0],
                               np.nonzero(self.labels == LABEL_EDGE)[0],
                               np.nonzero(self.labels == LABEL_DISTURBED)[0]])


def _conv2d_same_np(x, k):
    xp = np.pad(x, 1)
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3))
    return np.einsum("hwij,ij->hw", win, k)


def edge_response(mask) -> np.ndarray:
    """Sobel gradient magnitude of a binary mask (zero padding).

    Probability maps are thresholded at 0.5 first.
    """
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"mask must be HxW, got {m.shape}")
    m = (m >= 0.5).astype(np.float64)
    gx = _conv2d_same_np(m, _SOBEL_X)
    gy = _conv2d_same_np(m, _SOBEL_Y)
    return np.sqrt(gx * gx + gy * gy)


def sample_points(response: np.ndarray, cfg: SamplerConfig) -> PointSet:
    """Sample N points: floor(mu*N) strongest-response pixels, the same count
    of [-c,c]-disturbed copies, and the remainder uniform over the image.

    Deterministic for a fixed (response, cfg). Top-k ties break by row-major
    pixel index; if fewer than floor(mu*N) pixels respond, the deficit is
    filled with uniform random pixels (still labeled edge).
    """
    response = np.asarray(response, dtype=np.float64)
    h, w = response.shape
    if cfg.n_points > h * w:
        raise ShapeError(f"cannot sample {cfg.n_points} points from a {h}x{w} image")
    rng = np.random.default_rng(cfg.seed)
    n_e = cfg.n_edge

    flat = response.ravel()
    pos = np.nonzero(flat > 0)[0]
    if pos.size >= n_e:
        # stable sort on negated response keeps row-major order among ties
        top = pos[np.argsort(-flat[pos], kind="stable")[:n_e]]
    else:
        top = pos
    edge_idx = top
    deficit = n_e - edge_idx.size
    if deficit > 0:
        fill = rng.integers(0, h * w, size=deficit)
        edge_idx = np.concatenate([edge_idx, fill])
    ex = (edge_idx % w).astype(np.float64)
    ey = (edge_idx // w).astype(np.float64)
    edge = np.stack([ex, ey], axis=1)

    c = cfg.disturb_radius
    offsets = rng.integers(-c, c + 1, size=(n_e, 2)).astype(np.float64)
    disturbed = edge + offsets
    disturbed[:, 0] = np.clip(disturbed[:, 0], 0, w - 1)
    disturbed[:, 1] = np.clip(disturbed[:, 1], 0, h - 1)

    rand_idx = rng.integers(0, h * w, size=cfg.n_random)
    random_pts = np.stack([(rand_idx % w).astype(np.float64),
                           (rand_idx // w).astype(np.float64)], axis=1)

    coords = np.concatenate([edge, disturbed, random_pts], axis=0)
    labels = np.concatenate([np.full(n_e, LABEL_EDGE),
                             np.full(n_e, LABEL_DISTURBED),
                             np.full(cfg.n_random, LABEL_RANDOM)]).astype(np.int64)
    return PointSet(coords=coords, labels=labels)


def extract_point_features(features, points: PointSet, image_size) -> Tensor:
    """Bilinearly sample each feature level at the point set and concatenate
    channels across levels; coordinates rescale by (W_l/W, H_l/H)."""
    if not features:
        raise ShapeError("extract_point_features needs at least one feature level")
    h, w = image_size
    per_level = []
    for f in features:
        f = ad.as_tensor(f)
        if f.ndim != 3:
            raise ShapeError(f"feature level must be CxHxW, got {f.shape}")
        _, hl, wl = f.shape
        scaled = (points.coords * np.array([wl / w, hl / h])).astype(f.data.dtype)
        per_level.append(ad.grid_sample(f, ad.Tensor(scaled)))
    return ad.concat(per_level, axis=-1) if len(per_level) > 1 else per_level[0]


@dataclass
class PfeParams:
    """Kernel-1 enhancement stack: per-source projections followed by four
    1-D convolutions (ReLU on the first three)."""

    enc_w: object
    enc_b: object
    dec_w: object
    dec_b: object
    sem_w: object
    sem_b: object
    conv_w: list  # four (C_out, C_in) weights
    conv_b: list


def _linear(x, w, b):
    x, w = ad.as_tensor(x), ad.as_tensor(w)
    if x.shape[-1] != w.shape[-1]:
        raise ShapeError(f"channel mismatch: input {x.shape} vs weight {w.shape}")
    return ad.matmul(x, ad.transpose_last2(w)) + ad.as_tensor(b)


def enhance_point_features(f_enc, f_dec, f_sem, params: PfeParams) -> Tensor:
    h = ad.concat([_linear(f_enc, params.enc_w, params.enc_b),
                   _linear(f_dec, params.dec_w, params.dec_b),
                   _linear(f_sem, params.sem_w, params.sem_b)], axis=-1)
    for i, (w, b) in enumerate(zip(params.conv_w, params.conv_b)):
        h = _linear(h, w, b)
        if i < len(params.conv_w) - 1:
            h = ad.relu(h)
    return h


def scatter_replace(depth_features, points: PointSet, point_features,
                    order: np.ndarray | None = None) -> Tensor:
    """Substitute point-feature rows into the feature map at rounded point
    positions; duplicate targets resolve last-write-wins in row order.

    Gradients flow to the winning point rows at replaced pixels and to the
    feature map everywhere else.
    """
    df = ad.as_tensor(depth_features)
    pf = ad.as_tensor(point_features)
    c, h, w = df.shape
    n = len(points)
    if pf.shape != (n, c):
        raise ShapeError(f"point features must be {n}x{c}, got {pf.shape}")
    if n == 0:
        return df + 0.0

    rows = np.arange(n) if order is None else np.asarray(order)
    xs = np.clip(np.round(points.coords[rows, 0]).astype(np.int64), 0, w - 1)
    ys = np.clip(np.round(points.coords[rows, 1]).astype(np.int64), 0, h - 1)
    lin = ys * w + xs
    # keep the last occurrence of each target pixel
    uniq, first_rev = np.unique(lin[::-1], return_index=True)
    winners = rows[len(rows) - 1 - first_rev]

    out = df.data.copy()
    out.reshape(c, h * w)[:, uniq] = pf.data[winners].T

    def bwd(g):
        if df.tape is not None:
            gd = g.copy()
            gd.reshape(c, h * w)[:, uniq] = 0.0
            ad._accum(df, gd)
        if pf.tape is not None:
            gp = np.zeros_like(pf.data)
            gp[winners] = g.reshape(c, h * w)[:, uniq].T
            ad._accum(pf, gp)

    return ad._track(out, (df, pf), bwd)


def boundary_coverage(boundary_mask: np.ndarray, points: PointSet, c: int) -> float:
    """Fraction of boundary pixels within Chebyshev distance c of an edge or
    disturbed sample point."""
    by, bx = np.nonzero(boundary_mask)
    if by.size == 0:
        return 1.0
    sel = points.labels != LABEL_RANDOM
    px = points.coords[sel, 0]
    py = points.coords[sel, 1]
    if px.size == 0:
        return 0.0
    dx = np.abs(bx[:, None] - px[None, :])
    dy = np.abs(by[:, None] - py[None, :])
    cheb = np.maximum(dx, dy).min(axis=1)
    return float((cheb <= c).mean())
