"""Camera model, rigid transforms, and the differentiable view-synthesis warp."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, ShapeError, Tensor


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def inverse_matrix(self) -> np.ndarray:
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "Intrinsics":
        return Intrinsics(self.fx * factor, self.fy * factor,
                          self.cx * factor, self.cy * factor,
                          int(round(self.width * factor)),
                          int(round(self.height * factor)))


def rotation_matrix_np(r: np.ndarray) -> np.ndarray:
    """Rodrigues formula on a plain array (non-differentiable helper)."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r)
    if theta < 1e-8:
        k = _skew_np(r)
        return np.eye(3) + k + 0.5 * (k @ k)
    k = _skew_np(r / theta)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def _skew_np(r):
    return np.array([[0.0, -r[2], r[1]],
                     [r[2], 0.0, -r[0]],
                     [-r[1], r[0], 0.0]])


@dataclass
class RigidTransform:
    """6-DoF rigid transform: axis-angle rotation + translation.

    Fields may be numpy arrays (constant poses) or tracked Tensors
    (pose-network outputs)."""

    rotation: object  # (..., 3) axis-angle, radians
    translation: object  # (..., 3)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.zeros(3), np.zeros(3))

    def matrix(self) -> Tensor:
        """Differentiable (..., 3, 3) rotation matrix."""
        return axis_angle_to_matrix(self.rotation)

    def matrix_np(self) -> np.ndarray:
        return rotation_matrix_np(np.asarray(_data(self.rotation)))

    def inverse(self) -> "RigidTransform":
        rot = np.asarray(_data(self.rotation), dtype=np.float64)
        t = np.asarray(_data(self.translation), dtype=np.float64)
        rm = rotation_matrix_np(rot)
        return RigidTransform(-rot, -(rm.T @ t))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: apply `other` first, then `self` (numpy poses only)."""
        ra = self.matrix_np()
        rb = other.matrix_np()
        rc = ra @ rb
        t = ra @ np.asarray(_data(other.translation)) + np.asarray(_data(self.translation))
        return RigidTransform(_log_rotation(rc), t)

    def apply_np(self, pts: np.ndarray) -> np.ndarray:
        """Transform (3, P) points (numpy poses only)."""
        return self.matrix_np() @ pts + np.asarray(_data(self.translation)).reshape(3, 1)


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def _log_rotation(rm: np.ndarray) -> np.ndarray:
    """Axis-angle of a rotation matrix (inverse Rodrigues)."""
    cos_t = np.clip((np.trace(rm) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    if theta < 1e-8:
        return np.array([rm[2, 1] - rm[1, 2], rm[0, 2] - rm[2, 0], rm[1, 0] - rm[0, 1]]) / 2.0
    axis = np.array([rm[2, 1] - rm[1, 2], rm[0, 2] - rm[2, 0], rm[1, 0] - rm[0, 1]])
    return theta * axis / (2.0 * np.sin(theta))


def axis_angle_to_matrix(r) -> Tensor:
    """Rodrigues formula, differentiable, smooth through ||r|| -> 0.

    Accepts (..., 3); below theta^2 < 1e-8 the sin/cos coefficients switch
    to their series expansions so gradients stay finite at zero rotation.
    """
    r = ad.as_tensor(r)
    if r.shape[-1] != 3:
        raise ShapeError(f"axis-angle vector must have last dim 3, got {r.shape}")
    if not np.all(np.isfinite(r.data)):
        raise DomainError("non-finite axis-angle vector")
    theta2 = ad.tsum(ad.mul(r, r), axis=-1, keepdims=True)  # (...,1)
    small = theta2.data < 1e-8
    safe2 = ad.where(small, ad.Tensor(np.ones_like(theta2.data)), theta2)
    theta = ad.sqrt(safe2)
    # sin(t)/t and (1-cos t)/t^2 with series fallbacks near zero
    a = ad.where(small, 1.0 - theta2 * (1.0 / 6.0), ad.div(ad.sin(theta), theta))
    b = ad.where(small, 0.5 - theta2 * (1.0 / 24.0), ad.div(1.0 - ad.cos(theta), safe2))

    rx = r[..., 0:1]
    ry = r[..., 1:2]
    rz = r[..., 2:3]
    zero = rx * 0.0
    row0 = ad.concat([zero, -rz, ry], axis=-1)
    row1 = ad.concat([rz, zero, -rx], axis=-1)
    row2 = ad.concat([-ry, rx, zero], axis=-1)
    batch = r.shape[:-1]
    k = ad.reshape(ad.concat([row0, row1, row2], axis=-1), batch + (3, 3))
    k2 = ad.matmul(k, k)
    eye = ad.Tensor(np.broadcast_to(np.eye(3, dtype=r.data.dtype),
                                    batch + (3, 3)).copy())
    a_m = ad.reshape(a, batch + (1, 1))
    b_m = ad.reshape(b, batch + (1, 1))
    return ad.add(eye, ad.add(ad.mul(a_m, k), ad.mul(b_m, k2)))


def pixel_grid(intr: Intrinsics) -> np.ndarray:
    """Homogeneous pixel coordinates, shape (3, H*W), row-major."""
    xs, ys = np.meshgrid(np.arange(intr.width, dtype=np.float64),
                         np.arange(intr.height, dtype=np.float64))
    return np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)])


def compute_warp_grid(depth, intr: Intrinsics, transform: RigidTransform):
    """Source-pixel coordinates for every target pixel.

    depth: Tensor (H, W) or (N, H, W), strictly positive.
    Returns (grid, valid): grid is (..., H, W, 2) continuous (x, y) source
    coordinates; valid is a boolean array flagging pixels whose projection
    stayed in front of the camera (z > 1e-6 before clamping).
    """
    depth = ad.as_tensor(depth)
    if np.any(depth.data <= 0):
        raise DomainError("depth must be strictly positive")
    h, w = depth.shape[-2], depth.shape[-1]
    if (h, w) != (intr.height, intr.width):
        raise ShapeError(f"depth shape {depth.shape} does not match intrinsics "
                         f"{intr.height}x{intr.width}")
    batch = depth.shape[:-2]
    rays = ad.Tensor((intr.inverse_matrix() @ pixel_grid(intr))
                     .astype(depth.data.dtype))  # (3, HW)
    d = ad.reshape(depth, batch + (1, h * w))
    cam = ad.mul(d, rays)  # (..., 3, HW)
    rot = axis_angle_to_matrix(transform.rotation)
    t = ad.reshape(ad.as_tensor(transform.translation), batch + (3, 1)) \
        if np.asarray(_data(transform.translation)).ndim == len(batch) + 1 \
        else ad.reshape(ad.as_tensor(transform.translation), (3, 1))
    x = ad.add(ad.matmul(rot, cam), t)
    z = x[..., 2:3, :]
    valid = (z.data > 1e-6).reshape(batch + (h, w))
    z = ad.clamp(z, 1e-6, np.inf)
    u = ad.add(ad.mul(ad.div(x[..., 0:1, :], z), intr.fx), intr.cx)
    v = ad.add(ad.mul(ad.div(x[..., 1:2, :], z), intr.fy), intr.cy)
    grid = ad.transpose_last2(ad.concat([u, v], axis=-2))  # (..., HW, 2)
    return ad.reshape(grid, batch + (h, w, 2)), valid


def warp_image(source, grid) -> Tensor:
    """Synthesize the target view by bilinear sampling of the source.

    source: (C, H, W) with grid (H, W, 2), or batched (N, C, H, W) with
    grid (N, H, W, 2) from compute_warp_grid.
    """
    source = ad.as_tensor(source)
    grid = ad.as_tensor(grid)
    if grid.shape[-1] != 2 or grid.ndim != source.ndim:
        raise ShapeError(f"warp_image expects CxHxW with HxWx2 or NxCxHxW "
                         f"with NxHxWx2, got {source.shape} and {grid.shape}")
    h, w = grid.shape[-3], grid.shape[-2]
    if source.ndim == 3:
        flat = ad.reshape(grid, (h * w, 2))
        sampled = ad.grid_sample(source, flat, channels_first=True)  # (C, HW)
        return ad.reshape(sampled, (source.shape[0], h, w))
    n = source.shape[0]
    flat = ad.reshape(grid, (n, h * w, 2))
    sampled = ad.grid_sample(source, flat, channels_first=True)  # (N, C, HW)
    return ad.reshape(sampled, (n, source.shape[1], h, w))
