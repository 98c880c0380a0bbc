"""
Differentiable attend (image -> glimpse) and write (glimpse -> canvas).

Poses are scale-and-translate transforms in normalized coordinates, where [-1, 1]
spans the image with corners aligned to the outer pixel centers. A pose row is
(s, tx, ty); the latent z_where stores (log s, tx, ty) and `pose_from_where`
converts it. Every function takes batched inputs: images [B, H, W], poses [B, 3].
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, concat, exp

_SNAP = 1e-9


@dataclass(frozen=True)
class Pose2D:
    """One scale-and-translate transform; s > 0."""

    s: float
    tx: float
    ty: float

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError(f"pose scale must be positive, got {self.s}")

    @classmethod
    def from_where(cls, z_where) -> "Pose2D":
        log_s, tx, ty = (float(v) for v in np.asarray(z_where, dtype=np.float64).reshape(3))
        return cls(float(np.exp(log_s)), tx, ty)

    def as_array(self) -> np.ndarray:
        return np.array([[self.s, self.tx, self.ty]])


def pose_from_where(z_where) -> Tensor:
    """[B, 3] (log s, tx, ty) -> [B, 3] (s, tx, ty), differentiable."""
    z_where = as_tensor(z_where)
    return concat([exp(z_where[:, 0:1]), z_where[:, 1:3]], axis=1)


def inverse_pose(pose) -> Tensor:
    """(s, tx, ty) -> (1/s, -tx/s, -ty/s), the transform undoing `pose`."""
    pose = as_tensor(pose)
    inv_s = 1.0 / pose[:, 0:1]
    return concat([inv_s, -pose[:, 1:3] * inv_s], axis=1)


def canonical_lattice(out_h: int, out_w: int) -> Tuple[np.ndarray, np.ndarray]:
    """Row and column coordinates spanning [-1, 1] (a single sample sits at 0)."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"grid size must be >= 1, got {out_h}x{out_w}")
    ys = np.linspace(-1.0, 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(-1.0, 1.0, out_w) if out_w > 1 else np.zeros(1)
    return ys, xs


def affine_grid(pose, out_h: int, out_w: int) -> Tensor:
    """
    Source sampling coordinates for every output pixel.

    Args:
        pose: [B, 3] rows of (s, tx, ty)
        out_h, out_w: output resolution

    Returns:
        [B, out_h, out_w, 2] with [..., 0] = s * x_c + tx and [..., 1] = s * y_r + ty
    """
    pose = as_tensor(pose)
    if pose.ndim != 2 or pose.shape[1] != 3:
        raise ShapeError(f"affine_grid: pose must be [B, 3], got {pose.shape}")
    ys, xs = canonical_lattice(out_h, out_w)
    lattice_x = np.broadcast_to(xs[None, :], (out_h, out_w))
    lattice_y = np.broadcast_to(ys[:, None], (out_h, out_w))
    s = pose.data[:, 0][:, None, None]
    gx = s * lattice_x + pose.data[:, 1][:, None, None]
    gy = s * lattice_y + pose.data[:, 2][:, None, None]
    grid = np.stack([gx, gy], axis=-1)

    def backward(g):
        g_x, g_y = g[..., 0], g[..., 1]
        d_s = (g_x * lattice_x).sum(axis=(1, 2)) + (g_y * lattice_y).sum(axis=(1, 2))
        return (np.stack([d_s, g_x.sum(axis=(1, 2)), g_y.sum(axis=(1, 2))], axis=1),)

    return Tensor.from_op(grid, (pose,), backward, "affine_grid")


def _to_pixels(coord: np.ndarray, extent: int) -> np.ndarray:
    pixels = (coord + 1.0) * 0.5 * (extent - 1)
    nearest = np.round(pixels)
    return np.where(np.abs(pixels - nearest) < _SNAP, nearest, pixels)


def bilinear_sample(img, grid) -> Tensor:
    """
    Bilinear interpolation of `img` at normalized `grid` coordinates.

    Samples outside the image read as 0. Differentiable in both the pixels and the
    grid (hence in the pose through `affine_grid`).

    Args:
        img: [B, H, W]
        grid: [B, oh, ow, 2] as produced by affine_grid

    Returns:
        [B, oh, ow]
    """
    img = as_tensor(img)
    grid = as_tensor(grid)
    if img.ndim != 3 or grid.ndim != 4 or grid.shape[-1] != 2 or grid.shape[0] != img.shape[0]:
        raise ShapeError(f"bilinear_sample: image {img.shape} and grid {grid.shape} do not match")
    batch, height, width = img.shape
    px = _to_pixels(grid.data[..., 0], width)
    py = _to_pixels(grid.data[..., 1], height)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    wx = px - x0
    wy = py - y0
    b = np.arange(batch)[:, None, None]

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        inside = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
        xc = np.clip(xi, 0, width - 1)
        yc = np.clip(yi, 0, height - 1)
        values = np.where(inside, img.data[b, yc, xc], 0.0)
        weight = (wx if dx else 1.0 - wx) * (wy if dy else 1.0 - wy)
        corners.append((yc, xc, inside, values, weight))

    out = sum(values * weight for _, _, _, values, weight in corners)
    v00, v01, v10, v11 = (c[3] for c in corners)

    def backward(g):
        g_img = np.zeros_like(img.data)
        for yc, xc, inside, _, weight in corners:
            np.add.at(g_img, (np.broadcast_to(b, yc.shape), yc, xc), g * weight * inside)
        d_px = (1.0 - wy) * (v01 - v00) + wy * (v11 - v10)
        d_py = (1.0 - wx) * (v10 - v00) + wx * (v11 - v01)
        g_grid = np.stack(
            [g * d_px * 0.5 * (width - 1), g * d_py * 0.5 * (height - 1)], axis=-1
        )
        return g_img, g_grid

    return Tensor.from_op(out, (img, grid), backward, "bilinear_sample")


def attend(image, pose, out_h: int, out_w: int) -> Tensor:
    """Cut the window described by `pose` out of `image` at out_h x out_w."""
    return bilinear_sample(image, affine_grid(pose, out_h, out_w))


def write(glimpse, pose, height: int, width: int) -> Tensor:
    """
    Place a glimpse onto a zero canvas at `pose` by sampling it with the inverse
    transform. Canvas pixels outside the placed window are 0; very small scales push
    every sample out of bounds and write nothing.

    Args:
        glimpse: [B, gh, gw]
        pose: [B, 3] rows of (s, tx, ty), the same pose used to attend
        height, width: canvas resolution
    """
    return bilinear_sample(glimpse, affine_grid(inverse_pose(pose), height, width))


def window_boxes(pose, height: int, width: int) -> np.ndarray:
    """
    Pixel bounding boxes (x0, y0, x1, y1) of attention windows, for overlays.

    Args:
        pose: [B, 3] array of (s, tx, ty)
    """
    pose = np.asarray(pose, dtype=np.float64).reshape(-1, 3)
    s, tx, ty = pose[:, 0], pose[:, 1], pose[:, 2]
    half_w = 0.5 * (width - 1)
    half_h = 0.5 * (height - 1)
    return np.stack(
        [
            (tx - s + 1.0) * half_w,
            (ty - s + 1.0) * half_h,
            (tx + s + 1.0) * half_w,
            (ty + s + 1.0) * half_h,
        ],
        axis=1,
    )


def window_centers(pose, height: int, width: int) -> np.ndarray:
    """[B, 2] pixel (x, y) of each window center."""
    pose = np.asarray(pose, dtype=np.float64).reshape(-1, 3)
    return np.stack(
        [(pose[:, 1] + 1.0) * 0.5 * (width - 1), (pose[:, 2] + 1.0) * 0.5 * (height - 1)],
        axis=1,
    )


def pixels_to_normalized(x_px, y_px, height: int, width: int) -> Tuple[float, float]:
    """Inverse of `window_centers` for a single point."""
    return (2.0 * x_px / max(width - 1, 1) - 1.0, 2.0 * y_px / max(height - 1, 1) - 1.0)
