#!/usr/bin/env python3
"""
Differentiable affine warping: grid generation, bilinear resampling, inversion

Conventions:
- normalized coordinates in [-1, 1] with align-corners (pixel 0 -> -1, pixel n-1 -> +1)
- a transform maps OUTPUT coordinates to SOURCE coordinates (gather semantics)
- samples outside the source image read 0 (black background)
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

import tensor_core as tc
from errors import DimensionError, SingularTransformError
from tensor_core import Tensor

SINGULARITY_THRESHOLD = 1e-6
IDENTITY_PARAMS = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


@dataclass(frozen=True)
class AffineTransform:
    """A batch of 2x3 maps [a b tx; c d ty], stored row-wise as theta[n, 6]"""

    theta: Tensor

    @classmethod
    def identity(cls, n: int = 1) -> "AffineTransform":
        return cls(Tensor(np.tile(IDENTITY_PARAMS, (n, 1))))

    @classmethod
    def from_matrix(cls, m, requires_grad: bool = False) -> "AffineTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape[-2:] != (2, 3):
            raise DimensionError(f"affine matrix must be 2x3, got {m.shape}")
        return cls(Tensor(m.reshape(-1, 6), requires_grad=requires_grad))

    @property
    def matrix(self) -> np.ndarray:
        return self.theta.data.reshape(-1, 2, 3)

    def __len__(self) -> int:
        return self.theta.shape[0]

    def det(self) -> np.ndarray:
        p = self.theta.data
        return p[:, 0] * p[:, 4] - p[:, 1] * p[:, 3]


def _base_coords(out_h: int, out_w: int) -> np.ndarray:
    """(x, y, 1) rows for every output pixel, row-major"""
    ys = np.linspace(-1.0, 1.0, out_h)
    xs = np.linspace(-1.0, 1.0, out_w)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), np.ones(out_h * out_w)], axis=1)


def make_grid(t: AffineTransform, out_h: int, out_w: int) -> Tensor:
    """Normalized source coordinates per output pixel, shape [n, out_h, out_w, 2] (x, y)"""
    if out_h < 2 or out_w < 2:
        raise DimensionError(f"grid extent must be >= 2, got {out_h}x{out_w}")
    n = len(t)
    base_t = Tensor._wrap(_base_coords(out_h, out_w).T)
    rows = tc.reshape(t.theta, (2 * n, 3))
    coords = tc.matmul(rows, base_t)
    coords = tc.reshape(coords, (n, 2, out_h, out_w))
    return tc.transpose(coords, (0, 2, 3, 1))


def _corners(src: np.ndarray, gx: np.ndarray, gy: np.ndarray):
    n, h, w = src.shape
    xp = np.clip((gx + 1.0) * (w - 1) / 2.0, -2.0, w + 1.0)
    yp = np.clip((gy + 1.0) * (h - 1) / 2.0, -2.0, h + 1.0)
    x0 = np.floor(xp)
    y0 = np.floor(yp)
    wx = xp - x0
    wy = yp - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    offsets = (np.arange(n) * h * w)[:, None]
    flat_src = src.reshape(-1)
    out = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            flat = offsets + np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
            vals = np.where(valid, flat_src[flat], 0.0)
            kx = wx if dx else 1.0 - wx
            ky = wy if dy else 1.0 - wy
            out.append((dx, dy, flat, valid, vals, kx, ky))
    return out


def _sample_array(src: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    total = np.zeros_like(gx)
    for _, _, _, _, vals, kx, ky in _corners(src, gx, gy):
        total += kx * ky * vals
    return total


def bilinear_sample(src: Tensor, grid: Tensor) -> Tensor:
    """Sample src [n,h,w] (or [h,w]) at grid [n,oh,ow,2] (or [oh,ow,2]) with zero padding"""
    src, grid = tc.as_tensor(src), tc.as_tensor(grid)
    single = src.ndim == 2
    if single:
        if grid.ndim != 3:
            raise DimensionError(f"grid for a single image must be [oh, ow, 2], got {grid.shape}")
        src = tc.reshape(src, (1,) + src.shape)
        grid = tc.reshape(grid, (1,) + grid.shape)
    if src.ndim != 3 or grid.ndim != 4 or grid.shape[-1] != 2 or grid.shape[0] != src.shape[0]:
        raise DimensionError(f"bilinear_sample: src {src.shape} incompatible with grid {grid.shape}")

    n, h, w = src.shape
    _, oh, ow, _ = grid.shape
    gx = grid.data[..., 0].reshape(n, -1)
    gy = grid.data[..., 1].reshape(n, -1)
    corners = _corners(src.data, gx, gy)
    out = np.zeros_like(gx)
    for _, _, _, _, vals, kx, ky in corners:
        out += kx * ky * vals

    def rule(g):
        g = g.reshape(n, -1)
        g_src = np.zeros(n * h * w)
        dxp = np.zeros_like(gx)
        dyp = np.zeros_like(gy)
        for dx, dy, flat, valid, vals, kx, ky in corners:
            g_src += np.bincount(flat[valid], weights=(g * kx * ky)[valid], minlength=n * h * w)
            dxp += (1.0 if dx else -1.0) * ky * vals
            dyp += (1.0 if dy else -1.0) * kx * vals
        g_grid = np.stack([g * dxp * (w - 1) / 2.0, g * dyp * (h - 1) / 2.0], axis=-1)
        return g_src.reshape(n, h, w), g_grid.reshape(n, oh, ow, 2)

    result = tc.record(out.reshape(n, oh, ow), (src, grid), rule, "bilinear_sample")
    return tc.reshape(result, (oh, ow)) if single else result


def invert(t: AffineTransform) -> AffineTransform:
    """Differentiable inverse; raises SingularTransformError when |det| <= 1e-6"""
    det_values = t.det()
    bad = np.flatnonzero(np.abs(det_values) <= SINGULARITY_THRESHOLD)
    if bad.size:
        raise SingularTransformError(det_values[bad], rows=bad.tolist())

    p = t.theta
    a, b, tx = p[:, 0], p[:, 1], p[:, 2]
    c, d, ty = p[:, 3], p[:, 4], p[:, 5]
    det = a * d - b * c
    ia, ib = d / det, -b / det
    ic, id_ = -c / det, a / det
    itx = -(ia * tx + ib * ty)
    ity = -(ic * tx + id_ * ty)
    n = len(t)
    cols = [tc.reshape(v, (n, 1)) for v in (ia, ib, itx, ic, id_, ity)]
    return AffineTransform(tc.concat(cols, axis=1))


def stn(src: Tensor, t: AffineTransform, out_h: Optional[int] = None,
        out_w: Optional[int] = None) -> Tensor:
    """STN(C, T): resample src through transform t onto an out_h x out_w grid"""
    src = tc.as_tensor(src)
    h, w = src.shape[-2:]
    grid = make_grid(t, out_h or h, out_w or w)
    if src.ndim == 2:
        if len(t) != 1:
            raise DimensionError(f"single image needs a single transform, got {len(t)}")
        return bilinear_sample(src, tc.reshape(grid, grid.shape[1:]))
    return bilinear_sample(src, grid)


def resample_array(images: np.ndarray, out_h: int, out_w: int,
                   matrix: Optional[np.ndarray] = None) -> np.ndarray:
    """Plain numpy warp (no tape), used for dataset resizing"""
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    params = IDENTITY_PARAMS if matrix is None else np.asarray(matrix, dtype=np.float64).reshape(6)
    coords = _base_coords(out_h, out_w) @ params.reshape(2, 3).T
    gx = np.tile(coords[:, 0], (n, 1))
    gy = np.tile(coords[:, 1], (n, 1))
    return _sample_array(images, gx, gy).reshape(n, out_h, out_w)
