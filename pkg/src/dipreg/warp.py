"""Deformation algebra: identity grid, bilinear warping and Jacobian analysis.

Coordinates are in pixels with pixel centres on integers and the origin at the
top-left.  Channel 0 of a grid or displacement is x (column), channel 1 is y
(row).
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .core import Tensor, as_tensor, make_node


def identity_grid(h: int, w: int) -> Tensor:
    if h < 1 or w < 1:
        raise ValueError(f"grid size must be positive, got {h}x{w}")
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    return Tensor(np.stack([xs, ys]))


def deformation(u: Tensor) -> Tensor:
    """phi = x + u for a 2 x H x W displacement ``u``."""
    u = as_tensor(u)
    if u.data.ndim != 3 or u.shape[0] != 2:
        raise ValueError(f"displacement must be 2 x H x W, got {u.shape}")
    return identity_grid(*u.shape[1:]) + u


def _cell(coord: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Clamp ``coord`` to [0, n-1]; return the lower index, upper index, the
    fractional weight and d(clamped)/d(coord)."""
    inside = (coord >= 0.0) & (coord <= n - 1)
    c = np.clip(coord, 0.0, n - 1)
    if n == 1:
        zeros = np.zeros(coord.shape, dtype=np.intp)
        return zeros, zeros, np.zeros(coord.shape), inside.astype(np.float64)
    i0 = np.minimum(np.floor(c).astype(np.intp), n - 2)
    return i0, i0 + 1, c - i0, inside.astype(np.float64)


def warp(image: Tensor, phi: Tensor) -> Tensor:
    """Sample ``image`` (C x H x W) bilinearly at the absolute coordinates in
    ``phi`` (2 x H x W).  Samples outside the image are clamped to the border.
    Differentiable with respect to both ``image`` and ``phi``."""
    image, phi = as_tensor(image), as_tensor(phi)
    if image.data.ndim != 3:
        raise ValueError(f"warp expects a C x H x W image, got {image.shape}")
    if phi.data.ndim != 3 or phi.shape[0] != 2:
        raise ValueError(f"deformation grid must be 2 x H x W, got {phi.shape}")
    c, h, w = image.shape
    if phi.shape[1:] != (h, w):
        raise ValueError(f"grid size {phi.shape[1:]} does not match image size {(h, w)}")

    x0, x1, wx, dx = _cell(phi.data[0], w)
    y0, y1, wy, dy = _cell(phi.data[1], h)
    img = image.data
    v00, v01 = img[:, y0, x0], img[:, y0, x1]
    v10, v11 = img[:, y1, x0], img[:, y1, x1]
    top = v00 * (1.0 - wx) + v01 * wx
    bottom = v10 * (1.0 - wx) + v11 * wx
    out = top * (1.0 - wy) + bottom * wy

    def grad_fn(g):
        gimg = gphi = None
        if image.requires_grad:
            hw = h * w
            gimg = np.empty((c, hw))
            corners = ((y0 * w + x0, (1 - wy) * (1 - wx)), (y0 * w + x1, (1 - wy) * wx),
                       (y1 * w + x0, wy * (1 - wx)), (y1 * w + x1, wy * wx))
            for ch in range(c):
                acc = np.zeros(hw)
                for idx, weight in corners:
                    acc += np.bincount(idx.ravel(), (weight * g[ch]).ravel(), minlength=hw)
                gimg[ch] = acc
            gimg = gimg.reshape(c, h, w)
        if phi.requires_grad:
            d_dx = (1.0 - wy) * (v01 - v00) + wy * (v11 - v10)
            d_dy = bottom - top
            gphi = np.stack([(g * d_dx).sum(axis=0) * dx, (g * d_dy).sum(axis=0) * dy])
        return gimg, gphi

    return make_node(out, (image, phi), grad_fn, "warp")


def jacobian_det(phi) -> np.ndarray:
    """Per-pixel determinant of the 2x2 Jacobian of ``phi``: central
    differences inside, one-sided differences on the border."""
    p = phi.data if isinstance(phi, Tensor) else np.asarray(phi, dtype=np.float64)
    if p.ndim != 3 or p.shape[0] != 2:
        raise ValueError(f"deformation grid must be 2 x H x W, got {p.shape}")
    if p.shape[1] < 2 or p.shape[2] < 2:
        raise ValueError(f"jacobian_det needs H, W >= 2, got {p.shape[1:]}")
    dxdy, dxdx = np.gradient(p[0], axis=(0, 1))
    dydy, dydx = np.gradient(p[1], axis=(0, 1))
    return dxdx * dydy - dxdy * dydx


class DiffeoStats(NamedTuple):
    mean: float
    std: float
    negative_fraction: float


def diffeo_stats(det: np.ndarray) -> DiffeoStats:
    """Mean and population std of det J, and the fraction of pixels with det J <= 0."""
    det = np.asarray(det, dtype=np.float64)
    return DiffeoStats(float(det.mean()), float(det.std()), float(np.mean(det <= 0.0)))
