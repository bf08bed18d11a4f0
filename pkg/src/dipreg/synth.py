"""Synthetic image pairs with a known smooth, invertible deformation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .core import Rng, Tensor
from .engine import ImagePair
from .warp import deformation, diffeo_stats, jacobian_det, warp

PATTERNS = ("blobs", "rings")
MAX_ATTEMPTS = 10


@dataclass
class SynthSpec:
    size: tuple[int, int] = (128, 128)
    pattern: str = "blobs"
    base_image: str | None = None
    grid_spacing: int = 32
    max_displacement: float = 8.0
    sigma: float = 1.0
    seed: int = 0


def _normalize(img: np.ndarray, lo: float = 0.05, hi: float = 0.95) -> np.ndarray:
    span = img.max() - img.min()
    if span == 0:
        return np.full(img.shape, 0.5)
    return lo + (hi - lo) * (img - img.min()) / span


def make_pattern(name: str, h: int, w: int, rng: Rng) -> np.ndarray:
    """A textured H x W image in [0.05, 0.95]."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    if name == "blobs":
        img = np.zeros((h, w))
        n = max(8, (h * w) // 150)
        cx, cy = rng.uniform(n, 0, w), rng.uniform(n, 0, h)
        radius = rng.uniform(n, 2.0, 6.0)
        amp = rng.uniform(n, -1.0, 1.0)
        for x0, y0, r, a in zip(cx, cy, radius, amp):
            img += a * np.exp(-((xs - x0) ** 2 + (ys - y0) ** 2) / (2 * r * r))
        img += 2.0 * gaussian_filter(rng.normal((h, w)), 3.0, mode="reflect")
        return _normalize(img)
    if name == "rings":
        r = np.hypot(xs - w / 2, ys - h / 2)
        img = np.sin(r / 3.0) + 0.5 * np.cos(xs / 7.0) * np.sin(ys / 5.0)
        return _normalize(img)
    raise ValueError(f"unknown pattern {name!r}; choose one of {PATTERNS}")


def random_field(h: int, w: int, spacing: int, max_disp: float, sigma: float,
                 rng: Rng) -> np.ndarray:
    """Smooth 2 x H x W displacement from a coarse control grid, bounded by ``max_disp``."""
    gh, gw = h // spacing + 2, w // spacing + 2
    coarse = rng.uniform((2, gh, gw), -1.0, 1.0)
    if sigma > 0:
        coarse = np.stack([gaussian_filter(c, sigma, mode="nearest") for c in coarse])
    peak = np.abs(coarse).max()
    if peak > 0:
        coarse *= max_disp / peak
    # bilinear upsampling of the control grid to pixel resolution
    gy = np.linspace(0, gh - 1, h)
    gx = np.linspace(0, gw - 1, w)
    rows, cols = np.meshgrid(gy, gx, indexing="ij")
    return np.stack([map_coordinates(c, [rows, cols], order=1, mode="nearest") for c in coarse])


def synth_pair(spec: SynthSpec, base: np.ndarray | None = None) -> tuple[ImagePair, np.ndarray]:
    """Return (pair, ground-truth displacement) with target = warp(input, x + u_gt)."""
    h, w = base.shape[-2:] if base is not None else spec.size
    if spec.max_displacement < 0:
        raise ValueError("max_displacement must be nonnegative")
    if spec.max_displacement >= min(h, w) / 4:
        raise ValueError(
            f"max_displacement {spec.max_displacement} must stay below min(H, W)/4 = {min(h, w) / 4}")
    if spec.grid_spacing < 1:
        raise ValueError("grid_spacing must be positive")
    rng = Rng(spec.seed)
    image = (np.asarray(base, dtype=np.float64).reshape(h, w) if base is not None
             else make_pattern(spec.pattern, h, w, rng))
    if spec.max_displacement == 0:
        return ImagePair(image[None], image[None].copy()), np.zeros((2, h, w))
    for _ in range(MAX_ATTEMPTS):
        u = random_field(h, w, spec.grid_spacing, spec.max_displacement, spec.sigma, rng)
        phi = deformation(Tensor(u))
        if diffeo_stats(jacobian_det(phi)).negative_fraction == 0.0:
            target = warp(Tensor(image[None]), phi).data
            return ImagePair(image[None], target), u
    raise ValueError(
        f"{MAX_ATTEMPTS} consecutive non-invertible deformations drawn; "
        f"reduce max_displacement (currently {spec.max_displacement})")
