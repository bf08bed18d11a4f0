"""Differentiable layers used by the displacement generator.

All layers operate on a single ``C x H x W`` sample (no batch axis).
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_node

DEFAULT_SLOPE = 0.1


def _check_chw(x: Tensor, name: str) -> None:
    if x.data.ndim != 3:
        raise ValueError(f"{name} expects a C x H x W tensor, got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2D cross-correlation.

    ``x`` is ``Cin x H x W``, ``weight`` is ``Cout x Cin x k x k`` with odd
    ``k``; the result is ``Cout x H' x W'`` with
    ``H' = (H + 2*padding - k) // stride + 1``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check_chw(x, "conv2d")
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d weight must be Cout x Cin x k x k, got {weight.shape}")
    cout, cin, k, _ = weight.shape
    if k % 2 == 0:
        raise ValueError(f"conv2d kernel size must be odd, got {k}")
    if x.shape[0] != cin:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.shape[0]} channels, weight expects {cin}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    _, h, w = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output would be empty for input {x.shape} and kernel {k}")

    xp = _pad(x.data, padding)
    cols = _im2col(xp, k, stride, ho, wo)
    w2 = weight.data.reshape(cout, cin * k * k)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(cout, ho, wo)

    def grad_fn(g):
        g2 = g.reshape(cout, ho * wo)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1:
                # transposed convolution: correlate the padded output gradient
                # with the flipped, channel-swapped kernel
                flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                gcols = _im2col(_pad(g, k - 1 - padding), k, 1, h, w)
                gx = (flipped.reshape(cin, cout * k * k) @ gcols).reshape(cin, h, w)
            else:
                gcols = (w2.T @ g2).reshape(cin, k, k, ho, wo)
                gxp = np.zeros(xp.shape)
                for i in range(k):
                    for j in range(k):
                        gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
                gx = gxp[:, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, grad_fn, "conv2d")


def _pad(a: np.ndarray, p: int) -> np.ndarray:
    if p <= 0:
        return a
    out = np.zeros((a.shape[0], a.shape[1] + 2 * p, a.shape[2] + 2 * p))
    out[:, p:-p, p:-p] = a
    return out


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(C, Hp, Wp) -> (C*k*k, Ho*Wo) patch matrix."""
    c = xp.shape[0]
    if k == 1:
        sub = xp[:, ::stride, ::stride][:, :ho, :wo] if stride > 1 else xp
        return np.ascontiguousarray(sub).reshape(c, ho * wo)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * k * k, ho * wo)


@lru_cache(maxsize=64)
def _upsample_matrix(n: int) -> np.ndarray:
    """Linear map from n samples to 2n samples, align_corners=False."""
    m = np.zeros((2 * n, n))
    for dst in range(2 * n):
        src = max((dst + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[dst, i0] += 1.0 - frac
        m[dst, i1] += frac
    m.setflags(write=False)
    return m


def upsample_bilinear2x(x: Tensor) -> Tensor:
    """Double both spatial extents by bilinear interpolation
    (half-pixel centres, edge samples clamped)."""
    x = as_tensor(x)
    _check_chw(x, "upsample_bilinear2x")
    _, h, w = x.shape
    if h < 1 or w < 1:
        raise ValueError(f"upsample_bilinear2x needs a non-empty input, got {x.shape}")
    mh, mw = _upsample_matrix(h), _upsample_matrix(w)
    out = np.matmul(np.matmul(mh, x.data), mw.T)
    return make_node(out, (x,), lambda g: (np.matmul(np.matmul(mh.T, g), mw),), "upsample")


def leaky_relu(x: Tensor, slope: float = DEFAULT_SLOPE) -> Tensor:
    """``max(x, slope*x)``; the derivative at exactly 0 is taken as ``slope``."""
    x = as_tensor(x)
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in [0, 1), got {slope}")
    out = np.maximum(x.data, slope * x.data) if slope > 0 else np.maximum(x.data, 0.0)
    return make_node(out, (x,), lambda g: (np.where(x.data > 0, g, slope * g),), "leaky_relu")


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize every channel to zero mean and unit (population) variance."""
    x = as_tensor(x)
    _check_chw(x, "instance_norm")
    c, h, w = x.shape
    n = h * w
    if n < 2:
        raise ValueError(f"instance_norm needs at least 2 pixels per channel, got {x.shape}")
    xhat = x.data.reshape(c, n) - x.data.reshape(c, n).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.einsum("ij,ij->i", xhat, xhat) / n + eps)
    xhat *= inv_std[:, None]

    def grad_fn(g):
        g = g.reshape(c, n)
        proj = np.einsum("ij,ij->i", g, xhat) / n
        gx = g - g.mean(axis=1, keepdims=True)
        gx -= xhat * proj[:, None]
        gx *= inv_std[:, None]
        return (gx.reshape(c, h, w),)

    return make_node(xhat.reshape(c, h, w), (x,), grad_fn, "instance_norm")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a`` then ``b`` along the channel axis."""
    a, b = as_tensor(a), as_tensor(b)
    _check_chw(a, "concat_channels")
    _check_chw(b, "concat_channels")
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(
            f"concat_channels spatial mismatch: {a.shape[1:]} vs {b.shape[1:]}")
    ca = a.shape[0]
    return make_node(np.concatenate([a.data, b.data], axis=0), (a, b),
                     lambda g: (g[:ca], g[ca:]), "concat")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    _check_chw(x, "slice_channels")

    def grad_fn(g):
        full = np.zeros(x.shape)
        full[start:stop] = g
        return (full,)

    return make_node(x.data[start:stop].copy(), (x,), grad_fn, "slice_channels")
