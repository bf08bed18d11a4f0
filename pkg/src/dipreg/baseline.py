"""Classical variational registration: Adam on a free displacement field with
an explicit first-order (diffusion) smoothness penalty."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Tensor, as_tensor, make_node
from .engine import ImagePair, RunResult, mae_loss, optimize
from .warp import deformation, warp


@dataclass
class BaselineConfig:
    lam: float = 0.1
    iterations: int = 2000
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    log_every: int = 10
    best_snapshot: bool = False
    patience: int = 0

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.log_every < 1:
            raise ValueError(f"log_every must be >= 1, got {self.log_every}")


def smoothness_penalty(u) -> Tensor:
    """Half the mean squared forward difference along x plus the same along y,
    summed over displacement components.  A unit ramp in one component scores 0.5."""
    u = as_tensor(u)
    if u.data.ndim != 3 or u.shape[1] < 2 or u.shape[2] < 2:
        raise ValueError(f"smoothness_penalty needs a C x H x W field with H, W >= 2, got {u.shape}")
    c, h, w = u.shape
    dx = np.diff(u.data, axis=2)
    dy = np.diff(u.data, axis=1)
    nx, ny = h * (w - 1), (h - 1) * w
    value = 0.5 * ((dx * dx).sum() / nx + (dy * dy).sum() / ny)

    def grad_fn(g):
        gu = np.zeros(u.shape)
        gx, gy = dx * (g / nx), dy * (g / ny)
        gu[:, :, 1:] += gx
        gu[:, :, :-1] -= gx
        gu[:, 1:, :] += gy
        gu[:, :-1, :] -= gy
        return (gu,)

    return make_node(np.asarray(value), (u,), grad_fn, "smoothness")


def register_baseline(pair: ImagePair, config: BaselineConfig | None = None) -> RunResult:
    """Minimize MAE(T, I o (x + u)) + lam * smoothness(u) over u, starting at u = 0."""
    config = config or BaselineConfig()
    config.validate()
    _, h, w = pair.shape
    u = Tensor(np.zeros((2, h, w)), requires_grad=True)
    moving, fixed = Tensor(pair.moving), Tensor(pair.fixed)

    def objective_fn(field):
        data = mae_loss(fixed, warp(moving, deformation(field)))
        if config.lam == 0:
            return data, data
        return data + config.lam * smoothness_penalty(field), data

    return optimize([u], lambda _it: u, objective_fn, config, "baseline", pair.moving)
