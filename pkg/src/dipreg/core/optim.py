"""Adam with bias-corrected moment estimates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Tensor], **hyper) -> AdamState:
        state = cls(**hyper)
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
        return state


def adam_step(params: list[Tensor], state: AdamState) -> None:
    """Update ``params`` in place from their ``grad`` buffers, then clear them.

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps), with m_hat and v_hat the
    bias-corrected first and second moment averages.
    """
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    if len(state.m) != len(params):
        raise ValueError(f"Adam state tracks {len(state.m)} parameters, got {len(params)}")
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {i} with shape {p.shape} has no gradient")
        if state.m[i].shape != p.shape:
            raise ValueError(
                f"Adam moment shape {state.m[i].shape} does not match parameter {p.shape}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.grad = None
