"""Parameter update rules and the weighted two-stream reconstruction loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor, add, scale


class OptimizerError(ValueError):
    pass


@dataclass(frozen=True)
class DualLossWeights:
    image: float = 1.0
    flow: float = 1.0

    def __post_init__(self):
        if self.image < 0 or self.flow < 0:
            raise ValueError(f"loss weights must be non-negative, got {self.image}, {self.flow}")
        if self.image == 0 and self.flow == 0:
            raise ValueError("at least one loss weight must be positive")


RAE_WEIGHTS = DualLossWeights(0.75, 1.0)
CAE_WEIGHTS = DualLossWeights(1.0, 1.0)


def dual_loss(l_image, l_flow, w: DualLossWeights):
    """Weighted sum ``w.image * l_image + w.flow * l_flow``.

    Works on plain floats or on scalar tensors (keeping the tape intact).
    """
    if isinstance(l_image, Tensor) or isinstance(l_flow, Tensor):
        return add(scale(l_image, w.image), scale(l_flow, w.flow))
    if l_image < 0 or l_flow < 0:
        raise ValueError("per-stream losses must be non-negative")
    return w.image * l_image + w.flow * l_flow


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _check_grads(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]):
    for name, p in params.items():
        if name not in grads:
            raise OptimizerError(f"no gradient supplied for parameter {name!r}")
        g = grads[name]
        if g.shape != p.shape:
            raise OptimizerError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {name!r}; step rejected")


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    _check_grads(params, grads)
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    step = state.lr * math.sqrt(1 - b2**t) / (1 - b1**t)
    eps_hat = state.eps * math.sqrt(1 - b2**t)
    new_params, m_out, v_out = {}, {}, {}
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * (g * g) if v is None else b2 * v + (1 - b2) * (g * g)
        m_out[name] = m.astype(p.dtype, copy=False)
        v_out[name] = v.astype(p.dtype, copy=False)
        # equivalent to lr * mhat / (sqrt(vhat) + eps)
        new_params[name] = (p - step * m / (np.sqrt(v) + eps_hat)).astype(p.dtype, copy=False)
    new_state = AdamState(state.lr, b1, b2, state.eps, t, m_out, v_out)
    return new_params, new_state


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             lr: float) -> dict[str, np.ndarray]:
    _check_grads(params, grads)
    return {
        name: (p - lr * grads[name]).astype(p.dtype, copy=False) for name, p in params.items()
    }
