"""Adam with global-norm gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ContractError, Parameter

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class OptimizerState:
    lr: float
    clip_norm: float | None = 2.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    last_grad_norm: float = 0.0


def global_grad_norm(params: Sequence[Parameter]) -> float:
    total = 0.0
    for p in params:
        if p.trainable and p.grad is not None:
            g = p.grad.astype(np.float64, copy=False)
            total += float(np.dot(g.ravel(), g.ravel()))
    return math.sqrt(total)


def adam_step(params: Sequence[Parameter], state: OptimizerState) -> OptimizerState:
    """Clip the global gradient norm, then apply one Adam update in place.

    Parameters with ``trainable=False`` are skipped entirely.  Gradients are
    visited in list order so the reduction is reproducible.
    """
    active = [p for p in params if p.trainable]
    for p in active:
        if p.grad is None:
            raise ContractError(f"trainable parameter {p.name!r} has no gradient")
        if p.grad.shape != p.data.shape:
            raise ContractError(f"gradient shape {p.grad.shape} != parameter shape {p.data.shape} for {p.name!r}")

    norm = global_grad_norm(active)
    state.last_grad_norm = norm
    scale = 1.0
    if state.clip_norm is not None and norm > state.clip_norm:
        scale = state.clip_norm / (norm + 1e-12)

    state.step += 1
    t = state.step
    bc1 = 1.0 - BETA1 ** t
    bc2 = 1.0 - BETA2 ** t
    step_size = state.lr / bc1
    for p in active:
        g = p.grad if scale == 1.0 else p.grad * p.grad.dtype.type(scale)
        m = state.m.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        state.m[p.name] = m
        denom = np.sqrt(v / bc2) + EPS
        p.data -= (step_size * m / denom).astype(p.data.dtype, copy=False)
    return state
