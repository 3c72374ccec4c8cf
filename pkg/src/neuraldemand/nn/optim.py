"""Adam with decoupled weight decay, and global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels

__all__ = ["AdamState", "TrainingError", "adam_step", "clip_global_norm"]


class TrainingError(FloatingPointError):
    """Non-finite gradients or loss during training."""


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kwargs) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **kwargs)


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]):
    """Update ``params`` in place and advance ``state``.

    Weight decay is decoupled: ``w <- w - lr * wd * w`` is applied before the
    bias-corrected Adam delta.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimiser state differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient")
    state.step += 1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        kernels.adam_update(
            p, g, m, v, state.lr, state.beta1, state.beta2, state.eps, state.weight_decay, state.step
        )
    return params, state


def clip_global_norm(grads: list[np.ndarray], max_norm: float = 1.0) -> list[np.ndarray]:
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads]
    return list(grads)
