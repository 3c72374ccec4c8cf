"""Minimal dense-network core: tape autodiff, MLP, Adam, FD input Jacobians."""

from .autodiff import ContractError, DimensionError, GradientTape, Var
from .kernels import BACKEND
from .mlp import (
    MLPWeights,
    fd_share_derivatives,
    init_weights,
    input_jacobian_fd,
    mlp_forward,
    shares_forward,
)
from .optim import AdamState, TrainingError, adam_step, clip_global_norm

__all__ = [
    "BACKEND",
    "AdamState",
    "ContractError",
    "DimensionError",
    "GradientTape",
    "MLPWeights",
    "TrainingError",
    "Var",
    "adam_step",
    "clip_global_norm",
    "fd_share_derivatives",
    "init_weights",
    "input_jacobian_fd",
    "mlp_forward",
    "shares_forward",
]
