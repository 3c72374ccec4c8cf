"""Four-layer SiLU MLP, initialisers and finite-difference input Jacobians."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..rng import Stream
from . import autodiff as ad
from .autodiff import DimensionError, GradientTape, Var

__all__ = [
    "MLPWeights",
    "init_weights",
    "mlp_forward",
    "shares_forward",
    "fd_share_derivatives",
    "input_jacobian_fd",
    "silu",
    "silu_grad",
]


def silu(x):
    x = np.asarray(x, dtype=float)
    return x / (1.0 + np.exp(-x))


def silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))
    return s * (1.0 + x * (1.0 - s))


@dataclass
class MLPWeights:
    """Weights of the ``d_s -> H -> H -> H/2 -> G`` network.

    ``layers[k] = (W, b)`` with ``W`` of shape ``(fan_in, fan_out)``; a batch
    is a row-per-observation matrix multiplied on the right.
    """

    layers: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        prev = None
        for W, b in self.layers:
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise DimensionError(f"bad layer shapes {W.shape}, {b.shape}")
            if prev is not None and prev != W.shape[0]:
                raise DimensionError(f"layer input {W.shape[0]} does not chain from {prev}")
            prev = W.shape[1]

    @property
    def d_in(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def d_out(self) -> int:
        return self.layers[-1][0].shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [a for W, b in self.layers for a in (W, b)]

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "MLPWeights":
        it = iter(arrays)
        return cls([(np.array(W, dtype=float), np.array(b, dtype=float)) for W, b in zip(it, it)])

    def copy(self) -> "MLPWeights":
        return MLPWeights([(W.copy(), b.copy()) for W, b in self.layers])

    @classmethod
    def zeros_like(cls, other: "MLPWeights") -> "MLPWeights":
        return cls([(np.zeros_like(W), np.zeros_like(b)) for W, b in other.layers])


def init_weights(d_s: int, H: int = 256, G: int = 3, seed: int = 0) -> MLPWeights:
    """Kaiming-normal hidden layers, Xavier-uniform (gain 0.1) output, zero biases."""
    if min(d_s, H, G) < 1:
        raise ValueError("d_s, H and G must be positive")
    rng = Stream(seed, "init_weights")
    half = max(H // 2, 1)
    dims = [d_s, H, H, half, G]
    layers = []
    for k in range(3):
        fan_in, fan_out = dims[k], dims[k + 1]
        W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        layers.append((W, np.zeros(fan_out)))
    bound = 0.1 * np.sqrt(6.0 / (half + G))
    W = rng.uniform(-bound, bound, size=(half, G))
    layers.append((W, np.zeros(G)))
    return MLPWeights(layers)


def mlp_forward(params: Sequence[Var], x: Var) -> Var:
    """Logits for a batch. ``params`` are tape variables ``[W1, b1, ..., W4, b4]``."""
    h = x
    n_layers = len(params) // 2
    for k in range(n_layers):
        W, b = params[2 * k], params[2 * k + 1]
        h = ad.dense_silu(h, W, b) if k < n_layers - 1 else ad.dense(h, W, b)
    return h


def shares_forward(params: Sequence[Var], x: Var) -> Var:
    return ad.softmax(mlp_forward(params, x))


def fd_share_derivatives(
    shares_fn: Callable[[Var], Var],
    tape: GradientTape,
    states: np.ndarray,
    indices: Sequence[int],
    h: float,
    with_base: bool = True,
):
    """Central-difference derivatives of predicted shares w.r.t. selected inputs.

    All perturbed copies of the batch are stacked and pushed through
    ``shares_fn`` once, so the derivatives stay on ``tape`` and can be
    differentiated with respect to the weights.

    Returns ``(base, derivs)`` where ``base`` is the ``(B, G)`` share Var at
    the unperturbed states (``None`` if ``with_base`` is false) and
    ``derivs[k]`` is the ``(B, G)`` Var of ``d w / d s[:, indices[k]]``.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    states = np.asarray(states, dtype=float)
    B, d = states.shape
    for j in indices:
        if not 0 <= j < d:
            raise IndexError(f"input index {j} outside state width {d}")
    blocks = [states] if with_base else []
    for j in indices:
        up = states.copy()
        up[:, j] += h
        dn = states.copy()
        dn[:, j] -= h
        blocks += [up, dn]
    w = shares_fn(tape.constant(np.vstack(blocks)))
    off = B if with_base else 0
    base = ad.getitem(w, slice(0, B)) if with_base else None
    derivs = []
    for k in range(len(indices)):
        lo = off + 2 * k * B
        up = ad.getitem(w, slice(lo, lo + B))
        dn = ad.getitem(w, slice(lo + B, lo + 2 * B))
        derivs.append((up - dn) * (1.0 / (2.0 * h)))
    return base, derivs


def input_jacobian_fd(weights: MLPWeights, state, indices: Sequence[int], h: float = 1e-3) -> np.ndarray:
    """``(G, len(indices))`` matrix of d softmax(MLP(s)) / d s_j at a single state."""
    tape = GradientTape()
    params = [tape.variable(a) for a in weights.arrays()]
    state = np.atleast_2d(np.asarray(state, dtype=float))
    _, derivs = fd_share_derivatives(
        lambda x: shares_forward(params, x), tape, state, indices, h, with_base=False
    )
    return np.column_stack([d.value[0] for d in derivs])
