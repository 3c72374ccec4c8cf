"""Numpy reference implementations of the hot elementwise kernels.

The Cython module ``_kernels`` exposes the same four functions with the same
semantics; :mod:`neuraldemand.nn.kernels` picks one at import.
"""

import numpy as np


def silu_forward(z):
    """Return ``(z * sigmoid(z), sigmoid(z))``."""
    with np.errstate(over="ignore"):
        sig = 1.0 / (1.0 + np.exp(-z))
    return z * sig, sig


def silu_backward(grad, z, sig):
    return grad * sig * (1.0 + z * (1.0 - sig))


def softmax_rows(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, weight_decay, step):
    """In-place decoupled-weight-decay Adam update of ``param``."""
    if weight_decay:
        param -= lr * weight_decay * param
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**step)
    vhat = v / (1.0 - beta2**step)
    param -= lr * mhat / (np.sqrt(vhat) + eps)
