"""Dense float64 array kernels and their hand-written gradients.

Everything here operates on rank-1 or rank-2 ``numpy.ndarray`` values of dtype
float64.  Functions are pure: inputs are never modified.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionError, InputError

DTYPE = np.float64


def as_tensor(x) -> np.ndarray:
    a = np.asarray(x, dtype=DTYPE)
    if a.ndim > 2:
        raise DimensionError(f"rank {a.ndim} tensors are not supported (shape {a.shape})")
    return a


def matmul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, grad, 0.0)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax_xent(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``.

    Returns the loss and its gradient with respect to ``logits``,
    ``(softmax - onehot) / batch``.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} disagree")
    b, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits)
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= b
    return float(loss), grad


def l2_to_zero(y) -> tuple[float, np.ndarray]:
    """Squared L2 distance of ``y`` from zero, summed over every entry."""
    y = as_tensor(y)
    return float(np.sum(y * y)), 2.0 * y


def batchnorm_train(x: np.ndarray, scale: np.ndarray, shift: np.ndarray, eps: float):
    """Batch-statistics normalisation. Returns output and a cache for the backward pass."""
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return xhat * scale + shift, (xhat, inv_std, mean, var)


def batchnorm_train_backward(grad: np.ndarray, cache, scale: np.ndarray):
    xhat, inv_std, _, _ = cache
    n = grad.shape[0]
    d_scale = (grad * xhat).sum(axis=0)
    d_shift = grad.sum(axis=0)
    dxhat = grad * scale
    dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, d_scale, d_shift


def batchnorm_eval(x, scale, shift, mean, var, eps):
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return xhat * scale + shift, (xhat, inv_std)


def batchnorm_eval_backward(grad, cache, scale):
    xhat, inv_std = cache
    return grad * scale * inv_std, (grad * xhat).sum(axis=0), grad.sum(axis=0)
