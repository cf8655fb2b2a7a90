"""Loss functions returning ``(value, gradient w.r.t. the prediction)``."""

from __future__ import annotations

import numpy as np

from .layers import sigmoid, softmax


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean categorical cross-entropy of integer ``labels`` under softmax(logits)."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(n), labels]))
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def bernoulli_nll(logits: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-example binary cross-entropy summed over pixels, from logits."""
    axes = tuple(range(1, logits.ndim))
    per = (softplus(logits) - target * logits).sum(axis=axes)
    return per, sigmoid(logits) - target


def gaussian_nll(logits: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-example half squared error between sigmoid(logits) and target."""
    axes = tuple(range(1, logits.ndim))
    mean = sigmoid(logits)
    diff = mean - target
    return 0.5 * (diff * diff).sum(axis=axes), diff * mean * (1.0 - mean)
