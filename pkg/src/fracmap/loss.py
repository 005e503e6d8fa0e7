"""Softmax cross-entropy over logits, with its gradient, batched.

Shared by the training loop and the attack loop so both ascend/descend the
same objective.
"""

from __future__ import annotations

import numpy as np

__all__ = ["softmax", "cross_entropy", "cross_entropy_grad"]


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a (N, K) logit array, max-shifted for stability."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-example negative log-likelihood of the true labels, shape (N,)."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels]


def cross_entropy_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of per-example cross-entropy w.r.t. the logits: p - onehot."""
    g = softmax(logits)
    g[np.arange(len(labels)), labels] -= 1.0
    return g
