from __future__ import annotations

import numpy as np

from ..errors import DataError, ShapeError


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of ``softmax(logits)`` against integer targets.

    Returns ``(loss, grad_logits)`` with ``grad_logits = (softmax - onehot) / B``.
    """
    logits = np.asarray(logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be B x K, got {logits.shape}", "softmax_cross_entropy")
    targets = np.asarray(targets)
    B, K = logits.shape
    if targets.shape != (B,):
        raise ShapeError(f"targets must have shape ({B},), got {targets.shape}", "softmax_cross_entropy")
    bad = np.flatnonzero((targets < 0) | (targets >= K))
    if bad.size:
        r = int(bad[0])
        raise DataError(f"target {int(targets[r])} at row {r} outside [0, {K})")
    targets = targets.astype(np.intp)
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = float(np.mean(logsumexp - z[rows, targets]))
    grad = np.exp(z - logsumexp[:, None])
    grad[rows, targets] -= 1
    grad /= B
    return loss, grad.astype(logits.dtype, copy=False)
