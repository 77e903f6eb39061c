from typing import Sequence

import numpy as np

from cbct_toxicity.nn.functional import log_softmax
from cbct_toxicity.nn.tensor import ShapeError, Tensor


def weighted_softmax_cross_entropy(
    logits: Tensor, labels: Sequence[int], class_weights: Sequence[float]
) -> Tensor:
    """Mean over samples of ``w[y] * -log softmax(logits)[y]``."""
    labels = np.asarray(labels, dtype=np.int64)
    weights = np.asarray(class_weights, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"Logits {logits.shape} do not match {labels.shape[0]} labels")
    if weights.shape != (logits.shape[1],) or np.any(weights <= 0):
        raise ValueError(f"Class weights must be {logits.shape[1]} positive values, got {weights}")
    if np.any((labels < 0) | (labels >= logits.shape[1])):
        raise ValueError(f"Labels must lie in [0, {logits.shape[1] - 1}], got {np.unique(labels)}")

    picked = log_softmax(logits, axis=1)[np.arange(labels.shape[0]), labels]
    per_sample = picked * weights[labels].astype(logits.dtype)
    return -per_sample.mean()
