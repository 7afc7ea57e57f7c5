"""Cross-entropy and KL pieces shared by training and influence scoring."""

from __future__ import annotations

import numpy as np

from . import tensor as T

PROB_FLOOR = 1e-12


def cross_entropy(pred: T.Tensor, target: np.ndarray) -> T.Tensor:
    """-sum target * log(pred), with predictions clamped at 1e-12.

    Supports soft targets; both distributions are over the class axis.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.data.shape:
        raise T.DimensionError(
            f"cross_entropy: target shape {target.shape} != prediction {pred.data.shape}"
        )
    return T.scale(T.sum_all(T.mul(T.constant(target), T.log_clamped(pred, PROB_FLOOR))), -1.0)


def cross_entropy_value(pred: np.ndarray, target: np.ndarray) -> float:
    """Plain-array cross-entropy, same clamping as the tensor op."""
    pred = np.maximum(np.asarray(pred, dtype=np.float64), PROB_FLOOR)
    return float(-(np.asarray(target, dtype=np.float64) * np.log(pred)).sum())


def kl_divergence(p: T.Tensor, q: T.Tensor) -> T.Tensor:
    """KL(p || q) with both sides on the tape (gradients flow into each)."""
    log_ratio = T.sub(T.log_clamped(p, PROB_FLOOR), T.log_clamped(q, PROB_FLOOR))
    return T.sum_all(T.mul(p, log_ratio))


def one_hot(label: int, num_classes: int = 3) -> np.ndarray:
    vec = np.zeros(num_classes, dtype=np.float64)
    vec[label] = 1.0
    return vec


UNIFORM_TARGET = np.full(3, 1.0 / 3.0)
