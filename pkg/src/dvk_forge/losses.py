"""Loss functions and evaluation metrics.

Every function returns a :class:`LossValue`; training losses also carry the
gradient with respect to the prediction. Argument order is always
``(prediction, target)`` except where a formula is conventionally written the
other way round, which is noted in the docstring.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, NumericalError, ShapeError


@dataclass
class LossValue:
    value: float
    grad: np.ndarray | None = None

    def __float__(self):
        return self.value


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise NumericalError("loss inputs must be finite")
    return a, b


def mse(pred, target) -> LossValue:
    pred, target = _pair(pred, target)
    d = pred - target
    return LossValue(float(np.mean(d * d)), 2.0 * d / d.size)


def mae(pred, target) -> LossValue:
    pred, target = _pair(pred, target)
    d = pred - target
    return LossValue(float(np.mean(np.abs(d))), np.sign(d) / d.size)


def kl_divergence(p, q) -> LossValue:
    """sum p log(p / q) for strictly positive distributions; gradient is w.r.t. ``q``."""
    p, q = _pair(p, q)
    if np.any(p <= 0) or np.any(q <= 0):
        raise DegenerateInputError("KL divergence needs strictly positive probabilities")
    for name, d in (("p", p), ("q", q)):
        if abs(d.sum() - 1.0) > 1e-9:
            raise DegenerateInputError(f"{name} does not sum to 1 (sum={d.sum()!r})")
    return LossValue(float(np.sum(p * np.log(p / q))), -p / q)


def _unit_open(*arrays):
    for a in arrays:
        if np.any(a <= 0) or np.any(a >= 1):
            raise DegenerateInputError("entries must lie strictly inside (0, 1)")


def log_loss(x, y) -> LossValue:
    """sum x log(x/y) + (1-x) log((1-x)/(1-y)); ``x`` target, ``y`` prediction."""
    x, y = _pair(x, y)
    _unit_open(x, y)
    val = np.sum(x * np.log(x / y) + (1 - x) * np.log((1 - x) / (1 - y)))
    return LossValue(float(val), (y - x) / (y * (1 - y)))


def entropy_like(x, y) -> LossValue:
    """-sum x log y + (1-x) log(1-y); ``x`` target, ``y`` prediction.

    The gradient w.r.t. ``y`` is ``(y - x) / (y (1 - y))``.
    """
    x, y = _pair(x, y)
    _unit_open(y)
    if np.any(x < 0) or np.any(x > 1):
        raise DegenerateInputError("targets must lie in [0, 1]")
    val = -np.sum(x * np.log(y) + (1 - x) * np.log(1 - y))
    return LossValue(float(val), (y - x) / (y * (1 - y)))


def soft_iou(pred, target) -> LossValue:
    """Soft Jaccard index ``J = sum min / sum max`` over all entries.

    ``value`` is J itself; ``grad`` is the gradient of the training loss
    ``1 - J`` w.r.t. ``pred``. Where pred == target the two one-sided
    derivatives are averaged.
    """
    pred, target = _pair(pred, target)
    if np.any(pred < 0) or np.any(target < 0):
        raise DegenerateInputError("soft IoU is defined for non-negative tensors only")
    s_min = float(np.minimum(pred, target).sum())
    s_max = float(np.maximum(pred, target).sum())
    if s_max == 0.0:
        raise DegenerateInputError("both tensors are identically zero")
    j = s_min / s_max
    below = 1.0 / s_max
    above = -j / s_max
    dj = np.where(pred < target, below, np.where(pred > target, above, 0.5 * (below + above)))
    return LossValue(j, -dj)


def iou_loss(pred, target) -> LossValue:
    r = soft_iou(pred, target)
    return LossValue(1.0 - r.value, r.grad)


def _clinical_weights(x_true):
    s = float(x_true.sum())
    if np.any(x_true < 0):
        raise DegenerateInputError("ground truth must be non-negative")
    if s <= 0:
        raise DegenerateInputError("ground truth sums to zero")
    return x_true / s


def clinical_loss(x_true, y_pred) -> LossValue:
    """Squared error weighted by each voxel's share of the true dose."""
    x, y = _pair(x_true, y_pred)
    w = _clinical_weights(x)
    d = x - y
    return LossValue(float(np.sum(d * d * w)), -2.0 * d * w)


def clinical_loss_inverse(x_true, y_pred, c: float = 0.9) -> LossValue:
    """Squared error weighted by ``c - share``; ``c`` is 0.9 for [0.1, 0.9] data, 1 for [0, 1]."""
    x, y = _pair(x_true, y_pred)
    w = c - _clinical_weights(x)
    d = x - y
    return LossValue(float(np.sum(d * d * w)), -2.0 * d * w)


def _entropy_pred_first(pred, target):
    return entropy_like(target, pred)


def _clinical_pred_first(pred, target):
    return clinical_loss(target, pred)


def _clinical_inv_pred_first(pred, target):
    return clinical_loss_inverse(target, pred)


# name -> f(pred, target) -> LossValue with gradient w.r.t. pred
TRAINING_LOSSES = {
    "iou": iou_loss,
    "mse": mse,
    "mae": mae,
    "entropy": _entropy_pred_first,
    "clinical": _clinical_pred_first,
    "clinical_inv": _clinical_inv_pred_first,
}

METRIC_NAMES = ("mse", "mae", "iou", "clinical", "clinical_inv")


def metric(name: str, pred, target) -> float:
    if name == "iou":
        return soft_iou(pred, target).value
    if name not in METRIC_NAMES:
        raise ValueError(f"unknown metric {name!r}")
    return TRAINING_LOSSES[name](pred, target).value
