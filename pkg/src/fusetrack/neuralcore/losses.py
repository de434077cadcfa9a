"""Training losses: mean Euclidean displacement error and cross entropy."""

from __future__ import annotations

import math

import numpy as np

from ..errors import EmptyBatchError, ShapeError, ValidationError

#: squared-norm smoothing used in the displacement gradient only, so the
#: derivative stays finite at zero error while the loss value stays exact
NORM_SMOOTHING = 1e-12


def _check_pairs(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.ndim == 1:
        pred = pred[None, :]
    if target.ndim == 1:
        target = target[None, :]
    if pred.shape != target.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ShapeError(f"expected matching (N,2) arrays, got {pred.shape} vs {target.shape}")
    if pred.shape[0] == 0:
        raise EmptyBatchError("displacement loss on an empty batch")
    return pred, target


def l2_displacement_loss(pred, target) -> float:
    """Mean Euclidean distance between predicted and target displacements."""
    pred, target = _check_pairs(pred, target)
    d = pred - target
    return float(np.sqrt((d ** 2).sum(axis=1)).mean())


def l2_displacement_grad(pred, target) -> np.ndarray:
    """Gradient of the mean Euclidean loss w.r.t. ``pred`` (smoothed at zero)."""
    pred, target = _check_pairs(pred, target)
    d = pred - target
    norms = np.sqrt((d ** 2).sum(axis=1) + NORM_SMOOTHING)
    return d / norms[:, None] / pred.shape[0]


def _check_logits(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 1:
        logits = logits[None, :]
    labels = np.asarray(labels, dtype=int).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    if logits.shape[0] == 0:
        raise EmptyBatchError("cross entropy on an empty batch")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValidationError("label index out of range")
    return logits, labels


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(logits, labels) -> float:
    """Mean negative log softmax probability of the true class (stabilized)."""
    logits, labels = _check_logits(logits, labels)
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    picked = logits[np.arange(len(labels)), labels]
    return float((lse - picked).mean())


def cross_entropy_grad(logits, labels) -> np.ndarray:
    """Gradient of the mean cross entropy w.r.t. the logits."""
    logits, labels = _check_logits(logits, labels)
    p = softmax(logits)
    p[np.arange(len(labels)), labels] -= 1.0
    return p / len(labels)


def total_loss(regr: float, ce: float, alpha: float = 1.0) -> float:
    """Weighted training objective: displacement loss plus alpha times CE."""
    if not (math.isfinite(regr) and math.isfinite(ce)):
        raise ValidationError(f"loss terms must be finite, got {regr}, {ce}")
    if alpha < 0:
        raise ValidationError(f"alpha must be >= 0, got {alpha}")
    return regr + alpha * ce
