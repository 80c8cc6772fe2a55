"""The implemented terms of the multi-task loss: L_ss, L_cls and L_mask.

Each returns ``(loss, grad)``. ``loss_ss`` and ``loss_cls`` differentiate with
respect to the logits (softmax and cross-entropy fused), ``loss_mask`` with
respect to the foreground probabilities.
"""
from __future__ import annotations

import numpy as np

from .bayes import RoiScores, SemanticHeadOutput
from .tensor import ShapeError

MASK_EPS = 1e-7


def loss_ss(sem: SemanticHeadOutput, gt_class_map: np.ndarray):
    """Mean per-pixel multinomial cross-entropy; gradient w.r.t. ``sem.scores``."""
    c, h, w = sem.probs.shape
    gt = np.asarray(gt_class_map)
    if gt.shape != (h, w):
        raise ShapeError(f"loss_ss: class map {gt.shape} does not match semantic head {(h, w)}")
    if gt.min() < 0 or gt.max() >= c:
        raise ValueError(f"loss_ss: class id out of range [0, {c - 1}]: {gt.min()}..{gt.max()}")
    logits = np.asarray(sem.scores, np.float64)
    z = logits - logits.max(axis=0, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
    rows, cols = np.indices((h, w))
    n = h * w
    loss = -logp[gt, rows, cols].sum() / n
    grad = np.exp(logp)
    grad[gt, rows, cols] -= 1.0
    grad /= n
    return float(loss), grad.astype(sem.scores.dtype)


def loss_cls(scores: RoiScores, label: int):
    """Softmax classification loss; gradient w.r.t. ``scores.class_logits``."""
    logits = np.asarray(scores.class_logits, np.float64)
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"loss_cls: label {label} out of range [0, {logits.shape[0] - 1}]")
    z = logits - logits.max()
    logp = z - np.log(np.exp(z).sum())
    grad = np.exp(logp)
    grad[label] -= 1.0
    return float(-logp[label]), grad.astype(scores.class_logits.dtype)


def loss_mask(fg_prob: np.ndarray, gt_mask: np.ndarray):
    """Mean binary cross-entropy over the grid; probabilities clamped to [eps, 1-eps].

    The clamp is treated as pass-through in the backward pass so that a
    saturated wrong prediction still receives a gradient.
    """
    if fg_prob.shape != gt_mask.shape:
        raise ShapeError(f"loss_mask: prediction {fg_prob.shape} != target {gt_mask.shape}")
    p = np.clip(np.asarray(fg_prob, np.float64), MASK_EPS, 1.0 - MASK_EPS)
    y = np.asarray(gt_mask, np.float64)
    n = p.size
    loss = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum() / n
    grad = (p - y) / (p * (1.0 - p)) / n
    return float(loss), grad.astype(fg_prob.dtype)
