"""Segmentation losses: soft Dice over foreground classes plus cross-entropy."""

from __future__ import annotations

import numpy as np

from .functional import log_softmax, one_hot, softmax
from .tensor import Tensor

DICE_SMOOTH = 1e-5


def _check(logits: Tensor, target: np.ndarray) -> np.ndarray:
    target = np.asarray(target)
    if logits.data.ndim != 4:
        raise ValueError(f"logits must be (N, D, H, W), got {logits.data.shape}")
    if target.shape != logits.data.shape[1:]:
        raise ValueError(
            f"target shape {target.shape} does not match logits spatial "
            f"shape {logits.data.shape[1:]}"
        )
    n = logits.data.shape[0]
    if target.min() < 0 or target.max() >= n:
        raise ValueError(f"labels must lie in [0, {n}), got max {target.max()}")
    return target


def dice_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """1 - mean soft Dice over the foreground classes.

    Soft Dice per class c uses softmax probabilities p_c against the one-hot
    target t_c: (2 * sum(p_c t_c) + eps) / (sum(p_c) + sum(t_c) + eps).
    Background (class 0) is excluded from the mean.
    """
    target = _check(logits, target)
    n = logits.data.shape[0]
    if n < 2:
        raise ValueError("dice_loss needs at least one foreground class")
    t = one_hot(target, n, dtype=logits.data.dtype)
    p = softmax(logits, axis=0)
    inter = (p * Tensor(t)).sum(axis=(1, 2, 3))
    psum = p.sum(axis=(1, 2, 3))
    tsum = t.sum(axis=(1, 2, 3))
    dice = (inter * 2.0 + DICE_SMOOTH) / (psum + Tensor(tsum) + DICE_SMOOTH)
    fg = np.zeros(n, dtype=logits.data.dtype)
    fg[1:] = 1.0 / (n - 1)
    return 1.0 - (dice * Tensor(fg)).sum()


def ce_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean per-voxel negative log-softmax probability of the true class."""
    target = _check(logits, target)
    n = logits.data.shape[0]
    t = one_hot(target, n, dtype=logits.data.dtype)
    ls = log_softmax(logits, axis=0)
    n_vox = float(np.prod(target.shape))
    return -(ls * Tensor(t)).sum() / n_vox


def total_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Sum of Dice and cross-entropy terms."""
    return dice_loss(logits, target) + ce_loss(logits, target)
