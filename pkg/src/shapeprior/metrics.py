"""Overlap and surface-distance metrics for labelled volumes.

Degenerate cases follow documented conventions:

* Dice of two empty masks is 1.0 (perfect agreement on absence).
* HD95 is undefined (NaN sentinel) when the class is absent from either
  mask; aggregation excludes NaN values from means.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HD95_UNDEFINED = float("nan")


def dice_score(pred_mask: np.ndarray, gt_mask: np.ndarray, class_id: int) -> float:
    pred_mask = np.asarray(pred_mask)
    gt_mask = np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(
            f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}"
        )
    a = pred_mask == class_id
    b = gt_mask == class_id
    sa = int(a.sum())
    sb = int(b.sum())
    if sa + sb == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (sa + sb)


def _boundary_coords(mask: np.ndarray, spacing) -> np.ndarray:
    """Physical coordinates of boundary voxels (6-neighbourhood, volume
    border counts as background)."""
    m = np.pad(mask, 1)
    core = m[1:-1, 1:-1, 1:-1]
    interior = core.copy()
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        interior &= m[tuple(lo)]
        interior &= m[tuple(hi)]
    boundary = core & ~interior
    idx = np.argwhere(boundary).astype(np.float64)
    return idx * np.asarray(spacing, dtype=np.float64)


def _directed_min_dists(a: np.ndarray, b: np.ndarray,
                        chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Min distance from each point of `a` to `b`, and from `b` to `a`.

    Brute force in float64 via the |a|^2 + |b|^2 - 2ab expansion, chunked so
    the pairwise block never exceeds ~chunk x |b| doubles.
    """
    bb = (b * b).sum(axis=1)
    min_ab = np.empty(len(a))
    min_ba = np.full(len(b), np.inf)
    for start in range(0, len(a), chunk):
        blk = a[start : start + chunk]
        d2 = ((blk * blk).sum(axis=1)[:, None] + bb[None, :]
              - 2.0 * (blk @ b.T))
        np.maximum(d2, 0.0, out=d2)
        min_ab[start : start + chunk] = d2.min(axis=1)
        np.minimum(min_ba, d2.min(axis=0), out=min_ba)
    return np.sqrt(min_ab), np.sqrt(min_ba)


def hd95(pred_mask: np.ndarray, gt_mask: np.ndarray, class_id: int,
         spacing=(1.0, 1.0, 1.0)) -> float:
    """95th percentile of symmetric boundary distances, in mm.

    Distances from every boundary voxel of the prediction to the ground
    truth boundary and vice versa are pooled; the 95th percentile (linear
    interpolation) of the pooled sample is returned. NaN if the class is
    missing from either mask.
    """
    pred_mask = np.asarray(pred_mask)
    gt_mask = np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(
            f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}"
        )
    a = pred_mask == class_id
    b = gt_mask == class_id
    if not a.any() or not b.any():
        return HD95_UNDEFINED
    pa = _boundary_coords(a, spacing)
    pb = _boundary_coords(b, spacing)
    d_ab, d_ba = _directed_min_dists(pa, pb)
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))


@dataclass
class MetricsRecord:
    """Per-class Dice/HD95 for one evaluation pass."""

    epoch: int
    split: str
    dice: dict[int, float] = field(default_factory=dict)
    hd95: dict[int, float] = field(default_factory=dict)

    @property
    def mean_dice(self) -> float:
        return float(np.mean(list(self.dice.values()))) if self.dice else float("nan")

    @property
    def mean_hd95(self) -> float:
        vals = [v for v in self.hd95.values() if np.isfinite(v)]
        return float(np.mean(vals)) if vals else HD95_UNDEFINED


def summarize_case(pred_mask: np.ndarray, gt_mask: np.ndarray, n_classes: int,
                   spacing=(1.0, 1.0, 1.0), epoch: int = 0,
                   split: str = "val") -> MetricsRecord:
    """Dice and HD95 for every foreground class of one case."""
    rec = MetricsRecord(epoch=epoch, split=split)
    for c in range(1, n_classes):
        rec.dice[c] = dice_score(pred_mask, gt_mask, c)
        rec.hd95[c] = hd95(pred_mask, gt_mask, c, spacing)
    return rec
