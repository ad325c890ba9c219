"""Hard Dice, HD95 and size-binned Dice on integer label volumes."""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial import cKDTree


class EmptyMaskError(ValueError):
    """HD95 is undefined because one of the masks has no voxels of the class."""


def _check_extents(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(f"extent mismatch: pred {pred.shape} vs gt {gt.shape}")


def dice_eval(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """``2|P & G| / (|P| + |G|)``; 1.0 when both masks are empty."""
    _check_extents(pred, gt)
    p = pred == class_id
    g = gt == class_id
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one 6-neighbour outside the mask or the volume."""
    mask = mask.astype(bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = mask.copy()
    for ax in range(mask.ndim):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=ax)[(slice(1, -1),) * mask.ndim]
    return mask & ~interior


def nearest_rank(values: np.ndarray, q: float = 95.0) -> float:
    """Nearest-rank percentile: the ``ceil(q/100 * n)``-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("percentile of an empty list")
    rank = max(1, math.ceil(q / 100.0 * v.size))
    return float(v[rank - 1])


def _surface_points(volume: np.ndarray, class_id: int, spacing) -> np.ndarray:
    mask = volume == class_id
    if not mask.any():
        raise EmptyMaskError(f"class {class_id} is absent; HD95 undefined")
    return np.argwhere(boundary(mask)).astype(np.float64) * np.asarray(spacing, dtype=np.float64)


def hd95(pred: np.ndarray, gt: np.ndarray, class_id: int, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric 95th-percentile boundary distance, in the units of ``spacing``."""
    _check_extents(pred, gt)
    a = _surface_points(pred, class_id, spacing)
    b = _surface_points(gt, class_id, spacing)
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return max(nearest_rank(d_ab), nearest_rank(d_ba))


def hd95_bruteforce(pred: np.ndarray, gt: np.ndarray, class_id: int, spacing=(1.0, 1.0, 1.0)) -> float:
    """All-pairs reference for :func:`hd95`; quadratic in the surface size."""
    a = _surface_points(pred, class_id, spacing)
    b = _surface_points(gt, class_id, spacing)
    diff = a[:, None, :] - b[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    return max(nearest_rank(dist.min(axis=1)), nearest_rank(dist.min(axis=0)))


def lesion_volume_cm3(gt: np.ndarray, class_id: int, spacing=(1.0, 1.0, 1.0)) -> float:
    return float((gt == class_id).sum()) * float(np.prod(spacing)) / 1000.0


def size_bin(volume_cm3: float, bins) -> int:
    """Index of the bin for ``volume_cm3``; thresholds split [0, t0), [t0, t1), ..."""
    return int(np.searchsorted(np.asarray(bins, dtype=np.float64), volume_cm3, side="right"))


def dice_by_size_bin(preds, gts, class_id: int, bins, spacing=(1.0, 1.0, 1.0)) -> dict:
    """Mean case Dice per ground-truth volume bin.  Empty bins are absent from the result."""
    bins = list(bins)
    if any(b2 <= b1 for b1, b2 in zip(bins, bins[1:])):
        raise ValueError(f"bin thresholds must be strictly increasing, got {bins}")
    per_bin: dict = {}
    for p, g in zip(preds, gts):
        idx = size_bin(lesion_volume_cm3(g, class_id, spacing), bins)
        per_bin.setdefault(idx, []).append(dice_eval(p, g, class_id))
    return {i: float(np.mean(v)) for i, v in sorted(per_bin.items())}


BIN_LABELS = ("S", "M", "L")


def bin_label(idx: int, n_bins: int) -> str:
    if n_bins + 1 == len(BIN_LABELS):
        return BIN_LABELS[idx]
    return f"bin{idx}"
