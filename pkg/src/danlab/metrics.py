"""Segmentation metrics: Dice, boundary distances and a composite score.

Distances are measured between voxel centres of face-connected boundary
voxels, in voxel units.  An empty boundary on either side makes the
distance undefined, reported as ``nan``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree


def _check(pred, truth, c: int | None = None, classes: int | None = None):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if c is not None and (c < 0 or (classes is not None and c >= classes)):
        raise ValueError(f"invalid class {c}")
    return pred, truth


def dice(pred, truth, c: int, classes: int | None = None) -> float:
    """2|P∩T| / (|P| + |T|) for class ``c``; 1.0 when both are empty."""
    pred, truth = _check(pred, truth, c, classes)
    p = pred == c
    t = truth == c
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def boundary_mask(labels, c: int) -> np.ndarray:
    labels = np.asarray(labels)
    mask = labels == c
    # the volume border counts as "another class"
    padded = np.pad(mask, 1, constant_values=False)
    footprint = ndimage.generate_binary_structure(labels.ndim, 1)
    interior = ndimage.binary_erosion(padded, structure=footprint)
    inner = tuple(slice(1, -1) for _ in range(labels.ndim))
    return mask & ~interior[inner]


def boundary_voxels(labels, c: int) -> set[tuple[int, ...]]:
    return {tuple(int(v) for v in idx) for idx in np.argwhere(boundary_mask(labels, c))}


def _nearest(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    return cKDTree(dst).query(src, k=1)[0]


def _boundary_points(labels, c):
    return np.argwhere(boundary_mask(labels, c)).astype(np.float64)


def directed_distances(pred, truth, c: int) -> tuple[np.ndarray, np.ndarray] | None:
    pred, truth = _check(pred, truth, c)
    a = _boundary_points(pred, c)
    b = _boundary_points(truth, c)
    if len(a) == 0 or len(b) == 0:
        return None
    return _nearest(a, b), _nearest(b, a)


def avg_boundary_distance(pred, truth, c: int) -> float:
    """Symmetric mean of nearest boundary distances, both directions halved.

    Means use a correctly rounded sum, so the result does not depend on the
    order boundary voxels are visited in.
    """
    d = directed_distances(pred, truth, c)
    if d is None:
        return math.nan
    return (math.fsum(d[0]) / len(d[0]) + math.fsum(d[1]) / len(d[1])) / 2.0


def hausdorff(pred, truth, c: int) -> float:
    d = directed_distances(pred, truth, c)
    if d is None:
        return math.nan
    return max(float(d[0].max()), float(d[1].max()))


def composite_score(dices, adbs, hdds, shape, w1: float = 0.5, w2: float = 0.5) -> float:
    """Mean over classes of ``dice - w1 * adb / diag - w2 * hdd / diag``.

    ``diag`` is the volume diagonal in voxels.  This is an in-repo reporting
    convention, not any challenge's official score.
    """
    diag = math.sqrt(sum(n * n for n in shape))
    terms = [d - w1 * a / diag - w2 * h / diag for d, a, h in zip(dices, adbs, hdds)]
    if not terms:
        raise ValueError("no classes given")
    return float(np.mean(terms))


def nanmean(values) -> float:
    """Mean over defined entries; ``nan`` (without a warning) if none are."""
    arr = np.asarray(values, dtype=np.float64)
    ok = ~np.isnan(arr)
    return float(arr[ok].mean()) if ok.any() else math.nan


@dataclass
class Evaluation:
    dice: list[float]
    adb: list[float]
    hdd: list[float]
    score: float

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice))


def evaluate(pred, truth, classes: int) -> Evaluation:
    """Per-foreground-class metrics for one volume."""
    pred, truth = _check(pred, truth)
    ds, as_, hs = [], [], []
    for c in range(1, classes):
        ds.append(dice(pred, truth, c))
        as_.append(avg_boundary_distance(pred, truth, c))
        hs.append(hausdorff(pred, truth, c))
    return Evaluation(ds, as_, hs, composite_score(ds, as_, hs, truth.shape))
