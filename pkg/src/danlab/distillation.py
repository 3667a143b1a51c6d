"""Pseudo-labels from transform ensembles, model ensembles, or both.

A predictor is anything with ``predict_proba(x) -> probs`` mapping a
``[C_in, *S]`` volume to ``[C, *S]`` class probabilities.  Predictors that
set ``batched = True`` also accept a ``[B, C_in, *S]`` stack.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .data import LabelVolume, write_volume
from .metrics import dice


class Predictor(Protocol):
    def predict_proba(self, x: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class GeometricTransform:
    """Flip (optional) then rotate by ``rotation * 90`` degrees in the plane of
    the last two spatial axes.  ``flip`` is a spatial axis index or ``None``."""

    rotation: int = 0
    flip: int | None = None

    def __post_init__(self):
        if self.rotation not in (0, 1, 2, 3):
            raise ValueError(f"rotation must be 0..3 quarter turns, got {self.rotation}")
        if self.flip is not None and self.flip not in (0, 1, 2):
            raise ValueError(f"flip axis must be 0, 1 or 2, got {self.flip}")

    @property
    def name(self) -> str:
        f = "none" if self.flip is None else f"axis{self.flip}"
        return f"rot{90 * self.rotation}_flip{f}"

    def _axes(self, arr: np.ndarray, nd: int):
        if self.flip is not None and self.flip >= nd:
            raise ValueError(f"flip axis {self.flip} invalid for {nd}-d volume")
        off = arr.ndim - nd
        plane = (arr.ndim - 2, arr.ndim - 1)
        if self.rotation % 2 and arr.shape[plane[0]] != arr.shape[plane[1]]:
            raise ValueError(f"quarter-turn rotation needs a square plane, got {arr.shape[plane[0]]}x{arr.shape[plane[1]]}")
        flip = None if self.flip is None else off + self.flip
        return flip, plane

    def apply(self, arr: np.ndarray, nd: int | None = None) -> np.ndarray:
        """Transform the trailing ``nd`` (default: all) spatial axes."""
        arr = np.asarray(arr)
        flip, plane = self._axes(arr, arr.ndim if nd is None else nd)
        if flip is not None:
            arr = np.flip(arr, axis=flip)
        return np.ascontiguousarray(np.rot90(arr, self.rotation, axes=plane))

    def inverse(self, arr: np.ndarray, nd: int | None = None) -> np.ndarray:
        arr = np.asarray(arr)
        flip, plane = self._axes(arr, arr.ndim if nd is None else nd)
        arr = np.rot90(arr, -self.rotation, axes=plane)
        if flip is not None:
            arr = np.flip(arr, axis=flip)
        return np.ascontiguousarray(arr)


IDENTITY = GeometricTransform(0, None)


def default_transforms(ndim: int = 2) -> list[GeometricTransform]:
    """4 quarter turns x {no flip, flip in-plane axis 0, flip in-plane axis 1}."""
    a0, a1 = ndim - 2, ndim - 1
    return [GeometricTransform(r, f) for f in (None, a0, a1) for r in range(4)]


def parse_transforms(text: str, ndim: int = 2) -> list[GeometricTransform]:
    text = text.strip()
    if text == "all12":
        return default_transforms(ndim)
    if text == "identity":
        return [IDENTITY]
    out = []
    for item in text.split(","):
        rot, _, flip = item.partition("f")
        rot = rot.strip().lstrip("r")
        out.append(GeometricTransform(int(rot or 0), int(flip) if flip else None))
    return out


@dataclass
class TeacherSet:
    models: list
    ids: list[str] | None = None

    def __post_init__(self):
        if not self.models:
            raise ValueError("a teacher set needs at least one model")
        if self.ids is None:
            self.ids = [chr(ord("A") + i) if i < 26 else f"T{i}" for i in range(len(self.models))]

    def __len__(self):
        return len(self.models)

    def __iter__(self):
        return iter(self.models)


def vote(label_maps: Sequence, classes: int | None = None) -> np.ndarray:
    """Per-voxel majority; ties go to the smallest class index."""
    if len(label_maps) == 0:
        raise ValueError("vote over an empty list")
    maps = [np.asarray(m) for m in label_maps]
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ValueError("label maps differ in shape")
    stack = np.stack(maps)
    if classes is None:
        classes = int(stack.max()) + 1
    counts = np.stack([(stack == c).sum(axis=0) for c in range(classes)])
    return counts.argmax(axis=0).astype(np.uint8)


def _probs(model, xs: list[np.ndarray]) -> list[np.ndarray]:
    if getattr(model, "batched", False):
        return list(model.predict_proba(np.stack(xs)))
    return [np.asarray(model.predict_proba(x)) for x in xs]


def _hard(probs: np.ndarray) -> np.ndarray:
    return probs.argmax(axis=0).astype(np.uint8)


def data_distill(model, x: np.ndarray, transforms: Sequence[GeometricTransform],
                 average_probs: bool = False) -> np.ndarray:
    """Predict on each transformed copy of ``x``, map back, and vote."""
    if not transforms:
        raise ValueError("need at least one transform")
    x = np.asarray(x)
    nd = x.ndim - 1
    probs = _probs(model, [t.apply(x, nd) for t in transforms])
    back = [t.inverse(p, nd) for t, p in zip(transforms, probs)]
    if average_probs:
        return _hard(np.mean(back, axis=0))
    return vote([_hard(p) for p in back], classes=back[0].shape[0])


def model_distill(teachers: TeacherSet | Sequence, x: np.ndarray, average_probs: bool = False) -> np.ndarray:
    teachers = teachers if isinstance(teachers, TeacherSet) else TeacherSet(list(teachers))
    probs = [np.asarray(m.predict_proba(x)) for m in teachers]
    if average_probs:
        return _hard(np.mean(probs, axis=0))
    return vote([_hard(p) for p in probs], classes=probs[0].shape[0])


def hierarchical_distill(teachers: TeacherSet | Sequence, x: np.ndarray,
                         transforms: Sequence[GeometricTransform], average_probs: bool = False) -> np.ndarray:
    """Vote over per-teacher transform-ensemble labels (two aggregation stages)."""
    teachers = teachers if isinstance(teachers, TeacherSet) else TeacherSet(list(teachers))
    inner = [data_distill(m, x, transforms, average_probs) for m in teachers]
    classes = _class_count(teachers, x)
    return vote(inner, classes=classes)


def _class_count(teachers: TeacherSet, x) -> int:
    c = getattr(teachers.models[0], "classes", None)
    if c is None:
        c = np.asarray(teachers.models[0].predict_proba(x)).shape[0]
    return int(c)


@dataclass
class PseudoLabelQuality:
    dice: list[float]
    flip_rate: float

    @property
    def mean_foreground_dice(self) -> float:
        return float(np.mean(self.dice[1:])) if len(self.dice) > 1 else self.dice[0]


def pseudo_label_quality(pseudo, truth, classes: int | None = None) -> PseudoLabelQuality:
    p = np.asarray(pseudo)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    if classes is None:
        classes = getattr(truth, "classes", None) or int(max(p.max(), t.max())) + 1
    return PseudoLabelQuality([dice(p, t, c) for c in range(classes)], float((p != t).mean()))


def write_pseudo_labels(out_dir, ids: Sequence[str], labels: Sequence[np.ndarray], classes: int,
                        sources: Sequence[str] | None = None, truths: Sequence | None = None) -> Path:
    """Write ``pseudo/<id>.lbl`` files and ``manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (sid, lab) in enumerate(zip(ids, labels)):
        name = f"{sid}.lbl"
        write_volume(out / name, LabelVolume(lab, classes))
        row = {"input": sources[i] if sources else sid, "pseudo_label": name, "mean_dice": "", "flip_rate": ""}
        if truths is not None:
            q = pseudo_label_quality(lab, truths[i], classes)
            row["mean_dice"] = repr(q.mean_foreground_dice)
            row["flip_rate"] = repr(q.flip_rate)
        rows.append(row)
    path = out / "manifest.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["input", "pseudo_label", "mean_dice", "flip_rate"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path
