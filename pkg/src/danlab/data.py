"""Synthetic nested-shell volumes and the DANVOL1 file format.

Each sample has three classes: background (0), a shell (1) and a core (2)
strictly inside the shell.  Intensity is a per-class mean plus Gaussian
noise and a smooth multiplicative bias field.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

MIN_SIDE = 16
VOL_MAGIC = b"DANVOL1\0"
KIND_FLOAT = 0
KIND_LABEL = 1

BACKGROUND, SHELL, CORE = 0, 1, 2
CLASS_MEANS = (0.2, 0.9, 0.55)


class VolumeFormatError(ValueError):
    pass


@dataclass
class LabelVolume:
    data: np.ndarray
    classes: int = 3

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.data.size and (self.data.min() < 0 or self.data.max() >= self.classes):
            raise ValueError(f"label values outside [0, {self.classes})")
        self.data = self.data.astype(np.uint8)

    @property
    def shape(self):
        return self.data.shape

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __eq__(self, other):
        return isinstance(other, LabelVolume) and self.classes == other.classes and np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class SyntheticSpec:
    count: int = 20
    shape: tuple[int, ...] = (32, 32)
    seed: int = 0
    thickness: tuple[int, int] = (2, 4)
    noise_sigma: float = 0.15
    deformation: float = 0.15
    bias_amplitude: float = 0.1
    core_radius: tuple[float, float] = (0.12, 0.24)  # fraction of each side

    def validate(self) -> None:
        if self.count < 1:
            raise ValueError("count must be positive")
        if len(self.shape) not in (2, 3):
            raise ValueError("shape must be 2-d or 3-d")
        if min(self.shape) < MIN_SIDE:
            raise ValueError(f"every axis must be >= {MIN_SIDE}, got {self.shape}")
        if self.thickness[0] < 2 or self.thickness[1] < self.thickness[0]:
            raise ValueError("shell thickness must be >= 2 voxels")
        lo, hi = self.core_radius
        if not 0 < lo <= hi:
            raise ValueError("invalid core radius range")
        if self.deformation < 0 or self.deformation >= 1 or self.noise_sigma < 0:
            raise ValueError("deformation must be in [0, 1), noise sigma >= 0")
        # the outer shell must fit: core + thickness + margin on every axis
        for n in self.shape:
            if hi * n * (1 + self.deformation) + self.thickness[1] + 2 > n / 2:
                raise ValueError(f"shell does not fit in a side of {n} voxels")


def _smooth_field(rng, shape, sigma_frac=0.25) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=[sigma_frac * n for n in shape], mode="wrap")
    s = f.std()
    return f / s if s > 0 else f


def _sample(rng: np.random.Generator, spec: SyntheticSpec):
    shape = spec.shape
    nd = len(shape)
    lo, hi = spec.core_radius
    axes = np.array([rng.uniform(lo, hi) * n for n in shape])
    thick = rng.integers(spec.thickness[0], spec.thickness[1] + 1)
    outer = axes + thick
    margin = outer * (1 + spec.deformation) + 1
    center = np.array([rng.uniform(m, n - 1 - m) for m, n in zip(margin, shape)])
    grid = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    rel = [g - c for g, c in zip(grid, center)]
    warp = 1.0
    if spec.deformation > 0:
        warp = 1.0 + spec.deformation * np.clip(_smooth_field(rng, shape), -1, 1)
    r_core = np.sqrt(sum((d / a) ** 2 for d, a in zip(rel, axes))) * warp
    r_outer = np.sqrt(sum((d / a) ** 2 for d, a in zip(rel, outer))) * warp
    labels = np.zeros(shape, dtype=np.uint8)
    labels[r_outer < 1] = SHELL
    labels[r_core < 1] = CORE
    means = np.asarray(CLASS_MEANS)[labels]
    bias = 1.0 + spec.bias_amplitude * _smooth_field(rng, shape) if spec.bias_amplitude > 0 else 1.0
    noise = rng.standard_normal(shape) * spec.noise_sigma if spec.noise_sigma > 0 else 0.0
    image = (means * bias + noise).astype(np.float32)
    return image, labels, dict(center=center, axes=axes, thickness=int(thick), nd=nd)


def generate(spec: SyntheticSpec, with_geometry: bool = False):
    """List of ``(image, LabelVolume)`` pairs, deterministic in ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    out = []
    for _ in range(spec.count):
        image, labels, geo = _sample(rng, spec)
        item = (image, LabelVolume(labels, 3))
        out.append(item + (geo,) if with_geometry else item)
    return out


def stack(samples) -> tuple[np.ndarray, np.ndarray]:
    """``[N, 1, *S]`` images and ``[N, *S]`` labels from sample pairs."""
    images = np.stack([np.asarray(s[0], dtype=np.float32) for s in samples])[:, None]
    labels = np.stack([np.asarray(s[1]) for s in samples])
    return images, labels


# ---------------------------------------------------------------------------
# DANVOL1
# ---------------------------------------------------------------------------


def write_volume(path, volume) -> None:
    """Write an intensity array (kind 0, float32) or a LabelVolume (kind 1, u8)."""
    if isinstance(volume, LabelVolume):
        kind, arr = KIND_LABEL, np.ascontiguousarray(volume.data, dtype=np.uint8)
    else:
        data = volume.data if hasattr(volume, "requires_grad") else volume
        kind, arr = KIND_FLOAT, np.ascontiguousarray(data, dtype="<f4")
    header = VOL_MAGIC + struct.pack("<II", kind, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_volume(path, classes: int = 3):
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:8] != VOL_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic")
    if len(raw) < 16:
        raise VolumeFormatError(f"{path}: truncated header at byte offset {len(raw)}")
    kind, rank = struct.unpack_from("<II", raw, 8)
    if kind not in (KIND_FLOAT, KIND_LABEL):
        raise VolumeFormatError(f"{path}: unknown kind {kind}")
    end = 16 + 4 * rank
    if len(raw) < end:
        raise VolumeFormatError(f"{path}: truncated header at byte offset {len(raw)}")
    dims = struct.unpack_from(f"<{rank}I", raw, 16)
    itemsize = 4 if kind == KIND_FLOAT else 1
    need = end + itemsize * int(np.prod(dims))
    if len(raw) < need:
        raise VolumeFormatError(f"{path}: truncated payload at byte offset {len(raw)}, expected {need} bytes")
    if len(raw) > need:
        raise VolumeFormatError(f"{path}: {len(raw) - need} trailing bytes after offset {need}")
    payload = raw[end:need]
    if kind == KIND_FLOAT:
        return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return LabelVolume(np.frombuffer(payload, dtype=np.uint8).reshape(dims).copy(), classes)


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    ids: list[str]
    images: np.ndarray  # [N, 1, *S]
    labels: np.ndarray  # [N, *S]
    root: Path | None = None
    classes: int = 3

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset([self.ids[i] for i in idx], self.images[idx], self.labels[idx], self.root, self.classes)


def write_dataset(root, samples) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (image, labels) in enumerate(samples):
        sid = f"{i:04d}"
        write_volume(root / f"img_{sid}.vol", image)
        write_volume(root / f"lbl_{sid}.lbl", labels)
        rows.append((sid, f"img_{sid}.vol", f"lbl_{sid}.lbl", "x".join(map(str, np.shape(image)))))
    with open(root / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "image", "label", "shape"])
        w.writerows(rows)
    return root / "index.csv"


def load_dataset(root, classes: int = 3) -> Dataset:
    root = Path(root)
    with open(root / "index.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{root}: empty dataset")
    ids, images, labels = [], [], []
    for r in rows:
        ids.append(r["id"])
        images.append(read_volume(root / r["image"]))
        labels.append(np.asarray(read_volume(root / r["label"], classes)))
    return Dataset(ids, np.stack(images)[:, None], np.stack(labels), root, classes)
