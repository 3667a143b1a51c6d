"""Label scarcity, label noise, and the teach / distill / retrain pipeline.

Ground truth for the unlabeled split lives only in :class:`HeldOutTruth`,
which no training entry point accepts; every training call also appends the
provenance of each sample it consumed to an audit log.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .attention import gaussian_kernel
from .config import RunConfig
from .dan import (
    OptimizerState,
    TrainConfig,
    TwoStreamDAN,
    mean_foreground_dice,
    predict,
    preset,
    save_model,
    train,
)
from .data import Dataset, SyntheticSpec, generate, load_dataset, stack
from .distillation import (
    TeacherSet,
    data_distill,
    hierarchical_distill,
    model_distill,
    parse_transforms,
    pseudo_label_quality,
    write_pseudo_labels,
)
from .metrics import evaluate, nanmean

log = logging.getLogger(__name__)

MANUAL, PSEUDO = "manual", "pseudo"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    xi: float
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.xi <= 1:
            raise ValueError("xi must lie in (0, 1]")

    def n_labeled(self, n: int) -> int:
        return int(math.floor(self.xi * n + 0.5))


@dataclass
class TrainingSet:
    """Images with the labels training may see, tagged by provenance."""

    ids: list[str]
    images: np.ndarray
    labels: np.ndarray
    provenance: list[str]

    def __len__(self):
        return len(self.ids)

    def union(self, other: "TrainingSet") -> "TrainingSet":
        return TrainingSet(self.ids + other.ids,
                           np.concatenate([self.images, other.images]) if len(other) else self.images,
                           np.concatenate([self.labels, other.labels]) if len(other) else self.labels,
                           self.provenance + other.provenance)


@dataclass
class UnlabeledSet:
    ids: list[str]
    images: np.ndarray

    def __len__(self):
        return len(self.ids)


@dataclass
class HeldOutTruth:
    """Ground truth of the unlabeled split; evaluation only."""

    ids: list[str]
    labels: np.ndarray


def split(dataset: Dataset, spec: SplitSpec) -> tuple[TrainingSet, UnlabeledSet, HeldOutTruth]:
    n = len(dataset)
    if n < 2:
        raise ValueError("dataset needs at least 2 samples")
    k = spec.n_labeled(n)
    if k == 0:
        raise ValueError(f"xi={spec.xi} leaves no labeled samples out of {n}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    lab = np.sort(perm[:k])
    unl = np.sort(perm[k:])
    labeled = TrainingSet([dataset.ids[i] for i in lab], dataset.images[lab], dataset.labels[lab], [MANUAL] * k)
    unlabeled = UnlabeledSet([dataset.ids[i] for i in unl], dataset.images[unl])
    truth = HeldOutTruth([dataset.ids[i] for i in unl], dataset.labels[unl])
    return labeled, unlabeled, truth


# ---------------------------------------------------------------------------
# label noise
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSpec:
    mu: float = 0.0
    mode: str = "iid"
    radius: tuple[int, int] = (2, 4)
    seed: int = 0
    classes: int = 3
    max_attempts: int = 20000

    def __post_init__(self):
        if not 0 <= self.mu < 0.5:
            raise ValueError("mu must lie in [0, 0.5)")
        if self.mode not in ("iid", "blob"):
            raise ValueError(f"unknown noise mode {self.mode!r}")
        if self.radius[0] < 1 or self.radius[1] < self.radius[0]:
            raise ValueError("invalid blob radius range")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")


def apply_flips(clean, mask: np.ndarray, classes: int) -> np.ndarray:
    """Shift each flipped voxel's class by ``mask`` (mod ``classes``)."""
    return ((np.asarray(clean).astype(np.int64) + mask) % classes).astype(np.uint8)


def _ball(shape, center, r):
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    d2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    return d2 <= r * r


def inject_noise(labels, spec: NoiseSpec) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt a label volume.

    Returns ``(noisy, mask)`` where ``mask`` is a uint8 class shift in
    ``1..classes-1`` at flipped voxels and 0 elsewhere, so that
    ``noisy == apply_flips(labels, mask, classes)`` and ``mask != 0`` marks
    the flipped locations.  A flip moves a voxel to one of the other classes
    uniformly at random.
    """
    y = np.asarray(labels)
    C = spec.classes
    rng = np.random.default_rng(spec.seed)
    mask = np.zeros(y.shape, dtype=np.uint8)
    if spec.mu == 0:
        return y.astype(np.uint8).copy(), mask
    if spec.mode == "iid":
        flip = rng.random(y.shape) < spec.mu
        shift = rng.integers(1, C, size=y.shape)
        mask[flip] = shift[flip]
    else:
        _plant_blobs(mask, spec, rng)
    return apply_flips(y, mask, C), mask


def _plant_blobs(mask: np.ndarray, spec: NoiseSpec, rng: np.random.Generator) -> None:
    """Disjoint, non-touching balls until the flipped fraction is within 10% of mu."""
    n = mask.size
    lo, hi = 0.9 * spec.mu * n, 1.1 * spec.mu * n
    taken = np.zeros(mask.shape, dtype=bool)
    blocked = np.zeros(mask.shape, dtype=bool)
    footprint = ndimage.generate_binary_structure(mask.ndim, 1)
    mass = 0
    for _ in range(spec.max_attempts):
        if mass >= lo:
            return
        r = int(rng.integers(spec.radius[0], spec.radius[1] + 1))
        center = [int(rng.integers(0, s)) for s in mask.shape]
        ball = _ball(mask.shape, center, r)
        size = int(ball.sum())
        if mass + size > hi or (ball & blocked).any():
            continue
        mask[ball] = rng.integers(1, spec.classes)
        taken |= ball
        blocked = ndimage.binary_dilation(taken, structure=footprint)
        mass += size
    if mass < lo:
        raise RuntimeError(f"blob noise could not reach {spec.mu:.3f} flip mass "
                           f"(got {mass / n:.3f}) in {spec.max_attempts} attempts")


def noisy_labels(labels: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Per-volume noise over a stack ``[N, *S]`` with independent child seeds."""
    seeds = np.random.SeedSequence(spec.seed).spawn(len(labels))
    out = np.empty_like(labels, dtype=np.uint8)
    for i, (y, s) in enumerate(zip(labels, seeds)):
        child = NoiseSpec(spec.mu, spec.mode, spec.radius, int(s.generate_state(1)[0]), spec.classes, spec.max_attempts)
        out[i] = inject_noise(y, child)[0]
    return out


# ---------------------------------------------------------------------------
# models from config
# ---------------------------------------------------------------------------


def build_model(cfg: RunConfig, seed: int, sites=None) -> TwoStreamDAN:
    arch = preset(cfg.arch, cfg.classes)
    kernel = gaussian_kernel(cfg.la_kernel, cfg.la_sigma, arch.ndim) if cfg.la_smooth else None
    return TwoStreamDAN(arch, cfg.classes, seed=seed, enabled=cfg.site_set if sites is None else sites,
                        la_kernel=kernel)


def optimizer(cfg: RunConfig, iters: int, seed: int) -> OptimizerState:
    return OptimizerState(lr=cfg.lr, momentum=cfg.momentum, max_iters=iters, batch=cfg.batch,
                          decay_every=cfg.decay_every, seed=seed)


class AuditLog:
    def __init__(self):
        self.rows: list[tuple[str, str, str]] = []

    def record(self, stage: str, data: TrainingSet) -> None:
        if not isinstance(data, TrainingSet):
            raise TypeError("training accepts only TrainingSet data")
        self.rows.extend((stage, sid, prov) for sid, prov in zip(data.ids, data.provenance))

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["stage", "id", "provenance"])
            w.writerows(self.rows)


def fit(model: TwoStreamDAN, data: TrainingSet, cfg: RunConfig, iters: int, seed: int,
        audit: AuditLog, stage: str, val: Dataset | None = None, log_path=None):
    audit.record(stage, data)
    opt = optimizer(cfg, iters, seed)
    val_pair = None if val is None else (val.images, val.labels)
    return train(model, data.images, data.labels, opt, TrainConfig(cfg.eval_every, log_path, cfg.la_warmup), val_pair)


def evaluate_set(model, data: Dataset) -> dict[str, float]:
    pred = predict(model, data.images)
    evs = [evaluate(p, t, data.classes) for p, t in zip(pred, data.labels)]
    return {
        "dice": float(np.mean([e.mean_dice for e in evs])),
        "adb": nanmean([np.mean(e.adb) for e in evs]),
        "hdd": nanmean([np.mean(e.hdd) for e in evs]),
        "score": nanmean([e.score for e in evs]),
    }


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

REPORT_FIELDS = ("stage", "name", "metric", "value")


@dataclass
class ExperimentReport:
    rows: list[tuple[str, str, str, float]] = field(default_factory=list)
    run_dir: Path | None = None

    def add(self, stage, name, metric, value) -> None:
        self.rows.append((stage, name, metric, float(value)))

    def get(self, stage, name, metric) -> float:
        for r in self.rows:
            if r[:3] == (stage, name, metric):
                return r[3]
        raise KeyError((stage, name, metric))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_FIELDS)
            for s, n, m, v in self.rows:
                w.writerow([s, n, m, repr(v)])

    @property
    def teacher_dice(self) -> float:
        return max(r[3] for r in self.rows if r[0] == "a" and r[2] == "val_dice")

    @property
    def final_dice(self) -> float:
        return self.get("c", "final", "val_dice")


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Training and validation sets from ``data_dir``/``val_dir`` or generated."""
    if cfg.data_dir:
        train_set = load_dataset(cfg.data_dir, cfg.classes)
    else:
        s = generate(SyntheticSpec(count=cfg.count, shape=cfg.shape_tuple, seed=cfg.seed))
        X, Y = stack(s)
        train_set = Dataset([f"{i:04d}" for i in range(len(s))], X, Y, None, cfg.classes)
    if cfg.val_dir:
        val_set = load_dataset(cfg.val_dir, cfg.classes)
    else:
        s = generate(SyntheticSpec(count=cfg.val_count, shape=cfg.shape_tuple, seed=cfg.seed + 7919))
        X, Y = stack(s)
        val_set = Dataset([f"v{i:04d}" for i in range(len(s))], X, Y, None, cfg.classes)
    return train_set, val_set


def _stage(name: str, report: ExperimentReport, run_dir: Path):
    class _Guard:
        def __enter__(self):
            log.info("stage %s", name)
            self.t = time.perf_counter()

        def __exit__(self, et, ev, tb):
            if ev is not None and not isinstance(ev, StageError):
                report.write_csv(run_dir / "report.csv")
                raise StageError(name, ev) from ev
            log.info("stage %s done in %.1fs", name, time.perf_counter() - self.t)

    return _Guard()


def run_pipeline(cfg: RunConfig, data: tuple[Dataset, Dataset] | None = None,
                 compare_distillers: bool = False) -> ExperimentReport:
    """Teachers on the labeled split, hierarchical pseudo-labels for the rest,
    then a DAN retrained on the union.  Artifacts go to ``cfg.out_dir``."""
    run_dir = Path(cfg.out_dir)
    (run_dir / "teachers").mkdir(parents=True, exist_ok=True)
    cfg.write(run_dir / "config.txt")
    report = ExperimentReport(run_dir=run_dir)
    audit = AuditLog()
    train_set, val_set = data if data is not None else load_data(cfg)

    labeled, unlabeled, truth = split(train_set, SplitSpec(cfg.xi, cfg.seed))
    if cfg.mu > 0:
        noise = NoiseSpec(cfg.mu, cfg.noise_mode, (cfg.blob_rmin, cfg.blob_rmax), cfg.seed + 1, cfg.classes)
        labeled.labels = noisy_labels(labeled.labels, noise)

    iters = cfg.teacher_iter_list
    n_teachers = cfg.teachers
    if len(iters) < n_teachers:
        iters = iters + [iters[-1]] * (n_teachers - len(iters))
    teachers = []
    with _stage("a", report, run_dir):
        for t in range(n_teachers):
            tid = chr(ord("A") + t)
            seed = cfg.seed + 10 * (t + 1)
            sites = cfg.site_set if cfg.teacher_kind == "dan" else frozenset()
            model = build_model(cfg, seed, sites)
            fit(model, labeled, cfg, iters[t], seed, audit, f"a:{tid}",
                log_path=run_dir / "teachers" / f"{tid}.log.csv")
            save_model(model, run_dir / "teachers" / f"{tid}.ckpt")
            report.add("a", f"teacher_{tid}", "val_dice", evaluate_set(model, val_set)["dice"])
            teachers.append(model)

    pseudo = TrainingSet([], labeled.images[:0], labeled.labels[:0], [])
    with _stage("b", report, run_dir):
        if len(unlabeled):
            tset = TeacherSet(teachers)
            transforms = parse_transforms(cfg.transforms, len(cfg.shape_tuple))
            labels = np.stack([hierarchical_distill(tset, x, transforms, cfg.average_probs)
                               for x in unlabeled.images])
            write_pseudo_labels(run_dir / "pseudo", unlabeled.ids, labels, cfg.classes, truths=truth.labels)
            q = [pseudo_label_quality(p, t, cfg.classes) for p, t in zip(labels, truth.labels)]
            report.add("b", "hd", "dice", np.mean([x.mean_foreground_dice for x in q]))
            report.add("b", "hd", "flip_rate", np.mean([x.flip_rate for x in q]))
            if compare_distillers:
                md = [model_distill(tset, x, cfg.average_probs) for x in unlabeled.images]
                report.add("b", "md", "dice", _quality(md, truth, cfg.classes))
                for tid, m in zip(tset.ids, teachers):
                    dd = [data_distill(m, x, transforms, cfg.average_probs) for x in unlabeled.images]
                    report.add("b", f"dd_{tid}", "dice", _quality(dd, truth, cfg.classes))
            pseudo = TrainingSet(list(unlabeled.ids), unlabeled.images, labels, [PSEUDO] * len(unlabeled))

    with _stage("c", report, run_dir):
        union = labeled.union(pseudo)
        final = build_model(cfg, cfg.seed + 100)
        fit(final, union, cfg, cfg.iters, cfg.seed + 100, audit, "c", log_path=run_dir / "train_log.csv")
        save_model(final, run_dir / "final.ckpt")
        for metric, value in evaluate_set(final, val_set).items():
            report.add("c", "final", f"val_{metric}", value)

    audit.write(run_dir / "provenance.csv")
    report.write_csv(run_dir / "report.csv")
    return report


def _quality(labels, truth: HeldOutTruth, classes: int) -> float:
    return float(np.mean([pseudo_label_quality(p, t, classes).mean_foreground_dice
                          for p, t in zip(labels, truth.labels)]))


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

SWEEP_FIELDS = ("xi", "teacher_dice", "pseudo_dice", "pseudo_flip_rate", "final_dice", "final_adb", "final_hdd")


def xi_sweep(cfg: RunConfig, xis: Sequence[float], data=None) -> list[dict]:
    rows = []
    root = Path(cfg.out_dir)
    data = data if data is not None else load_data(cfg)
    for xi in xis:
        rep = run_pipeline(cfg.replace(xi=xi, out_dir=str(root / f"xi_{xi:g}")), data)
        has_b = any(r[0] == "b" for r in rep.rows)
        rows.append({
            "xi": xi,
            "teacher_dice": rep.teacher_dice,
            "pseudo_dice": rep.get("b", "hd", "dice") if has_b else math.nan,
            "pseudo_flip_rate": rep.get("b", "hd", "flip_rate") if has_b else math.nan,
            "final_dice": rep.final_dice,
            "final_adb": rep.get("c", "final", "val_adb"),
            "final_hdd": rep.get("c", "final", "val_hdd"),
        })
    write_rows(root / "sweep.csv", SWEEP_FIELDS, rows)
    return rows


DEFAULT_CHAIN = ((), ("4",), ("3", "4"), ("2", "3", "4"), ("1", "2", "3", "4"))
ABLATION_FIELDS = ("variant", "sites", "mean_dice", "mean_score", "seeds", "dice_per_seed")


def parse_chain(text: str) -> list[tuple[str, ...]]:
    out = []
    for item in text.split(";"):
        item = item.strip()
        out.append(() if item in ("", "none") else tuple(sorted(item.split(","))))
    return out


def ablation_sweep(cfg: RunConfig, site_subsets: Sequence[Sequence[str]] = DEFAULT_CHAIN,
                   seeds: Sequence[int] = (0,), data=None) -> list[dict]:
    """Train one DAN per (site subset, seed) on identical noisy data.

    Variant ``k`` with seed ``s`` always uses model seed ``s`` and the same
    noisy labels, so variants differ only in which sites are active.
    """
    train_set, val_set = data if data is not None else load_data(cfg)
    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    cfg.write(root / "config.txt")
    per_run = []
    rows = []
    for k, subset in enumerate(site_subsets):
        dices, scores = [], []
        for s in seeds:
            labels = train_set.labels
            if cfg.mu > 0:
                labels = noisy_labels(labels, NoiseSpec(cfg.mu, cfg.noise_mode, (cfg.blob_rmin, cfg.blob_rmax),
                                                        s + 1, cfg.classes))
            data_s = TrainingSet(list(train_set.ids), train_set.images, labels, [MANUAL] * len(train_set))
            model = build_model(cfg, s, frozenset(subset))
            fit(model, data_s, cfg, cfg.iters, s, AuditLog(), f"ablate:{k}")
            ev = evaluate_set(model, val_set)
            dices.append(ev["dice"])
            scores.append(ev["score"])
            per_run.append({"variant": k, "sites": _sites_text(subset), "seed": s,
                            "val_dice": ev["dice"], "score": ev["score"]})
        rows.append({"variant": k, "sites": _sites_text(subset), "mean_dice": float(np.mean(dices)),
                     "mean_score": float(np.mean(scores)), "seeds": " ".join(map(str, seeds)),
                     "dice_per_seed": " ".join(repr(d) for d in dices)})
    write_rows(root / "ablation.csv", ABLATION_FIELDS, rows)
    write_rows(root / "ablation_runs.csv", ("variant", "sites", "seed", "val_dice", "score"), per_run)
    return rows


def _sites_text(subset) -> str:
    return "+".join(sorted(subset)) if subset else "none"


def write_rows(path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
