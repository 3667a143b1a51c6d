"""``danlab`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
Data goes to files; stdout carries progress lines and the final report path.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _apply_threads() -> None:
    n = os.environ.get("DANLAB_THREADS")
    if n:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def _fail(kind: str, msg: str) -> None:
    msg = " ".join(str(msg).split())
    print(f"danlab: error={kind} message={msg}", file=sys.stderr)


def _parse_shape(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"bad --shape {text!r}") from None
    return dims


# config flags shared by the training commands; None means "not given"
CONFIG_FLAGS = {
    "seed": int, "arch": str, "classes": int, "xi": float, "mu": float, "noise_mode": str,
    "sites": str, "iters": int, "lr": float, "batch": int, "transforms": str, "teachers": int,
    "teacher_iters": str, "teacher_kind": str, "la_smooth": str, "count": int, "val_count": int,
    "shape": str, "data_dir": str, "val_dir": str, "ablation_chain": str, "ablation_seeds": str,
}


def _add_config_flags(p: argparse.ArgumentParser, skip: tuple[str, ...] = ()) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", dest="out_dir", help="run directory")
    for key, typ in CONFIG_FLAGS.items():
        if key in skip:
            continue
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=typ, default=None)


def _resolve(args):
    from .config import resolve

    overrides = {k: getattr(args, k, None) for k in list(CONFIG_FLAGS) + ["out_dir"]}
    return resolve(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="danlab", description="two-stream attention network laboratory")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--shape", default="32x32")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise-sigma", type=float, default=0.15)
    g.add_argument("--deformation", type=float, default=0.15)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one DAN on a labeled dataset")
    _add_config_flags(t)

    d = sub.add_parser("distill", help="pseudo-label a dataset with teacher checkpoints")
    _add_config_flags(d, skip=("teachers",))
    d.add_argument("--teachers", dest="teacher_ckpts", required=True, help="comma-separated checkpoint paths")
    d.add_argument("--input", required=True, help="dataset directory to label")
    d.add_argument("--mode", choices=("hd", "dd", "md"), default="hd")

    s = sub.add_parser("selftrain", help="teachers, hierarchical distillation, retraining")
    _add_config_flags(s)
    s.add_argument("--sweep-xi", help="comma-separated xi values; one pipeline per value")

    a = sub.add_parser("ablate", help="attention-site ablation chain")
    _add_config_flags(a)

    e = sub.add_parser("eval", help="score predicted label volumes against truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--classes", type=int, default=3)
    e.add_argument("--out", required=True)

    sub.add_parser("selfcheck", help="run the built-in diagnostic suite")
    return ap


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .data import SyntheticSpec, generate, write_dataset

    spec = SyntheticSpec(count=args.count, shape=_parse_shape(args.shape), seed=args.seed,
                         noise_sigma=args.noise_sigma, deformation=args.deformation)
    try:
        spec.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    index = write_dataset(args.out, generate(spec))
    print(index)
    return EXIT_OK


def cmd_train(args) -> int:
    from .dan import save_model
    from .selftrain import (AuditLog, MANUAL, NoiseSpec, TrainingSet, build_model, evaluate_set, fit,
                            load_data, noisy_labels, write_rows)

    cfg = _resolve(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.txt")
    train_set, val_set = load_data(cfg)
    labels = train_set.labels
    if cfg.mu > 0:
        labels = noisy_labels(labels, NoiseSpec(cfg.mu, cfg.noise_mode, (cfg.blob_rmin, cfg.blob_rmax),
                                                cfg.seed + 1, cfg.classes))
    data = TrainingSet(list(train_set.ids), train_set.images, labels, [MANUAL] * len(train_set))
    model = build_model(cfg, cfg.seed)
    print(f"training {cfg.iters} iterations", flush=True)
    fit(model, data, cfg, cfg.iters, cfg.seed, AuditLog(), "train", val_set, out / "train_log.csv")
    save_model(model, out / "final.ckpt")
    ev = evaluate_set(model, val_set)
    write_rows(out / "report.csv", ("metric", "value"), [{"metric": f"val_{k}", "value": v} for k, v in ev.items()])
    print(out / "report.csv")
    return EXIT_OK


def cmd_distill(args) -> int:
    from .dan import load_model, preset
    from .data import load_dataset
    from .distillation import (TeacherSet, data_distill, hierarchical_distill, model_distill,
                               parse_transforms, pseudo_label_quality, write_pseudo_labels)
    from .selftrain import write_rows

    cfg = _resolve(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.txt")
    arch = preset(cfg.arch, cfg.classes)
    paths = [p for p in args.teacher_ckpts.split(",") if p]
    for p in paths:
        if not Path(p).exists():
            raise UsageError(f"checkpoint not found: {p}")
    teachers = TeacherSet([load_model(p, arch, cfg.classes) for p in paths])
    data = load_dataset(args.input, cfg.classes)
    try:
        transforms = parse_transforms(cfg.transforms, arch.ndim)
    except ValueError as e:
        raise UsageError(f"transforms: {e}") from None
    labels = []
    for x in data.images:
        if args.mode == "hd":
            labels.append(hierarchical_distill(teachers, x, transforms, cfg.average_probs))
        elif args.mode == "dd":
            labels.append(data_distill(teachers.models[0], x, transforms, cfg.average_probs))
        else:
            labels.append(model_distill(teachers, x, cfg.average_probs))
    manifest = write_pseudo_labels(out / "pseudo", data.ids, labels, cfg.classes,
                                   sources=[str(data.root / f"img_{i}.vol") for i in data.ids],
                                   truths=data.labels)
    q = [pseudo_label_quality(l, t, cfg.classes) for l, t in zip(labels, data.labels)]
    write_rows(out / "report.csv", ("metric", "value"), [
        {"metric": "pseudo_dice", "value": float(np.mean([x.mean_foreground_dice for x in q]))},
        {"metric": "pseudo_flip_rate", "value": float(np.mean([x.flip_rate for x in q]))},
    ])
    print(manifest)
    print(out / "report.csv")
    return EXIT_OK


def cmd_selftrain(args) -> int:
    from .selftrain import run_pipeline, xi_sweep

    cfg = _resolve(args)
    if args.sweep_xi:
        try:
            xis = [float(v) for v in args.sweep_xi.split(",")]
        except ValueError:
            raise UsageError(f"bad --sweep-xi {args.sweep_xi!r}") from None
        xi_sweep(cfg, xis)
        print(Path(cfg.out_dir) / "sweep.csv")
        return EXIT_OK
    rep = run_pipeline(cfg)
    print(rep.run_dir / "report.csv")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .selftrain import ablation_sweep, parse_chain

    cfg = _resolve(args)
    seeds = [int(s) for s in cfg.ablation_seeds.split(",") if s]
    chain = parse_chain(cfg.ablation_chain)
    for subset in chain:
        if not set(subset) <= {"1", "2", "3", "4"}:
            raise UsageError(f"bad ablation chain entry {subset}")
    ablation_sweep(cfg, chain, seeds)
    out = Path(cfg.out_dir)
    # the report for ablate is the variant table
    (out / "report.csv").write_bytes((out / "ablation.csv").read_bytes())
    print(out / "report.csv")
    return EXIT_OK


def _label_files(root: Path) -> dict[str, Path]:
    files = sorted(root.glob("*.lbl"))
    out = {}
    for f in files:
        key = f.stem[4:] if f.stem.startswith("lbl_") else f.stem
        out[key] = f
    return out


def cmd_eval(args) -> int:
    from .data import read_volume
    from .metrics import evaluate, nanmean

    pred_root, truth_root = Path(args.pred), Path(args.truth)
    for p in (pred_root, truth_root):
        if not p.is_dir():
            raise UsageError(f"not a directory: {p}")
    preds, truths = _label_files(pred_root), _label_files(truth_root)
    common = sorted(set(preds) & set(truths))
    if not common:
        raise UsageError("no matching label files between --pred and --truth")
    C = args.classes
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fields = ["id"] + [f"{m}_c{c}" for m in ("dice", "adb", "hdd") for c in range(1, C)] + ["score"]
    rows = []
    for key in common:
        ev = evaluate(np.asarray(read_volume(preds[key], C)), np.asarray(read_volume(truths[key], C)), C)
        row = {"id": key, "score": ev.score}
        for c, (d, a, h) in enumerate(zip(ev.dice, ev.adb, ev.hdd), start=1):
            row.update({f"dice_c{c}": d, f"adb_c{c}": a, f"hdd_c{c}": h})
        rows.append(row)
    mean = {"id": "mean"}
    for f in fields[1:]:
        mean[f] = nanmean([r[f] for r in rows])
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows + [mean]:
            w.writerow({k: (repr(float(v)) if not isinstance(v, str) else v) for k, v in r.items()})
    print(out / "report.csv")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_all

    ok = run_all(print)
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "distill": cmd_distill,
    "selftrain": cmd_selftrain,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "selfcheck": cmd_selfcheck,
}


def main(argv=None) -> int:
    _apply_threads()
    from .config import ConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        _fail("usage", e)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - surface as a one-line runtime failure
        stage = getattr(e, "stage", None)
        _fail("runtime", f"stage={stage} {e}" if stage else f"{type(e).__name__}: {e}")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
