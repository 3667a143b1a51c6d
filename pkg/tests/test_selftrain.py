"""Splitting, label noise, the three-stage pipeline and the sweeps."""

import csv
import math

import numpy as np
import pytest
from scipy import ndimage

from danlab import selftrain
from danlab.config import resolve
from danlab.data import Dataset
from danlab.selftrain import (
    MANUAL,
    PSEUDO,
    SWEEP_FIELDS,
    AuditLog,
    HeldOutTruth,
    NoiseSpec,
    SplitSpec,
    StageError,
    TrainingSet,
    ablation_sweep,
    apply_flips,
    inject_noise,
    noisy_labels,
    parse_chain,
    run_pipeline,
    split,
    xi_sweep,
)


def _dataset(n, side=4):
    rng = np.random.default_rng(0)
    return Dataset([f"{i:03d}" for i in range(n)], rng.normal(size=(n, 1, side, side)),
                   rng.integers(0, 3, size=(n, side, side)).astype(np.uint8))


def _cfg(tmp_path, **kw):
    base = dict(arch="tiny", shape="28x28", count=6, val_count=2, iters=4, teacher_iters="2,3", teachers=2,
                transforms="r0,r1", batch=2, out_dir=str(tmp_path / "run"))
    base.update(kw)
    return resolve(None, base)


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestSplit:
    def test_all_labeled(self):
        lab, unl, truth = split(_dataset(10), SplitSpec(1.0))
        assert len(lab) == 10 and len(unl) == 0 and len(truth.ids) == 0

    def test_half_is_deterministic(self):
        a = split(_dataset(10), SplitSpec(0.5, seed=3))
        b = split(_dataset(10), SplitSpec(0.5, seed=3))
        assert len(a[0]) == 5 and a[0].ids == b[0].ids and a[1].ids == b[1].ids

    def test_rounding_rule(self):
        assert len(split(_dataset(100), SplitSpec(0.3))[0]) == 30
        assert SplitSpec(0.25).n_labeled(10) == 3

    @pytest.mark.parametrize("seed", range(5))
    def test_disjoint_and_exhaustive(self, seed):
        ds = _dataset(17)
        lab, unl, truth = split(ds, SplitSpec(0.4, seed))
        assert set(lab.ids).isdisjoint(unl.ids)
        assert sorted(lab.ids + unl.ids) == ds.ids
        assert truth.ids == unl.ids
        for sid, y in zip(truth.ids, truth.labels):
            assert np.array_equal(y, ds.labels[ds.ids.index(sid)])
        assert lab.provenance == [MANUAL] * len(lab)

    def test_errors(self):
        with pytest.raises(ValueError):
            split(_dataset(1), SplitSpec(1.0))
        with pytest.raises(ValueError):
            split(_dataset(3), SplitSpec(0.1))
        with pytest.raises(ValueError):
            SplitSpec(0.0)


class TestNoise:
    def test_zero_mu(self):
        y = np.random.default_rng(0).integers(0, 3, size=(8, 8))
        noisy, mask = inject_noise(y, NoiseSpec(0.0))
        assert np.array_equal(noisy, y) and not mask.any()

    @pytest.mark.parametrize("seed", range(5))
    def test_iid_rate_on_1e5_voxels(self, seed):
        y = np.zeros((100, 1000), dtype=np.uint8)
        _, mask = inject_noise(y, NoiseSpec(0.2, seed=seed))
        assert 0.19 <= np.count_nonzero(mask) / y.size <= 0.21

    def test_iid_rate_on_1e6_voxels(self):
        y = np.zeros((1000, 1000), dtype=np.uint8)
        mu = 0.3
        _, mask = inject_noise(y, NoiseSpec(mu, seed=11))
        sigma = math.sqrt(mu * (1 - mu) / y.size)
        assert abs(np.count_nonzero(mask) / y.size - mu) <= 3 * sigma

    @pytest.mark.parametrize("mode", ["iid", "blob"])
    def test_mask_explains_noise(self, mode):
        y = np.random.default_rng(1).integers(0, 3, size=(24, 24)).astype(np.uint8)
        spec = NoiseSpec(0.2, mode, seed=4)
        noisy, mask = inject_noise(y, spec)
        assert np.array_equal(noisy, apply_flips(y, mask, 3))
        assert np.array_equal(noisy != y, mask != 0)
        again, mask2 = inject_noise(y, spec)
        assert np.array_equal(again, noisy) and np.array_equal(mask2, mask)

    def test_flips_land_on_other_classes_uniformly(self):
        y = np.zeros(200_000, dtype=np.uint8)
        noisy, _ = inject_noise(y, NoiseSpec(0.4, seed=2, classes=3))
        c1, c2 = np.count_nonzero(noisy == 1), np.count_nonzero(noisy == 2)
        assert abs(c1 - c2) < 4 * math.sqrt(c1 + c2)

    @pytest.mark.parametrize("seed", range(4))
    def test_blob_components_are_balls(self, seed):
        spec = NoiseSpec(0.15, "blob", (2, 4), seed)
        _, mask = inject_noise(np.zeros((48, 48), dtype=np.uint8), spec)
        flipped = mask != 0
        assert 0.9 * 0.15 <= flipped.mean() <= 1.1 * 0.15
        comps, n = ndimage.label(flipped)
        assert n >= 2
        grid = np.indices(flipped.shape)
        for k, sl in enumerate(ndimage.find_objects(comps), start=1):
            comp = comps == k
            touches = any(s.start == 0 or s.stop == dim for s, dim in zip(sl, flipped.shape))
            if touches:
                continue
            extents = [s.stop - s.start for s in sl]
            assert extents[0] == extents[1] and extents[0] % 2 == 1
            r = (extents[0] - 1) // 2
            assert 2 <= r <= 4
            centre = [s.start + r for s in sl]
            ball = sum((g - c) ** 2 for g, c in zip(grid, centre)) <= r * r
            assert np.array_equal(comp, ball)

    def test_blob_3d(self):
        _, mask = inject_noise(np.zeros((20, 20, 20), dtype=np.uint8), NoiseSpec(0.1, "blob", (2, 3), 5))
        assert 0.09 <= (mask != 0).mean() <= 0.11

    def test_stack_noise_uses_independent_children(self):
        y = np.zeros((3, 30, 30), dtype=np.uint8)
        out = noisy_labels(y, NoiseSpec(0.2, seed=1))
        assert not np.array_equal(out[0], out[1])
        assert np.array_equal(out, noisy_labels(y, NoiseSpec(0.2, seed=1)))

    @pytest.mark.parametrize("kw", [dict(mu=0.5), dict(mu=-0.1), dict(mode="salt"), dict(radius=(3, 2)),
                                    dict(classes=1)])
    def test_bad_specs(self, kw):
        with pytest.raises(ValueError):
            NoiseSpec(**kw)


class TestAudit:
    def test_rejects_held_out_truth(self):
        with pytest.raises(TypeError):
            AuditLog().record("a", HeldOutTruth(["x"], np.zeros((1, 2, 2))))

    def test_fit_rejects_non_training_data(self, tmp_path):
        cfg = _cfg(tmp_path)
        model = selftrain.build_model(cfg, 0)
        with pytest.raises(TypeError):
            selftrain.fit(model, _dataset(4, 28), cfg, 1, 0, AuditLog(), "a")

    def test_union_keeps_provenance(self):
        a = TrainingSet(["x"], np.zeros((1, 1, 2, 2)), np.zeros((1, 2, 2)), [MANUAL])
        b = TrainingSet(["y"], np.ones((1, 1, 2, 2)), np.ones((1, 2, 2)), [PSEUDO])
        u = a.union(b)
        assert u.ids == ["x", "y"] and u.provenance == [MANUAL, PSEUDO] and len(u.images) == 2


class TestPipeline:
    def test_half_labeled_run_directory(self, tmp_path):
        cfg = _cfg(tmp_path, xi=0.5, mu=0.1)
        rep = run_pipeline(cfg)
        run = tmp_path / "run"
        for name in ("config.txt", "teachers/A.ckpt", "teachers/B.ckpt", "pseudo/manifest.csv", "final.ckpt",
                     "report.csv", "provenance.csv", "train_log.csv"):
            assert (run / name).exists(), name
        assert len(list((run / "pseudo").glob("*.lbl"))) == 3
        rows = _read(run / "report.csv")
        assert list(rows[0]) == ["stage", "name", "metric", "value"]
        assert {r["stage"] for r in rows} == {"a", "b", "c"}
        assert 0 <= rep.get("b", "hd", "dice") <= 1
        assert resolve(run / "config.txt").values == cfg.values

    def test_truth_never_enters_training(self, tmp_path):
        cfg = _cfg(tmp_path, xi=0.5)
        run_pipeline(cfg)
        rows = _read(tmp_path / "run" / "provenance.csv")
        manual = {r["id"] for r in rows if r["stage"].startswith("a")}
        assert all(r["provenance"] == MANUAL for r in rows if r["stage"].startswith("a"))
        final = [r for r in rows if r["stage"] == "c"]
        assert len(final) == 6
        for r in final:
            assert r["provenance"] == (MANUAL if r["id"] in manual else PSEUDO)

    def test_fully_labeled_skips_distillation(self, tmp_path):
        rep = run_pipeline(_cfg(tmp_path, xi=1.0))
        assert not any(r[0] == "b" for r in rep.rows)
        assert not (tmp_path / "run" / "pseudo").exists()
        assert 0 <= rep.final_dice <= 1

    def test_distiller_comparison_rows(self, tmp_path):
        rep = run_pipeline(_cfg(tmp_path, xi=0.5), compare_distillers=True)
        for name in ("hd", "md", "dd_A", "dd_B"):
            assert 0 <= rep.get("b", name, "dice") <= 1

    def test_stage_failure_is_named_and_keeps_artifacts(self, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise RuntimeError("distiller exploded")

        monkeypatch.setattr(selftrain, "hierarchical_distill", boom)
        with pytest.raises(StageError) as info:
            run_pipeline(_cfg(tmp_path, xi=0.5))
        assert info.value.stage == "b"
        assert (tmp_path / "run" / "teachers" / "A.ckpt").exists()
        assert {r["stage"] for r in _read(tmp_path / "run" / "report.csv")} == {"a"}

    def test_deterministic(self, tmp_path):
        for d in ("one", "two"):
            run_pipeline(_cfg(tmp_path, xi=0.5, mu=0.2, out_dir=str(tmp_path / d)))
        for name in ("final.ckpt", "report.csv", "teachers/B.ckpt", "pseudo/manifest.csv"):
            assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()

    def test_single_stream_teachers(self, tmp_path):
        rep = run_pipeline(_cfg(tmp_path, xi=0.5, teacher_kind="single", teachers=1))
        assert rep.teacher_dice == rep.get("a", "teacher_A", "val_dice")


class TestSweeps:
    def test_xi_sweep_schema(self, tmp_path):
        rows = xi_sweep(_cfg(tmp_path, teachers=1, teacher_iters="2"), [0.3, 0.5, 1.0])
        table = _read(tmp_path / "run" / "sweep.csv")
        assert tuple(table[0]) == SWEEP_FIELDS
        assert [float(r["xi"]) for r in table] == [0.3, 0.5, 1.0]
        assert math.isnan(rows[2]["pseudo_dice"]) and not math.isnan(rows[0]["pseudo_dice"])
        assert (tmp_path / "run" / "xi_0.3" / "final.ckpt").exists()

    def test_ablation_table(self, tmp_path):
        ablation_sweep(_cfg(tmp_path, mu=0.2), seeds=[0])
        table = _read(tmp_path / "run" / "ablation.csv")
        assert len(table) == 5
        assert [r["sites"] for r in table] == ["none", "4", "3+4", "2+3+4", "1+2+3+4"]
        assert len(_read(tmp_path / "run" / "ablation_runs.csv")) == 5

    def test_repeated_variant_is_bit_identical(self, tmp_path):
        rows = ablation_sweep(_cfg(tmp_path, mu=0.2), [(), ()], seeds=[0, 1])
        assert rows[0]["dice_per_seed"] == rows[1]["dice_per_seed"]
        assert rows[0]["mean_score"] == rows[1]["mean_score"] or math.isnan(rows[0]["mean_score"])

    def test_parse_chain(self):
        assert parse_chain("none;4;4,3") == [(), ("4",), ("3", "4")]
