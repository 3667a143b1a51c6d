"""Command line: exit codes, output files and the error line format."""

import csv
import filecmp

import numpy as np
import pytest

from danlab import autodiff
from danlab.cli import main
from danlab.data import read_volume

SMALL = ["--arch", "tiny", "--shape", "28x28", "--count", "4", "--val-count", "2", "--iters", "3",
         "--batch", "2", "--teacher-iters", "2,3", "--teachers", "2", "--transforms", "r0,r1"]


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--count", "20", "--shape", "32x32", "--seed", "7", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def checkpoints(tmp_path_factory):
    paths = []
    for seed in (0, 1):
        out = tmp_path_factory.mktemp(f"train{seed}")
        assert main(["train", *SMALL, "--seed", str(seed), "--out", str(out)]) == 0
        paths.append(out / "final.ckpt")
    return paths


class TestGenData:
    def test_twenty_pairs_and_index(self, dataset):
        assert len(list(dataset.glob("img_*.vol"))) == 20
        assert len(list(dataset.glob("lbl_*.lbl"))) == 20
        rows = _rows(dataset / "index.csv")
        assert len(rows) == 20 and rows[0]["shape"] == "32x32"

    def test_byte_identical_reruns(self, dataset, tmp_path):
        again = tmp_path / "again"
        assert main(["gen-data", "--count", "20", "--shape", "32x32", "--seed", "7", "--out", str(again)]) == 0
        names = sorted(p.name for p in dataset.iterdir())
        assert names == sorted(p.name for p in again.iterdir())
        match, mismatch, errors = filecmp.cmpfiles(dataset, again, names, shallow=False)
        assert not mismatch and not errors

    def test_tiny_shape_is_usage_error(self, tmp_path, capsys):
        assert main(["gen-data", "--count", "2", "--shape", "8x8", "--out", str(tmp_path)]) == 2
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and err[0].startswith("danlab: error=usage message=")

    def test_stdout_is_index_path(self, tmp_path, capsys):
        main(["gen-data", "--count", "1", "--shape", "28x28", "--out", str(tmp_path)])
        assert capsys.readouterr().out.strip() == str(tmp_path / "index.csv")


class TestTrain:
    def test_outputs(self, checkpoints):
        run = checkpoints[0].parent
        assert (run / "config.txt").exists() and (run / "train_log.csv").exists()
        rows = {r["metric"]: float(r["value"]) for r in _rows(run / "report.csv")}
        assert 0.0 <= rows["val_dice"] <= 1.0

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.txt"
        cfg.write_text("bogus = 1\n")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2
        assert "error=usage" in capsys.readouterr().err


class TestDistill:
    def test_all12_writes_pseudo_labels(self, checkpoints, dataset, tmp_path, capsys):
        teachers = ",".join(map(str, checkpoints))
        code = main(["distill", "--arch", "tiny", "--teachers", teachers, "--transforms", "all12",
                     "--input", str(dataset), "--out", str(tmp_path)])
        assert code == 0
        rows = _rows(tmp_path / "pseudo" / "manifest.csv")
        assert len(rows) == 20
        lab = np.asarray(read_volume(tmp_path / "pseudo" / rows[0]["pseudo_label"], 3))
        assert lab.shape == (32, 32) and lab.max() <= 2
        assert capsys.readouterr().out.strip().splitlines()[-1] == str(tmp_path / "report.csv")

    def test_missing_checkpoint(self, dataset, tmp_path, capsys):
        code = main(["distill", "--arch", "tiny", "--teachers", str(tmp_path / "nope.ckpt"),
                     "--input", str(dataset), "--out", str(tmp_path / "o")])
        assert code == 2
        err = capsys.readouterr().err.strip()
        assert err.startswith("danlab: error=usage message=") and "nope.ckpt" in err


class TestSelftrain:
    def test_report_schema(self, tmp_path, capsys):
        assert main(["selftrain", *SMALL, "--xi", "0.5", "--mu", "0.2", "--out", str(tmp_path)]) == 0
        assert capsys.readouterr().out.strip().splitlines()[-1] == str(tmp_path / "report.csv")
        rows = _rows(tmp_path / "report.csv")
        assert list(rows[0]) == ["stage", "name", "metric", "value"]
        assert {r["stage"] for r in rows} == {"a", "b", "c"}

    def test_sweep(self, tmp_path):
        assert main(["selftrain", *SMALL, "--sweep-xi", "0.5,1.0", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "sweep.csv").exists()

    def test_bad_sweep(self, tmp_path):
        assert main(["selftrain", *SMALL, "--sweep-xi", "a,b", "--out", str(tmp_path)]) == 2


class TestEval:
    def test_self_comparison(self, dataset, tmp_path):
        assert main(["eval", "--pred", str(dataset), "--truth", str(dataset), "--out", str(tmp_path)]) == 0
        rows = _rows(tmp_path / "report.csv")
        assert len(rows) == 21 and rows[-1]["id"] == "mean"
        for key in ("dice_c1", "dice_c2"):
            assert all(float(r[key]) == 1.0 for r in rows)
        for key in ("adb_c1", "hdd_c2"):
            assert all(float(r[key]) == 0.0 for r in rows)

    def test_missing_dir(self, tmp_path):
        assert main(["eval", "--pred", str(tmp_path / "x"), "--truth", str(tmp_path), "--out", str(tmp_path)]) == 2


class TestSelfcheck:
    def test_passes(self, capsys):
        assert main(["selfcheck"]) == 0
        assert capsys.readouterr().out

    def test_corrupted_adjoint_fails(self, monkeypatch):
        monkeypatch.setitem(autodiff.UNARY_GRADS, "relu", lambda a, out, g: 2 * g * (a > 0))
        assert main(["selfcheck"]) == 1


class TestUsage:
    def test_no_command(self):
        assert main([]) == 2

    def test_unknown_flag(self):
        assert main(["eval", "--bogus"]) == 2
