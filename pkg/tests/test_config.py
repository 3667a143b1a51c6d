"""Run configuration: parsing, validation, precedence and echo."""

import math

import pytest

from danlab.config import SCHEMA, ConfigError, parse_text, resolve


class TestParse:
    def test_comments_and_blank_lines(self):
        text = "# header\n\nseed = 4   # trailing\n  xi=0.3\n"
        assert parse_text(text) == {"seed": "4", "xi": "0.3"}

    @pytest.mark.parametrize("text", ["seed 4", " = 3"])
    def test_malformed_lines(self, text):
        with pytest.raises(ConfigError):
            parse_text(text)


class TestResolve:
    def test_defaults(self):
        cfg = resolve()
        assert cfg.lr == 0.05 and cfg.batch == 4 and cfg.xi == 0.5
        assert cfg.la_sigma == math.sqrt(0.5)
        assert cfg.site_set == frozenset("1234")
        assert cfg.teacher_iter_list == [500, 750, 1000]

    def test_file_then_overrides(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("seed = 3\nmu = 0.2\n")
        cfg = resolve(path, {"seed": 9, "xi": None})
        assert cfg.seed == 9 and cfg.mu == 0.2 and cfg.xi == 0.5

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("learning_rate = 0.1\n")
        with pytest.raises(ConfigError, match="learning_rate"):
            resolve(path)

    @pytest.mark.parametrize("key,value", [("mu", "0.5"), ("xi", "0"), ("xi", "1.5"), ("sites", "1,5"),
                                           ("shape", "8x8x8x8"), ("arch", "huge"), ("iters", "0"),
                                           ("la_smooth", "maybe"), ("teacher_iters", "a,b"), ("seed", "x")])
    def test_invalid_values(self, key, value):
        with pytest.raises(ConfigError):
            resolve(None, {key: value})

    def test_blob_radius_order(self):
        with pytest.raises(ConfigError):
            resolve(None, {"blob_rmin": 5, "blob_rmax": 2})

    def test_echo_round_trips(self, tmp_path):
        cfg = resolve(None, {"seed": 2, "sites": "3,4", "la_smooth": "false", "lr": 0.0125})
        cfg.write(tmp_path / "echo.txt")
        assert resolve(tmp_path / "echo.txt").values == cfg.values
        assert len((tmp_path / "echo.txt").read_text().splitlines()) == len(SCHEMA)

    def test_replace(self):
        cfg = resolve()
        other = cfg.replace(xi=0.8)
        assert other.xi == 0.8 and cfg.xi == 0.5
        with pytest.raises(ConfigError):
            cfg.replace(bogus=1)

    def test_no_sites(self):
        assert resolve(None, {"sites": "none"}).site_set == frozenset()
