"""Flat ``key = value`` run configuration with a typed schema."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _choice(*options: str) -> Callable[[str], str]:
    def conv(v):
        v = str(v).strip()
        if v not in options:
            raise ConfigError(f"expected one of {options}, got {v!r}")
        return v

    return conv


def _shape(v) -> str:
    parts = str(v).lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise ConfigError(f"bad shape {v!r}; use e.g. 32x32") from None
    if len(dims) not in (2, 3) or min(dims) < 1:
        raise ConfigError(f"bad shape {v!r}")
    return "x".join(map(str, dims))


def _int_list(v) -> str:
    try:
        [int(p) for p in str(v).split(",") if p.strip()]
    except ValueError:
        raise ConfigError(f"bad integer list {v!r}") from None
    return str(v).replace(" ", "")


def _sites(v) -> str:
    s = str(v).replace(" ", "")
    if s in ("", "none"):
        return "none"
    items = s.split(",")
    if not set(items) <= {"1", "2", "3", "4"}:
        raise ConfigError(f"sites must be a subset of 1,2,3,4, got {v!r}")
    return ",".join(sorted(set(items)))


def _prob(lo: float, hi: float, closed_hi: bool, open_lo: bool = False):
    def conv(v):
        x = float(v)
        ok = (lo < x if open_lo else lo <= x) and (x <= hi if closed_hi else x < hi)
        if not ok:
            raise ConfigError(f"value {x} outside {'(' if open_lo else '['}{lo}, {hi}{']' if closed_hi else ')'}")
        return x

    return conv


def _pos_int(v) -> int:
    x = int(v)
    if x < 1:
        raise ConfigError(f"expected a positive integer, got {v!r}")
    return x


def _nonneg_float(v) -> float:
    x = float(v)
    if x < 0 or not math.isfinite(x):
        raise ConfigError(f"expected a non-negative number, got {v!r}")
    return x


# name -> (converter, default)
SCHEMA: dict[str, tuple[Callable[[Any], Any], Any]] = {
    "seed": (int, 0),
    "arch": (_choice("desk", "desk3d", "tiny"), "desk"),
    "classes": (_pos_int, 3),
    "data_dir": (str, ""),
    "val_dir": (str, ""),
    "count": (_pos_int, 60),
    "val_count": (_pos_int, 20),
    "shape": (_shape, "32x32"),
    "xi": (_prob(0.0, 1.0, True, open_lo=True), 0.5),
    "mu": (_prob(0.0, 0.5, False), 0.0),
    "noise_mode": (_choice("iid", "blob"), "iid"),
    "blob_rmin": (_pos_int, 2),
    "blob_rmax": (_pos_int, 4),
    "sites": (_sites, "1,2,3,4"),
    "la_smooth": (_bool, True),
    "la_kernel": (_pos_int, 3),
    "la_sigma": (_nonneg_float, math.sqrt(0.5)),
    "la_warmup": (_prob(0.0, 1.0, True), 0.2),
    "transforms": (str, "all12"),
    "teachers": (_pos_int, 3),
    "teacher_iters": (_int_list, "500,750,1000"),
    "teacher_kind": (_choice("dan", "single"), "dan"),
    "average_probs": (_bool, False),
    "iters": (_pos_int, 1000),
    "lr": (_nonneg_float, 0.05),
    "momentum": (_prob(0.0, 1.0, False), 0.9),
    "batch": (_pos_int, 4),
    "decay_every": (_prob(0.0, 1.0, True), 0.25),
    "eval_every": (int, 0),
    "ablation_chain": (str, "none;4;3,4;2,3,4;1,2,3,4"),
    "ablation_seeds": (_int_list, "0"),
    "out_dir": (str, "runs/run"),
}


@dataclass
class RunConfig:
    values: dict

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def __getitem__(self, key):
        return self.values[key]

    def replace(self, **overrides) -> "RunConfig":
        merged = dict(self.values)
        merged.update(_convert(overrides))
        return RunConfig(merged)

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in SCHEMA)

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    # derived views
    @property
    def site_set(self) -> frozenset[str]:
        s = self.values["sites"]
        return frozenset() if s == "none" else frozenset(s.split(","))

    @property
    def shape_tuple(self) -> tuple[int, ...]:
        return tuple(int(p) for p in self.values["shape"].split("x"))

    @property
    def teacher_iter_list(self) -> list[int]:
        return [int(p) for p in self.values["teacher_iters"].split(",") if p]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(raw: Mapping[str, Any]) -> dict:
    out = {}
    for k, v in raw.items():
        if k not in SCHEMA:
            raise ConfigError(f"unknown config key {k!r}")
        conv = SCHEMA[k][0]
        try:
            out[k] = conv(v)
        except ConfigError as e:
            raise ConfigError(f"{k}: {e}") from None
        except (TypeError, ValueError):
            raise ConfigError(f"{k}: cannot parse {v!r}") from None
    return out


def parse_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ConfigError(f"line {n}: empty key")
        out[k] = v
    return out


def resolve(path=None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults, then the file, then explicit overrides."""
    values = {k: d for k, (_, d) in SCHEMA.items()}
    if path is not None:
        values.update(_convert(parse_text(Path(path).read_text())))
    if overrides:
        values.update(_convert({k: v for k, v in overrides.items() if v is not None}))
    if values["blob_rmax"] < values["blob_rmin"]:
        raise ConfigError("blob_rmax must be >= blob_rmin")
    return RunConfig(values)
