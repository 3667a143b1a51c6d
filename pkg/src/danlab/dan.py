"""Two-stream deep attention network: wiring, loss, training, checkpoints."""

from __future__ import annotations

import copy
import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .attention import (
    LA_KERNEL_SIZE,
    LA_SIGMA,
    ChannelAttention,
    GaussianKernel,
    SpatialAttention,
    gaussian_kernel,
    loss_attention,
)
from .autodiff import (
    MULTIPLY_FORWARD,
    GateHandle,
    Tape,
    Tensor,
    apply_gate,
    backward,
    no_grad,
    relu,
    softmax_array,
)
from .layers import (
    ArchitectureSpec,
    BatchNorm,
    Conv,
    ConvSpec,
    DenseBlock,
    DenseBlockSpec,
    LayerSpec,
    Module,
    avgpool,
    maxpool,
    upsample_nearest,
    weighted_softmax_ce,
)

log = logging.getLogger(__name__)

SITES = ("1", "2", "3", "4")
SITE_FAMILY = {"1": "CA", "2": "CA", "3": "SA", "4": "LA"}


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# architecture presets
# ---------------------------------------------------------------------------


def preset(name: str, classes: int = 3, in_channels: int = 1) -> ArchitectureSpec:
    """Named desk-scale stream layouts.

    ``desk`` and ``desk3d`` pool once, run a dense block at half resolution
    and upsample back; ``tiny`` is the same shape with minimal widths, for
    gradient checks.
    """
    if name in ("desk", "desk2d", "desk3d"):
        text = (f"conv:8:3 bn relu maxpool:2 dense:3:4 conv:12:1 upsample:2 conv:8:3 bn relu "
                f"conv:8:3 relu conv:{classes}:1 | 1@3,2@6,3@10,4@13")
        ndim = 3 if name == "desk3d" else 2
    elif name == "tiny":
        text = f"conv:4:3 bn relu maxpool:2 dense:1:2 conv:4:1 upsample:2 conv:4:3 relu conv:{classes}:1 | 1@3,2@6,3@9,4@10"
        ndim = 2
    else:
        raise ValueError(f"unknown architecture preset {name!r}")
    return ArchitectureSpec.from_text(text, in_channels=in_channels, ndim=ndim)


# ---------------------------------------------------------------------------
# a single stream
# ---------------------------------------------------------------------------


class Stream(Module):
    def __init__(self, arch: ArchitectureSpec, rng: np.random.Generator, dtype=np.float32):
        self.arch = arch
        self.layers: list = []
        chans = arch.channels()
        for i, spec in enumerate(arch.layers):
            c = chans[i]
            if spec.kind == "conv":
                conv_spec = ConvSpec.make(c, spec.out_channels, spec.kernel, spec.stride, ndim=arch.ndim)
                self.layers.append(Conv(conv_spec, rng, dtype))
            elif spec.kind == "bn":
                self.layers.append(BatchNorm(c, dtype))
            elif spec.kind == "dense":
                self.layers.append(DenseBlock(c, DenseBlockSpec(spec.units, spec.growth), rng, arch.ndim, dtype))
            else:
                self.layers.append(None)

    def layer(self, i: int, x: Tensor) -> Tensor:
        spec = self.arch.layers[i]
        mod = self.layers[i]
        if mod is not None:
            mod.training = self.training
            return mod(x)
        if spec.kind == "relu":
            return relu(x)
        if spec.kind == "maxpool":
            return maxpool(x, spec.kernel, spec.stride)
        if spec.kind == "avgpool":
            return avgpool(x, spec.kernel, spec.stride)
        if spec.kind == "upsample":
            return upsample_nearest(x, spec.factor)
        raise ValueError(spec.kind)

    def __call__(self, x: Tensor) -> Tensor:
        for i in range(len(self.layers)):
            x = self.layer(i, x)
        return x

    def parameters(self):
        for i, mod in enumerate(self.layers):
            if mod is not None:
                for n, p in mod.parameters():
                    yield f"layer{i}.{n}", p

    def buffers(self):
        for i, mod in enumerate(self.layers):
            if mod is not None:
                for n, b in mod.buffers():
                    yield f"layer{i}.{n}", b


# ---------------------------------------------------------------------------
# the two-stream network
# ---------------------------------------------------------------------------


class TwoStreamDAN(Module):
    """Two identically shaped streams joined at four attention sites.

    Sites 1 and 2 are channel gates, site 3 a spatial gate (all computed from
    the summed features of both streams and applied to both), and site 4 the
    parameter-free loss attention.  Streams are seeded ``seed`` and
    ``seed + 1`` unless ``same_init`` is set.
    """

    batched = True

    def __init__(self, arch: ArchitectureSpec, classes: int, seed: int = 0, dtype=np.float32,
                 enabled: Iterable[str] = SITES, la_kernel: GaussianKernel | None | str = "default",
                 same_init: bool = False):
        self.arch = arch
        self.classes = classes
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self.enabled = frozenset(str(s) for s in enabled)
        unknown = self.enabled - set(SITES)
        if unknown:
            raise ValueError(f"unknown attention sites {sorted(unknown)}")
        if la_kernel == "default":
            la_kernel = gaussian_kernel(LA_KERNEL_SIZE, LA_SIGMA, arch.ndim)
        self.la_kernel = la_kernel
        self.force_open = False
        # while set, loss attention passes every voxel (weight 1)
        self.la_open = False
        if arch.channels()[-1] != classes:
            raise ValueError("final layer width must equal the class count")
        self.stream_a = Stream(arch, np.random.default_rng(seed), dtype)
        self.stream_b = Stream(arch, np.random.default_rng(seed if same_init else seed + 1), dtype)
        rng = np.random.default_rng(seed + 2)
        chans = arch.channels()
        self.gates: dict[str, Module] = {}
        for site in ("1", "2", "3"):
            pos = arch.sites[site]
            if SITE_FAMILY[site] == "CA":
                self.gates[site] = ChannelAttention(chans[pos], rng, dtype)
            else:
                self.gates[site] = SpatialAttention(chans[pos], rng, arch.ndim, dtype)
        self.last_gate_means: dict[str, float] = {s: 1.0 for s in SITES}

    # -- plumbing -----------------------------------------------------------

    def train(self, flag: bool = True):
        self.training = flag
        self.stream_a.train(flag)
        self.stream_b.train(flag)
        return self

    def parameters(self):
        for n, p in self.stream_a.parameters():
            yield f"a.{n}", p
        for n, p in self.stream_b.parameters():
            yield f"b.{n}", p
        for site, g in self.gates.items():
            for n, p in g.parameters():
                yield f"att{site}.{n}", p

    def buffers(self):
        for n, b in self.stream_a.buffers():
            yield f"a.{n}", b
        for n, b in self.stream_b.buffers():
            yield f"b.{n}", b

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {n: p.data for n, p in self.parameters()}
        out.update(dict(self.buffers()))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {n: p.data for n, p in self.parameters()}
        own.update(dict(self.buffers()))
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}")
        for n, arr in own.items():
            if arr.shape != state[n].shape:
                raise ValueError(f"shape mismatch for {n}: {arr.shape} vs {state[n].shape}")
            arr[...] = state[n]

    def swapped(self) -> "TwoStreamDAN":
        other = copy.deepcopy(self)
        other.stream_a, other.stream_b = other.stream_b, other.stream_a
        return other

    # -- forward ------------------------------------------------------------

    def _gate(self, site: str, fa: Tensor, fb: Tensor) -> tuple[Tensor, Tensor]:
        if site not in self.enabled:
            self.last_gate_means[site] = 1.0
            return fa, fb
        if self.force_open:
            ones = Tensor(np.ones((1,) * fa.ndim, dtype=fa.dtype))
            handle = GateHandle(site, ones, MULTIPLY_FORWARD)
            self.last_gate_means[site] = 1.0
            return apply_gate(fa, handle), apply_gate(fb, handle)
        g = self.gates[site](fa + fb)
        handle = GateHandle(site, g, MULTIPLY_FORWARD)
        self.last_gate_means[site] = float(g.data.mean())
        return apply_gate(fa, handle), apply_gate(fb, handle)

    def forward(self, x) -> tuple[Tensor, Tensor, np.ndarray]:
        """Logits of both streams and the fused class probabilities."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != self.arch.ndim + 2 or x.shape[1] != self.arch.in_channels:
            raise ValueError(f"input shape {x.shape} does not match the architecture")
        at = {pos: site for site, pos in self.arch.sites.items() if site != "4"}
        fa = fb = x
        for i in range(len(self.arch.layers)):
            if i in at:
                fa, fb = self._gate(at[i], fa, fb)
            fa = self.stream_a.layer(i, fa)
            fb = self.stream_b.layer(i, fb)
        fused = softmax_array(fa.data + fb.data, axis=1)
        return fa, fb, fused

    __call__ = forward

    def loss_weights(self, p: Tensor, q: Tensor) -> np.ndarray | None:
        if "4" not in self.enabled or self.la_open:
            self.last_gate_means["4"] = 1.0
            return None
        w = loss_attention(p, q, self.la_kernel, dtype=p.dtype)
        self.last_gate_means["4"] = float(w.mean())
        return w

    def compute_loss(self, p: Tensor, q: Tensor, labels) -> Tensor:
        w = self.loss_weights(p, q)
        return weighted_softmax_ce(p, labels, w) + weighted_softmax_ce(q, labels, w)

    # -- inference ----------------------------------------------------------

    def predict_proba(self, x: np.ndarray, batch: int = 16) -> np.ndarray:
        """Fused probabilities for ``[Cin, *S]`` or ``[B, Cin, *S]`` input."""
        x = np.asarray(x, dtype=self.dtype)
        single = x.ndim == self.arch.ndim + 1
        if single:
            x = x[None]
        was = self.training
        self.train(False)
        try:
            with no_grad():
                parts = [self.forward(x[i:i + batch])[2] for i in range(0, len(x), batch)]
        finally:
            self.train(was)
        out = np.concatenate(parts, axis=0)
        return out[0] if single else out

    def predict(self, x: np.ndarray) -> np.ndarray:
        return predict(self, x)


def predict(dan: TwoStreamDAN, x: np.ndarray) -> np.ndarray:
    """Hard labels: argmax of the fused probabilities, lowest class on ties."""
    return dan.predict_proba(x).argmax(axis=-dan.arch.ndim - 1).astype(np.uint8)


def ablate(dan: TwoStreamDAN, enabled_sites: Iterable) -> TwoStreamDAN:
    """Copy of ``dan`` with only ``enabled_sites`` active; the rest act as identity."""
    sites = frozenset(str(s) for s in enabled_sites)
    if not sites <= set(SITES):
        raise ValueError(f"unknown sites {sorted(sites - set(SITES))}")
    other = copy.deepcopy(dan)
    other.enabled = sites
    return other


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 0.05
    momentum: float = 0.9
    max_iters: int = 2000
    batch: int = 4
    decay: float = 0.5
    decay_every: float = 0.25  # fraction of max_iters
    seed: int = 0
    # schedule length when a run stops before the end of its schedule
    horizon: int | None = None
    buffers: dict = field(default_factory=dict)

    @property
    def schedule_iters(self) -> int:
        return self.horizon or self.max_iters

    def lr_at(self, it: int) -> float:
        step = max(1, int(round(self.schedule_iters * self.decay_every)))
        return self.lr * self.decay ** (it // step)

    def step(self, params: Sequence[tuple[str, Tensor]], it: int) -> None:
        lr = self.lr_at(it)
        for name, p in params:
            if p.grad is None:
                continue
            buf = self.buffers.get(name)
            if buf is None:
                buf = self.buffers[name] = np.zeros_like(p.data)
            buf *= self.momentum
            buf += p.grad
            p.data -= (lr * buf).astype(p.dtype)


@dataclass
class TrainConfig:
    eval_every: int = 0  # 0: once per epoch
    log_path: Path | None = None
    # fraction of iterations trained on the plain loss before loss attention engages
    la_warmup: float = 0.0


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [r["loss"] for r in self.rows]

    def val_dice(self) -> list[float]:
        return [r["val_dice"] for r in self.rows if r["val_dice"] != ""]

    def write_csv(self, path: Path) -> None:
        cols = ["iter", "loss"] + [f"mean_gate_site{s}" for s in SITES] + ["val_dice"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def mean_foreground_dice(pred: np.ndarray, truth: np.ndarray, classes: int) -> float:
    from .metrics import dice

    vals = [dice(p, t, c) for p, t in zip(pred, truth) for c in range(1, classes)]
    return float(np.mean(vals))


def train(dan: TwoStreamDAN, images: np.ndarray, labels: np.ndarray, opt: OptimizerState,
          config: TrainConfig | None = None, val: tuple[np.ndarray, np.ndarray] | None = None) -> TrainLog:
    """Minibatch SGD with momentum over ``images [N, Cin, *S]``, ``labels [N, *S]``.

    Sampling order, initialisation and hence the whole run are fixed by
    ``opt.seed`` and the model seed.
    """
    config = config or TrainConfig()
    images = np.asarray(images, dtype=dan.dtype)
    labels = np.asarray(labels)
    n = len(images)
    if n == 0:
        raise ValueError("empty training set")
    if not np.isfinite(images).all():
        raise ValueError("training images contain non-finite values")
    rng = np.random.default_rng(opt.seed)
    params = list(dan.parameters())
    steps_per_epoch = max(1, math.ceil(n / opt.batch))
    eval_every = config.eval_every or steps_per_epoch
    log_ = TrainLog()
    order: list[int] = []
    warmup = int(round(config.la_warmup * opt.schedule_iters))
    dan.train(True)
    for it in range(opt.max_iters):
        dan.la_open = it < warmup
        if len(order) < opt.batch:
            order.extend(rng.permutation(n).tolist())
        idx = order[: opt.batch]
        del order[: opt.batch]
        for _, p in params:
            p.grad = None
        with Tape() as tape:
            p, q, _ = dan.forward(images[idx])
            loss = dan.compute_loss(p, q, labels[idx])
        lv = float(loss.data)
        if not math.isfinite(lv):
            raise TrainingError(f"non-finite loss {lv} at iteration {it}")
        if tape.nodes:
            backward(tape, loss)
        opt.step(params, it)
        row = {"iter": it, "loss": lv}
        row.update({f"mean_gate_site{s}": dan.last_gate_means[s] for s in SITES})
        row["val_dice"] = ""
        if val is not None and ((it + 1) % eval_every == 0 or it + 1 == opt.max_iters):
            row["val_dice"] = mean_foreground_dice(predict(dan, val[0]), val[1], dan.classes)
            dan.train(True)
        log_.rows.append(row)
    dan.la_open = False
    dan.train(False)
    if config.log_path is not None:
        log_.write_csv(Path(config.log_path))
    return log_


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"DANCKPT1"


def save_checkpoint(path, state: dict[str, np.ndarray]) -> None:
    parts = [CKPT_MAGIC]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    pos = 8
    out = {}

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise ValueError(f"{path}: truncated checkpoint at byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    while pos < len(raw):
        (ln,) = struct.unpack("<I", take(4))
        name = take(ln).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).copy()
    return out


def save_model(dan: TwoStreamDAN, path) -> None:
    save_checkpoint(path, dan.state_dict())


def load_model(path, arch: ArchitectureSpec, classes: int, **kwargs) -> TwoStreamDAN:
    dan = TwoStreamDAN(arch, classes, **kwargs)
    dan.load_state_dict(load_checkpoint(path))
    dan.train(False)
    return dan
