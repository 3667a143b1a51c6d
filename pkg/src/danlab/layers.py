"""Network building blocks for 2-d and 3-d segmentation streams.

All spatial ops take ``[B, C, *spatial]`` tensors.  Parametrised blocks are
small classes holding their weights as :class:`Tensor` objects; the
functional kernels below do the actual work and record their adjoints.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import ShapeError, Tensor, _make, concat, relu

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _tup(v, n: int) -> tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * n
    v = tuple(int(x) for x in v)
    if len(v) != n:
        raise ShapeError(f"expected {n} values, got {v}")
    return v


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, ...]
    stride: tuple[int, ...]
    padding: tuple[int, ...]

    def __post_init__(self):
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError(f"invalid conv spec {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    @classmethod
    def make(cls, in_channels, out_channels, kernel=3, stride=1, padding=None, ndim=2):
        k = _tup(kernel, ndim)
        p = tuple(kk // 2 for kk in k) if padding is None else _tup(padding, ndim)
        return cls(in_channels, out_channels, k, _tup(stride, ndim), p)

    def output_shape(self, spatial: Sequence[int]) -> tuple[int, ...]:
        out = tuple((n + 2 * p - k) // s + 1 for n, p, k, s in zip(spatial, self.padding, self.kernel, self.stride))
        if min(out) < 1:
            raise ShapeError(f"conv output would be empty for input {tuple(spatial)}")
        return out


def conv_forward(x: Tensor, spec: ConvSpec, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """N-d cross-correlation; weights are ``[C_out, C_in, *kernel]``."""
    nd = len(spec.kernel)
    if x.ndim != nd + 2 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv input {x.shape} does not match {spec}")
    if weights.shape != (spec.out_channels, spec.in_channels, *spec.kernel):
        raise ShapeError(f"conv weights {weights.shape} do not match {spec}")
    spatial = x.shape[2:]
    out_sp = spec.output_shape(spatial)
    xd = x.data
    if any(spec.padding):
        xd = np.pad(xd, [(0, 0), (0, 0)] + [(p, p) for p in spec.padding])
    sp_axes = tuple(range(2, 2 + nd))
    B, C = x.shape[:2]
    K = int(np.prod(spec.kernel))
    wmat = weights.data.reshape(spec.out_channels, C * K)
    if K == 1 and not any(spec.padding) and all(s == 1 for s in spec.stride):
        cols = np.moveaxis(xd, 1, -1).reshape(-1, C)  # 1x1 conv: no window copy
    else:
        win = sliding_window_view(xd, spec.kernel, axis=sp_axes)
        sl = (slice(None), slice(None)) + tuple(slice(None, o * s, s) for o, s in zip(out_sp, spec.stride))
        win = win[sl]  # [B, C, *O, *K]
        perm = (0,) + tuple(range(2, 2 + nd)) + (1,) + tuple(range(2 + nd, 2 + 2 * nd))
        cols = win.transpose(perm).reshape(-1, C * K)  # [B*O, C*K]
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(np.moveaxis(out.reshape((B,) + out_sp + (spec.out_channels,)), -1, 1))
    padded_shape = xd.shape

    def bw(g):
        gx = gw = gb = None
        gmat = np.moveaxis(g, 1, -1).reshape(-1, spec.out_channels)
        if weights.requires_grad:
            gw = (gmat.T @ cols).reshape(weights.shape)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=0)
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape((B,) + out_sp + (C,) + tuple(spec.kernel))
            if K == 1 and not any(spec.padding) and all(s == 1 for s in spec.stride):
                return np.moveaxis(gcols.reshape((B,) + out_sp + (C,)), -1, 1), gw, gb
            gxp = np.zeros(padded_shape, dtype=g.dtype)
            for koff in itertools.product(*(range(k) for k in spec.kernel)):
                dst = (slice(None), slice(None)) + tuple(
                    slice(k, k + o * s, s) for k, o, s in zip(koff, out_sp, spec.stride))
                src = gcols[(slice(None),) * (1 + nd) + (slice(None),) + koff]  # [B, *O, Cin]
                gxp[dst] += np.moveaxis(src, -1, 1)
            crop = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(spec.padding, spatial))
            gx = gxp[crop]
        return gx, gw, gb

    inputs = (x, weights) if bias is None else (x, weights, bias)
    return _make(out, inputs, lambda g: bw(g)[: len(inputs)], "conv")


def reference_conv(x: np.ndarray, spec: ConvSpec, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Nested-loop convolution, used as an oracle."""
    nd = len(spec.kernel)
    xp = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in spec.padding])
    out_sp = spec.output_shape(x.shape[2:])
    out = np.zeros((x.shape[0], spec.out_channels) + out_sp, dtype=np.float64)
    for bi in range(x.shape[0]):
        for co in range(spec.out_channels):
            for pos in itertools.product(*(range(o) for o in out_sp)):
                acc = 0.0 if b is None else float(b[co])
                for ci in range(spec.in_channels):
                    for k in itertools.product(*(range(kk) for kk in spec.kernel)):
                        idx = tuple(p * s + kk for p, s, kk in zip(pos, spec.stride, k))
                        acc += xp[(bi, ci) + idx] * w[(co, ci) + k]
                out[(bi, co) + pos] = acc
    return out


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, mode: str = "train",
              running_mean: np.ndarray | None = None, running_var: np.ndarray | None = None,
              momentum: float = BN_MOMENTUM, epsilon: float = BN_EPS) -> Tensor:
    """Per-channel normalisation.

    In train mode the running buffers (if given) are updated in place as
    ``r = momentum * r + (1 - momentum) * batch_stat``.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    xd = x.data
    if mode == "train":
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        if running_mean is not None:
            n = xd.size // xd.shape[1]
            unbiased = var.reshape(-1) * (n / max(n - 1, 1))
            running_mean *= momentum
            running_mean += (1 - momentum) * mu.reshape(-1)
            running_var *= momentum
            running_var += (1 - momentum) * unbiased
    elif mode == "eval":
        mu = running_mean.reshape(bshape).astype(xd.dtype)
        var = running_var.reshape(bshape).astype(xd.dtype)
        xc = xd - mu
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = xc * inv
    g = gamma.data.reshape(bshape)
    out = xhat * g + beta.data.reshape(bshape)
    m = xd.size // xd.shape[1]

    def bw(up):
        gg = (up * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbt = up.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = up * g
            if mode == "train":
                gx = inv / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
            else:
                gx = dxhat * inv
        return gx, gg, gbt

    return _make(out, (x, gamma, beta), bw, "batchnorm")


# ---------------------------------------------------------------------------
# pooling and upsampling
# ---------------------------------------------------------------------------


def _pool_windows(xd: np.ndarray, window, stride):
    nd = xd.ndim - 2
    out_sp = tuple((n - w) // s + 1 for n, w, s in zip(xd.shape[2:], window, stride))
    if min(out_sp) < 1:
        raise ShapeError(f"pool window {window} larger than input {xd.shape[2:]}")
    win = sliding_window_view(xd, window, axis=tuple(range(2, 2 + nd)))
    sl = (slice(None), slice(None)) + tuple(slice(None, o * s, s) for o, s in zip(out_sp, stride))
    return win[sl], out_sp


def maxpool(x: Tensor, window, stride=None) -> Tensor:
    """Max pooling; gradient goes to the first maximal element in scan order.

    Trailing rows/columns that do not fill a whole window are dropped.
    """
    nd = x.ndim - 2
    window = _tup(window, nd)
    stride = window if stride is None else _tup(stride, nd)
    win, out_sp = _pool_windows(x.data, window, stride)
    flat = win.reshape(win.shape[: 2 + nd] + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        offs = np.unravel_index(arg, window)
        grids = np.meshgrid(*(np.arange(o) for o in out_sp), indexing="ij")
        B, C = x.shape[:2]
        bi = np.arange(B).reshape((B, 1) + (1,) * nd)
        ci = np.arange(C).reshape((1, C) + (1,) * nd)
        idx = [np.broadcast_to(bi, arg.shape), np.broadcast_to(ci, arg.shape)]
        for d in range(nd):
            idx.append(grids[d][None, None] * stride[d] + offs[d])
        np.add.at(gx, tuple(idx), g)
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), bw, "maxpool")


def avgpool(x: Tensor, window, stride=None) -> Tensor:
    nd = x.ndim - 2
    window = _tup(window, nd)
    stride = window if stride is None else _tup(stride, nd)
    win, out_sp = _pool_windows(x.data, window, stride)
    k = int(np.prod(window))
    out = win.mean(axis=tuple(range(2 + nd, 2 + 2 * nd)))

    def bw(g):
        gx = np.zeros_like(x.data)
        share = g / k
        for koff in itertools.product(*(range(w) for w in window)):
            dst = (slice(None), slice(None)) + tuple(
                slice(o0, o0 + o * s, s) for o0, o, s in zip(koff, out_sp, stride))
            gx[dst] += share
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), bw, "avgpool")


def upsample_nearest(x: Tensor, factor) -> Tensor:
    nd = x.ndim - 2
    factor = _tup(factor, nd)
    if min(factor) < 1:
        raise ValueError("upsample factor must be >= 1")
    out = x.data
    for d, f in enumerate(factor):
        out = np.repeat(out, f, axis=2 + d)

    def bw(g):
        shape = list(x.shape[:2])
        for n, f in zip(x.shape[2:], factor):
            shape += [n, f]
        r = g.reshape(shape)
        return (r.sum(axis=tuple(3 + 2 * d for d in range(nd))),)

    return _make(out, (x,), bw, "upsample")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def weighted_softmax_ce(logits: Tensor, labels, voxel_weights: Tensor | np.ndarray | None = None) -> Tensor:
    """Per-voxel weighted softmax cross-entropy, averaged over all voxels.

    ``labels`` is an integer array ``[B, *spatial]``; ``voxel_weights`` is
    ``[B, 1, *spatial]`` (or omitted for uniform weight 1).  Voxels with
    weight 0 contribute exactly zero gradient.
    """
    from .autodiff import log_softmax_array

    lab = np.asarray(labels)
    C = logits.shape[1]
    if lab.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"labels {lab.shape} do not match logits {logits.shape}")
    if lab.min() < 0 or lab.max() >= C:
        raise ValueError(f"label outside [0, {C})")
    if voxel_weights is None:
        w = np.ones((lab.shape[0], 1) + lab.shape[1:], dtype=logits.dtype)
        wt = None
    else:
        wt = voxel_weights if isinstance(voxel_weights, Tensor) else Tensor(np.asarray(voxel_weights, dtype=logits.dtype))
        w = wt.data
        if w.shape != (lab.shape[0], 1) + lab.shape[1:]:
            raise ShapeError(f"weights {w.shape} do not match labels {lab.shape}")
    lsm = log_softmax_array(logits.data, axis=1)
    picked = np.take_along_axis(lsm, lab[:, None].astype(np.intp), axis=1)  # [B,1,*S]
    n = lab.size
    out = np.asarray(-(w * picked).sum() / n, dtype=logits.dtype)

    def bw(g):
        gl = gw = None
        if logits.requires_grad:
            sm = np.exp(lsm)
            np.put_along_axis(sm, lab[:, None].astype(np.intp), np.take_along_axis(sm, lab[:, None].astype(np.intp), axis=1) - 1, axis=1)
            gl = (g / n) * w * sm
        if wt is not None and wt.requires_grad:
            gw = -(g / n) * picked
        return (gl, gw) if wt is not None else (gl,)

    inputs = (logits,) if wt is None else (logits, wt)
    return _make(out, inputs, bw, "weighted_ce")


# ---------------------------------------------------------------------------
# parametrised blocks
# ---------------------------------------------------------------------------


class Module:
    training = True

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(())

    def buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def train(self, flag: bool = True):
        self.training = flag
        return self


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Conv(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        self.spec = spec
        fan_in = spec.in_channels * int(np.prod(spec.kernel))
        self.weight = Tensor(he_normal(rng, (spec.out_channels, spec.in_channels, *spec.kernel), fan_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv_forward(x, self.spec, self.weight, self.bias)

    def parameters(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias


class BatchNorm(Module):
    def __init__(self, channels: int, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm(x, self.gamma, self.beta, "train" if self.training else "eval",
                         self.running_mean, self.running_var)

    def parameters(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var


@dataclass(frozen=True)
class DenseBlockSpec:
    units: int
    growth: int

    def __post_init__(self):
        if self.units < 1 or self.growth < 1:
            raise ValueError("dense block needs positive units and growth")

    def out_channels(self, in_channels: int) -> int:
        return in_channels + self.units * self.growth


class DenseBlock(Module):
    """BN -> ReLU -> 3x3 conv units; every unit sees all earlier feature maps."""

    def __init__(self, in_channels: int, spec: DenseBlockSpec, rng, ndim: int = 2, dtype=np.float32):
        self.spec = spec
        self.units = []
        c = in_channels
        for _ in range(spec.units):
            self.units.append((BatchNorm(c, dtype), Conv(ConvSpec.make(c, spec.growth, 3, ndim=ndim), rng, dtype)))
            c += spec.growth

    def __call__(self, x: Tensor) -> Tensor:
        feats = x
        for bn, conv in self.units:
            bn.training = self.training
            new = conv(relu(bn(feats)))
            feats = concat([feats, new], axis=1)
        return feats

    def parameters(self):
        for i, (bn, conv) in enumerate(self.units):
            for n, p in bn.parameters():
                yield f"unit{i}.bn.{n}", p
            for n, p in conv.parameters():
                yield f"unit{i}.conv.{n}", p

    def buffers(self):
        for i, (bn, _) in enumerate(self.units):
            for n, b in bn.buffers():
                yield f"unit{i}.bn.{n}", b


def dense_block(x: Tensor, block: DenseBlock) -> Tensor:
    return block(x)


# ---------------------------------------------------------------------------
# architecture description and receptive fields
# ---------------------------------------------------------------------------

LAYER_KINDS = ("conv", "bn", "relu", "maxpool", "avgpool", "upsample", "dense")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    factor: int = 1
    units: int = 0
    growth: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def to_text(self) -> str:
        if self.kind == "conv":
            return f"conv:{self.out_channels}:{self.kernel}:{self.stride}"
        if self.kind in ("maxpool", "avgpool"):
            return f"{self.kind}:{self.kernel}:{self.stride}"
        if self.kind == "upsample":
            return f"upsample:{self.factor}"
        if self.kind == "dense":
            return f"dense:{self.units}:{self.growth}"
        return self.kind

    @classmethod
    def from_text(cls, text: str) -> "LayerSpec":
        kind, *args = text.strip().split(":")
        a = [int(v) for v in args]
        if kind == "conv":
            return cls("conv", out_channels=a[0], kernel=a[1] if len(a) > 1 else 3, stride=a[2] if len(a) > 2 else 1)
        if kind in ("maxpool", "avgpool"):
            k = a[0] if a else 2
            return cls(kind, kernel=k, stride=a[1] if len(a) > 1 else k)
        if kind == "upsample":
            return cls("upsample", factor=a[0] if a else 2)
        if kind == "dense":
            return cls("dense", units=a[0], growth=a[1])
        return cls(kind)


@dataclass(frozen=True)
class ArchitectureSpec:
    """Chain of layers plus attention sites.

    A site at position ``i`` gates the features *entering* layer ``i`` (the
    output of layer ``i - 1``); position 0 is the network input and
    ``len(layers)`` is the logit map.
    """

    layers: tuple[LayerSpec, ...]
    sites: dict = field(default_factory=dict)  # site id -> position
    in_channels: int = 1
    ndim: int = 2

    def __post_init__(self):
        positions = list(self.sites.values())
        if len(set(self.sites)) != len(self.sites):
            raise ValueError("duplicate site id")
        for p in positions:
            if not 0 <= p <= len(self.layers):
                raise ValueError(f"site position {p} out of range")

    def channels(self) -> list[int]:
        """Channel count entering each position, plus the output."""
        c = [self.in_channels]
        for layer in self.layers:
            cur = c[-1]
            if layer.kind == "conv":
                cur = layer.out_channels
            elif layer.kind == "dense":
                cur = cur + layer.units * layer.growth
            c.append(cur)
        return c

    def to_text(self) -> str:
        sites = ",".join(f"{k}@{v}" for k, v in self.sites.items())
        return " ".join(l.to_text() for l in self.layers) + (f" | {sites}" if sites else "")

    @classmethod
    def from_text(cls, text: str, in_channels: int = 1, ndim: int = 2) -> "ArchitectureSpec":
        body, _, sites = text.partition("|")
        layers = tuple(LayerSpec.from_text(t) for t in body.split())
        site_map = {}
        for item in filter(None, (s.strip() for s in sites.split(","))):
            k, v = item.split("@")
            site_map[k] = int(v)
        return cls(layers, site_map, in_channels, ndim)


def _layer_kernel_stride(layer: LayerSpec) -> tuple[int, int]:
    if layer.kind in ("conv", "maxpool", "avgpool"):
        return layer.kernel, layer.stride
    if layer.kind == "dense":
        return 2 * layer.units + 1, 1
    return 1, 1


def receptive_field(arch: ArchitectureSpec, layer_index: int) -> int:
    """Extent along one axis of the features entering ``layer_index`` that
    exchange gradient with a single unit of the final layer.

    The extent is the worst case over unit alignments.
    """
    if not 0 <= layer_index <= len(arch.layers):
        raise IndexError(f"layer index {layer_index} out of range")
    r = 1
    for layer in reversed(arch.layers[layer_index:]):
        if layer.kind == "upsample":
            r = -(-(r - 1) // layer.factor) + 1
        else:
            k, s = _layer_kernel_stride(layer)
            r = (r - 1) * s + k
    return r
