"""Loss, spatial and channel attention, and the noise-diffusion model.

Loss attention (LA) has no parameters: it marks voxels where the two
streams' hard predictions disagree, optionally blurred with a Gaussian.
Spatial (SA) and channel (CA) attention are small trainable gates computed
from the element-wise sum of both streams' features at a site.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, _make, matmul, relu, reshape, sigmoid
from .layers import Conv, ConvSpec, Module, he_normal, receptive_field

GATE_BIAS = 2.0
CA_GRID = 2
CA_REDUCTION = 4
# paper setting: kernel 3, variance 0.5
LA_KERNEL_SIZE = 3
LA_SIGMA = math.sqrt(0.5)


# ---------------------------------------------------------------------------
# loss attention
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianKernel:
    size: int
    sigma: float
    weights: np.ndarray

    def __post_init__(self):
        if abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise ValueError("kernel weights must sum to 1")


def gaussian_kernel(size: int, sigma: float, ndim: int = 1) -> GaussianKernel:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    c = size // 2
    axes = np.meshgrid(*([np.arange(size) - c] * ndim), indexing="ij")
    r2 = sum(a.astype(np.float64) ** 2 for a in axes)
    w = np.exp(-r2 / (2.0 * sigma ** 2))
    return GaussianKernel(size, float(sigma), w / w.sum())


def hard_predictions(logits) -> np.ndarray:
    """Channel argmax, first index on ties."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data.argmax(axis=1)


def smooth_replicate(mask: np.ndarray, kernel: GaussianKernel) -> np.ndarray:
    """Correlate ``[B, 1, *spatial]`` with the kernel, edge-replicated borders."""
    nd = mask.ndim - 2
    w = kernel.weights
    if w.ndim != nd:
        w = gaussian_kernel(kernel.size, kernel.sigma, nd).weights
    r = kernel.size // 2
    padded = np.pad(mask, [(0, 0), (0, 0)] + [(r, r)] * nd, mode="edge")
    win = sliding_window_view(padded, w.shape, axis=tuple(range(2, 2 + nd)))
    return np.tensordot(win, w, axes=(tuple(range(2 + nd, 2 + 2 * nd)), tuple(range(nd))))


def loss_attention(p_logits, q_logits, kernel: GaussianKernel | None = None, dtype=None) -> np.ndarray:
    """Voxel loss weights ``[B, 1, *spatial]`` from cross-stream disagreement."""
    a = hard_predictions(p_logits)
    b = hard_predictions(q_logits)
    if a.shape != b.shape:
        raise ValueError(f"prediction shapes differ: {a.shape} vs {b.shape}")
    if dtype is None:
        dtype = p_logits.dtype if isinstance(p_logits, Tensor) else np.float64
    mask = (a != b)[:, None].astype(np.float64)
    if kernel is not None:
        mask = smooth_replicate(mask, kernel)
    return mask.astype(dtype)


# ---------------------------------------------------------------------------
# spatial attention
# ---------------------------------------------------------------------------


class SpatialAttention(Module):
    """Per-voxel gate: sigmoid(conv3(relu(conv3(fused))))."""

    def __init__(self, channels: int, rng: np.random.Generator, ndim: int = 2, dtype=np.float32,
                 bias: float = GATE_BIAS):
        if channels < 2:
            raise ValueError("spatial attention needs at least 2 channels")
        mid = max(1, channels // 2)
        self.conv1 = Conv(ConvSpec.make(channels, mid, 3, ndim=ndim), rng, dtype)
        self.conv2 = Conv(ConvSpec.make(mid, 1, 3, ndim=ndim), rng, dtype)
        self.conv2.weight.data[...] = 0
        self.conv2.bias.data[...] = bias

    def __call__(self, fused: Tensor) -> Tensor:
        return sigmoid(self.conv2(relu(self.conv1(fused))))

    def parameters(self):
        for n, p in self.conv1.parameters():
            yield f"conv1.{n}", p
        for n, p in self.conv2.parameters():
            yield f"conv2.{n}", p


def spatial_attention(fused: Tensor, block: SpatialAttention) -> Tensor:
    return block(fused)


# ---------------------------------------------------------------------------
# channel attention
# ---------------------------------------------------------------------------


def _cells(n: int, g: int) -> list[slice]:
    size = -(-n // g)
    return [slice(s, min(s + size, n)) for s in range(0, n, size)]


def grid_max_descriptor(x: Tensor, grid: int = CA_GRID) -> Tensor:
    """Max over each cell of a grid, then mean over cells: ``[B, C]``.

    Cells are ``ceil(n / grid)`` wide; a short last cell is kept.
    """
    nd = x.ndim - 2
    B, C = x.shape[:2]
    if min(x.shape[2:]) < grid:
        raise ValueError(f"spatial dims {x.shape[2:]} smaller than grid {grid}")
    cells = list(itertools.product(*(_cells(n, grid) for n in x.shape[2:])))
    out = np.zeros((B, C), dtype=x.dtype)
    picks = []
    for cell in cells:
        block = x.data[(slice(None), slice(None)) + cell].reshape(B, C, -1)
        arg = block.argmax(axis=-1)
        out += np.take_along_axis(block, arg[..., None], axis=-1)[..., 0]
        picks.append(arg)
    out /= len(cells)

    def bw(g):
        gx = np.zeros_like(x.data)
        share = g / len(cells)
        bi, ci = np.meshgrid(np.arange(B), np.arange(C), indexing="ij")
        for cell, arg in zip(cells, picks):
            shape = tuple(s.stop - s.start for s in cell)
            local = np.unravel_index(arg, shape)
            idx = (bi, ci) + tuple(l + s.start for l, s in zip(local, cell))
            gx[idx] += share
        return (gx,)

    return _make(out, (x,), bw, "grid_max")


class ChannelAttention(Module):
    """Per-channel gate from a grid-max descriptor through a bottleneck MLP."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32,
                 reduction: int = CA_REDUCTION, grid: int = CA_GRID, bias: float = GATE_BIAS):
        hidden = max(1, channels // reduction)
        self.grid = grid
        self.w1 = Tensor(he_normal(rng, (channels, hidden), channels, dtype), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.w2 = Tensor(np.zeros((hidden, channels), dtype=dtype), requires_grad=True)
        self.b2 = Tensor(np.full(channels, bias, dtype=dtype), requires_grad=True)

    def __call__(self, fused: Tensor) -> Tensor:
        nd = fused.ndim - 2
        d = grid_max_descriptor(fused, self.grid)
        h = relu(matmul(d, self.w1) + reshape(self.b1, (1, -1)))
        z = matmul(h, self.w2) + reshape(self.b2, (1, -1))
        return reshape(sigmoid(z), z.shape + (1,) * nd)

    def parameters(self):
        yield "w1", self.w1
        yield "b1", self.b1
        yield "w2", self.w2
        yield "b2", self.b2


def channel_attention(fused: Tensor, block: ChannelAttention) -> Tensor:
    return block(fused)


# ---------------------------------------------------------------------------
# noise diffusion and placement
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseDiffusionParams:
    mu: float = 0.1
    tau: float = 0.1

    def __post_init__(self):
        if not 0 <= self.mu < 0.5:
            raise ValueError("mu must lie in [0, 0.5)")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


def noise_probability(params: NoiseDiffusionParams, rho: int) -> float:
    """Chance that a unit with receptive field ``rho`` aggregates a flipped label:
    ``1 - (1 - mu) ** (tau * rho * rho)``."""
    if rho < 1:
        raise ValueError("rho must be >= 1")
    return -math.expm1(params.tau * rho * rho * math.log1p(-params.mu))


@dataclass(frozen=True)
class PlacementRow:
    site: str
    position: int
    rho: int
    prob: float
    family: str


def placement_report(arch, params: NoiseDiffusionParams, threshold: float = 0.5) -> list[PlacementRow]:
    rows = []
    for site, pos in arch.sites.items():
        rho = receptive_field(arch, pos)
        prob = noise_probability(params, rho)
        if pos == len(arch.layers):
            family = "LA"
        else:
            family = "SA" if prob < threshold else "CA"
        rows.append(PlacementRow(site, pos, rho, prob, family))
    return rows


def format_placement(rows: list[PlacementRow]) -> str:
    lines = [f"{'site':<6}{'pos':>5}{'rho':>6}{'prob':>10}  family"]
    for r in rows:
        lines.append(f"{r.site:<6}{r.position:>5}{r.rho:>6}{r.prob:>10.4f}  {r.family}")
    return "\n".join(lines)
