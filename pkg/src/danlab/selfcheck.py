"""Built-in diagnostics behind ``danlab selfcheck``.

Each check returns ``(ok, detail)``.  The suite ends with a negative control:
the relu derivative rule is sabotaged and the gradient check must notice.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable

import numpy as np

from . import autodiff
from .attention import ChannelAttention, NoiseDiffusionParams, SpatialAttention, noise_probability
from .autodiff import Tensor, grad_check, parameters_grad_check, relu, sum_
from .dan import TwoStreamDAN, preset
from .distillation import default_transforms
from .layers import ConvSpec, batchnorm, conv_forward, maxpool, upsample_nearest, weighted_softmax_ce
from .metrics import avg_boundary_distance, dice, hausdorff

GRAD_TOL = 1e-4


def _probe(rng, shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


class _Projection:
    """Fixed random linear functional, drawn once per output shape."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.weights: dict[tuple, Tensor] = {}

    def __call__(self, y: Tensor) -> Tensor:
        if y.shape not in self.weights:
            self.weights[y.shape] = Tensor(self.rng.normal(size=y.shape))
        return sum_(y * self.weights[y.shape])


def _weighted_sum(y: Tensor, proj: "_Projection") -> Tensor:
    return proj(y)


def layer_gradchecks() -> dict[str, float]:
    rng = np.random.default_rng(0)
    out = {}
    spec = ConvSpec.make(2, 3, 3, ndim=2)
    w, b = _probe(rng, (3, 2, 3, 3)), _probe(rng, (3,))
    r = _Projection(1)
    out["conv2d"] = grad_check(lambda x: _weighted_sum(conv_forward(x, spec, w, b), r), _probe(rng, (2, 2, 5, 5)))
    spec3 = ConvSpec.make(1, 2, 3, stride=2, ndim=3)
    w3 = _probe(rng, (2, 1, 3, 3, 3))
    r = _Projection(2)
    out["conv3d_stride2"] = grad_check(lambda x: _weighted_sum(conv_forward(x, spec3, w3), r),
                                       _probe(rng, (1, 1, 4, 4, 4)))
    gamma, beta = _probe(rng, (3,)), _probe(rng, (3,))
    rm, rv = np.zeros(3), np.ones(3)
    r = _Projection(3)
    out["batchnorm"] = grad_check(lambda x: _weighted_sum(batchnorm(x, gamma, beta, "train", rm.copy(), rv.copy()), r),
                                  _probe(rng, (2, 3, 3, 3)))
    r = _Projection(4)
    out["maxpool"] = grad_check(lambda x: _weighted_sum(maxpool(x, 2), r), _probe(rng, (1, 2, 4, 4)))
    r = _Projection(5)
    out["upsample"] = grad_check(lambda x: _weighted_sum(upsample_nearest(x, 2), r), _probe(rng, (1, 2, 3, 3)))
    r = _Projection(6)
    out["relu"] = grad_check(lambda x: _weighted_sum(relu(x), r), _probe(rng, (4, 5)))
    labels = rng.integers(0, 3, size=(2, 4, 4))
    vw = rng.random((2, 1, 4, 4))
    out["weighted_ce"] = grad_check(lambda x: weighted_softmax_ce(x, labels, vw), _probe(rng, (2, 3, 4, 4)))
    return out


def attention_gradchecks() -> dict[str, float]:
    rng = np.random.default_rng(10)
    out = {}
    sa = SpatialAttention(4, rng, 2, np.float64)
    sa.conv2.weight.data[...] = rng.normal(size=sa.conv2.weight.shape)
    r = _Projection(11)
    out["spatial_attention.input"] = grad_check(lambda x: _weighted_sum(sa(x), r), _probe(rng, (1, 4, 5, 5)))
    x = Tensor(rng.normal(size=(1, 4, 5, 5)))
    out["spatial_attention.params"] = parameters_grad_check(lambda: _weighted_sum(sa(x), _Projection(12)),
                                                            [p for _, p in sa.parameters()])
    ca = ChannelAttention(8, rng, np.float64)
    ca.w2.data[...] = rng.normal(size=ca.w2.shape)
    r = _Projection(13)
    out["channel_attention.input"] = grad_check(lambda x: _weighted_sum(ca(x), r), _probe(rng, (2, 8, 5, 5)))
    x = Tensor(rng.normal(size=(2, 8, 5, 5)))
    out["channel_attention.params"] = parameters_grad_check(lambda: _weighted_sum(ca(x), _Projection(14)),
                                                            [p for _, p in ca.parameters()])
    return out


def dan_gradcheck(max_coords: int = 6) -> float:
    """Miniature two-stream model, 8x8 input, 2 classes, all sites on."""
    arch = preset("tiny", classes=2)
    dan = TwoStreamDAN(arch, 2, seed=3, dtype=np.float64)
    rng = np.random.default_rng(20)
    for g in dan.gates.values():
        for _, p in g.parameters():
            p.data[...] += 0.3 * rng.normal(size=p.shape)
    x = rng.normal(size=(2, 1, 8, 8))
    y = rng.integers(0, 2, size=(2, 8, 8))

    # The loss-attention mask is piecewise constant in the weights, so it is
    # frozen at the base point; otherwise a perturbation that flips one
    # near-tied argmax shows up as a jump, not a derivative.
    p0, q0, _ = dan.forward(x)
    frozen = dan.loss_weights(p0, q0)

    def loss():
        p, q, _ = dan.forward(x)
        return weighted_softmax_ce(p, y, frozen) + weighted_softmax_ce(q, y, frozen)

    base = float(dan.compute_loss(p0, q0, y).data)
    if base != float(loss().data):
        raise AssertionError("frozen loss-attention mask differs from the live one")

    return parameters_grad_check(loss, [p for _, p in dan.parameters()], max_coords=max_coords,
                                 rng=np.random.default_rng(21))


def check_gradients() -> tuple[bool, str]:
    errs = {**layer_gradchecks(), **attention_gradchecks(), "two_stream_model": dan_gradcheck()}
    worst = max(errs, key=errs.get)
    ok = all(e < GRAD_TOL for e in errs.values())
    return ok, f"{len(errs)} checks, worst {worst} rel err {errs[worst]:.2e}"


def check_transforms() -> tuple[bool, str]:
    rng = np.random.default_rng(30)
    n = 0
    for shape, nd in (((1, 6, 6), 2), ((1, 4, 6, 6), 3)):
        x = rng.normal(size=shape)
        for t in default_transforms(nd):
            if not np.array_equal(t.inverse(t.apply(x, nd), nd), x):
                return False, f"{t.name} fails the round trip on {shape}"
            n += 1
    return True, f"{n} round trips bit-exact"


def _brute_boundary(mask: np.ndarray) -> list[tuple[int, ...]]:
    pts = []
    for idx in itertools.product(*(range(s) for s in mask.shape)):
        if not mask[idx]:
            continue
        for ax in range(mask.ndim):
            for step in (-1, 1):
                j = list(idx)
                j[ax] += step
                if not 0 <= j[ax] < mask.shape[ax] or not mask[tuple(j)]:
                    pts.append(idx)
                    break
            else:
                continue
            break
    return pts


def _brute_directed(a, b) -> list[float]:
    return [min(math.dist(p, q) for q in b) for p in a]


def check_metrics(trials: int = 20) -> tuple[bool, str]:
    rng = np.random.default_rng(40)
    for _ in range(trials):
        shape = tuple(rng.integers(2, 10, size=2))
        p = (rng.random(shape) < 0.4).astype(np.uint8)
        t = (rng.random(shape) < 0.4).astype(np.uint8)
        ps, ts = p.sum(), t.sum()
        want_dice = 1.0 if ps + ts == 0 else 2.0 * (p & t).sum() / (ps + ts)
        if dice(p, t, 1) != want_dice:
            return False, "dice mismatch"
        a, b = _brute_boundary(p == 1), _brute_boundary(t == 1)
        if not a or not b:
            continue
        da, db = _brute_directed(a, b), _brute_directed(b, a)
        if hausdorff(p, t, 1) != max(max(da), max(db)):
            return False, "hausdorff mismatch"
        if not math.isclose(avg_boundary_distance(p, t, 1), (np.mean(da) + np.mean(db)) / 2, rel_tol=1e-12):
            return False, "average boundary distance mismatch"
    return True, f"{trials} random masks agree with brute force"


def noise_table() -> list[tuple[int, float]]:
    params = NoiseDiffusionParams(0.1, 0.1)
    return [(rho, noise_probability(params, rho)) for rho in (4, 52, 64)]


def check_noise_probability() -> tuple[bool, str]:
    table = noise_table()
    ok = abs(table[0][1] - 0.1551) <= 1e-4 and all(abs(p - 1.0) <= 1e-12 for _, p in table[1:])
    return ok, "  ".join(f"rho={r}: {p:.4f}" for r, p in table)


def negative_control() -> tuple[bool, str]:
    """Break the relu derivative; the gradient check must report a failure."""
    saved = autodiff.UNARY_GRADS["relu"]
    autodiff.UNARY_GRADS["relu"] = lambda a, out, g: g
    try:
        rng = np.random.default_rng(50)
        err = grad_check(lambda x: _weighted_sum(relu(x), _Projection(51)), _probe(rng, (4, 5)))
    finally:
        autodiff.UNARY_GRADS["relu"] = saved
    return err > GRAD_TOL, f"sabotaged relu rel err {err:.2e}"


CHECKS: list[tuple[str, Callable[[], tuple[bool, str]]]] = [
    ("noise_probability", check_noise_probability),
    ("gradients", check_gradients),
    ("transforms", check_transforms),
    ("metrics", check_metrics),
    ("negative_control", negative_control),
]


def run_all(emit: Callable[[str], None] = print) -> bool:
    all_ok = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as e:  # noqa: BLE001 - a crashing check is a failing check
            ok, detail = False, f"{type(e).__name__}: {e}"
        all_ok &= ok
        emit(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return all_ok
