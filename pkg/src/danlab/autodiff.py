"""Define-by-run reverse-mode autodiff over numpy arrays.

Operations record themselves on the active :class:`Tape` when any input
requires a gradient.  ``backward`` walks the tape in reverse insertion order,
so the recording order doubles as the topological order.

Broadcasting is restricted to singleton dimensions: two operands must have
the same rank and every axis must either match or be 1 on one side.  0-d
scalars broadcast against anything.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    pass


class DomainError(FloatingPointError):
    """Non-finite result or argument outside an op's domain."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        tape = current_tape()
        if tape is None:
            raise RuntimeError("no active tape; call backward(tape, loss) explicitly")
        tape.backward(self)


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str = ""


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


_TAPES: list[Tape] = []


def current_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording on every active tape."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(out: np.ndarray, inputs: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape.record(Node(tuple(inputs), result, backward_fn, op))
    return result


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise DomainError(f"{op}: non-finite value in forward result")
    return arr


def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(a) != len(b):
        raise ShapeError(f"rank mismatch {a} vs {b}; only singleton broadcast is allowed")
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ShapeError(f"cannot broadcast {a} with {b}")
    return tuple(out)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum(), dtype=grad.dtype)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

# Local derivative rules, keyed by op name.  Each maps (input, output, upstream)
# to the input gradient.  Kept in a table so diagnostics can swap one out.
UNARY_GRADS: dict[str, Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]] = {
    "relu": lambda a, out, g: g * (a > 0),
    "sigmoid": lambda a, out, g: g * out * (1 - out),
    "exp": lambda a, out, g: g * out,
    "log": lambda a, out, g: g / a,
}


def _unary(name: str, a: Tensor, fwd: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    a = as_tensor(a)
    out = fwd(a.data)

    def bw(g):
        return (UNARY_GRADS[name](a.data, out, g),)

    return _make(out, (a,), bw, name)


def relu(a: Tensor) -> Tensor:
    return _unary("relu", a, lambda x: np.maximum(x, 0))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    return _unary("sigmoid", a, _sigmoid)


def exp(a: Tensor) -> Tensor:
    def fwd(x):
        with np.errstate(over="ignore"):
            return _check_finite(np.exp(x), "exp")

    return _unary("exp", a, fwd)


def log(a: Tensor) -> Tensor:
    def fwd(x):
        if (x <= 0).any():
            raise DomainError("log: argument must be positive")
        return np.log(x)

    return _unary("log", a, fwd)


def _binary(name, a, b, fwd, grad_a, grad_b) -> Tensor:
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    broadcast_shape(a.shape, b.shape)
    out = fwd(a.data, b.data)
    if name == "mul":
        _check_finite(out, name)

    def bw(g):
        ga = unbroadcast(grad_a(a.data, b.data, g), a.shape) if a.requires_grad else None
        gb = unbroadcast(grad_b(a.data, b.data, g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, name)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda x, y, g: g, lambda x, y, g: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda x, y, g: g, lambda x, y, g: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda x, y, g: g * y, lambda x, y, g: g * x)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch by name; binary ops require ``b``, unary ops forbid it."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in UNARY_GRADS:
        if b is not None:
            raise TypeError(f"{op} takes one operand")
        return fn(a)
    if b is None:
        raise TypeError(f"{op} takes two operands")
    return fn(a, b)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), bw, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _make(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def softmax_array(x: np.ndarray, axis: int = 1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_array(x: np.ndarray, axis: int = 1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(logits: Tensor, axis: int = 1) -> Tensor:
    if logits.shape[axis] < 2:
        raise ShapeError("softmax needs at least 2 channels")
    out = softmax_array(logits.data, axis)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (logits,), bw, "softmax")


def log_softmax(logits: Tensor, axis: int = 1) -> Tensor:
    out = log_softmax_array(logits.data, axis)
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (logits,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# gradient gates
# ---------------------------------------------------------------------------

MULTIPLY_FORWARD = "multiply-forward"
BACKWARD_ONLY = "multiply-backward-only"


@dataclass
class GateHandle:
    """A [0, 1]-valued gate bound to an attention site.

    ``multiply-forward`` scales activations (and, by the chain rule, the
    gradients flowing through them).  ``multiply-backward-only`` leaves the
    forward value untouched and scales only the gradient.
    """

    site: str
    gate: Tensor
    mode: str = MULTIPLY_FORWARD

    def __post_init__(self):
        if self.mode not in (MULTIPLY_FORWARD, BACKWARD_ONLY):
            raise ValueError(f"unknown gate mode {self.mode!r}")
        g = self.gate.data
        if np.isnan(g).any() or (g < 0).any() or (g > 1).any():
            raise ValueError(f"gate {self.site!r} has values outside [0, 1]")


def apply_gate(x: Tensor, handle: GateHandle) -> Tensor:
    g = handle.gate
    broadcast_shape(x.shape, g.shape)
    if handle.mode == MULTIPLY_FORWARD:
        return mul(x, g)
    gd = g.data

    def bw(up):
        return (unbroadcast(up * gd, x.shape),)

    return _make(x.data, (x,), bw, "gate_bw")


# ---------------------------------------------------------------------------
# backward and gradient checking
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Gradients accumulate onto any existing ``.grad``; callers reset between
    steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.nodes:
        raise RuntimeError("backward on an empty tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                seen[key] = inp
        seen[id(node.output)] = node.output
        _deposit(node.output, g)
    # leaves
    for key, g in grads.items():
        _deposit(seen[key], g)


def _deposit(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    t.grad = g if t.grad is None else t.grad + g


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between the taped gradient and central differences.

    ``f`` is evaluated on ``x`` itself (its data is perturbed in place and
    restored), so closures that hold ``x`` as a parameter work unchanged.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if x.dtype != np.float64:
        raise TypeError("grad_check requires a float64 tensor")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
    if tape.nodes:
        backward(tape, y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.requires_grad = was

    flat = x.data.reshape(-1)
    err = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f(x).data)
            flat[i] = orig - eps
            down = float(f(x).data)
            flat[i] = orig
            num = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[i]
            err = max(err, abs(a - num) / max(1.0, abs(a)))
    return err


def parameters_grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5,
                          max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """``grad_check`` over several parameter tensors of a closed-over model.

    With ``max_coords`` only a random subset of coordinates per tensor is
    probed; the analytic gradient is still computed in one backward pass.
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        y = f()
    backward(tape, y)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    err = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                up = float(f().data)
                flat[i] = orig - eps
                down = float(f().data)
                flat[i] = orig
                num = (up - down) / (2 * eps)
                ai = a.reshape(-1)[i]
                err = max(err, abs(ai - num) / max(1.0, abs(ai)))
    return err
