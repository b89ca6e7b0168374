"""Reverse-mode automatic differentiation over float64 numpy arrays.

Everything downstream (encoders, losses) is built from the primitives here.
Ops execute eagerly; when a :class:`GradientTape` is active they also record
themselves, and ``tape.backward(loss)`` replays the recording in reverse to
accumulate gradients. With no active tape the same functions behave as plain
numpy math, which is what the finite-difference checker relies on.

All arithmetic is float64. Numerically delicate ops (softmax and friends)
subtract the running max before exponentiating so finite inputs always
produce finite outputs.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "GradientTape",
    "GradientCheckReport",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "stack_rows",
    "take_rows",
    "take_index_pairs",
    "slice_cols",
    "diag_part",
    "tsum",
    "tmean",
    "exp",
    "log",
    "sqrt",
    "softmax",
    "log_softmax",
    "logsumexp",
    "gelu",
    "smooth_l1",
    "bce_with_logits",
    "layer_norm",
    "l2_normalize",
    "dropout",
    "global_grad_norm",
    "gradient_check",
]


class Tensor:
    """A float64 array plus a requires-grad flag.

    Tensors are treated as immutable after creation: ops always allocate
    fresh output arrays and nothing in this package writes into ``data``.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; mixed operands are promoted via _as_tensor
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data) -> Tensor:
    """Tensor with requires_grad=True; the conventional leaf constructor."""
    return Tensor(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    # out is held strongly so tensor ids stay unique for the tape's lifetime
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple]


_ACTIVE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


def _current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradientTape:
    """Records executed ops; reverse replay accumulates gradients.

    Single-owner: a tape must not be shared across concurrent tasks, but
    independent tapes in different threads record independently (the active
    tape is thread-local). ``backward`` may be called repeatedly; each call
    resets the accumulators and walks the recorded ops exactly once in
    reverse execution order, so repeated calls are bitwise identical.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self, "gradient tapes must unwind LIFO"

    @property
    def num_recorded(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        self._grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = self._grads.get(id(node.out))
            if g is None:
                continue
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                acc = self._grads.get(id(parent))
                self._grads[id(parent)] = pg if acc is None else acc + pg

    def grad(self, t: Tensor) -> np.ndarray:
        """Accumulated gradient of the last backward; zeros if unused."""
        g = self._grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g


def _record(out: Tensor, parents: tuple[Tensor, ...], backward) -> Tensor:
    out.requires_grad = any(p.requires_grad for p in parents)
    tape = _current_tape()
    if tape is not None and out.requires_grad:
        tape._nodes.append(_Node(out, parents, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting rules)

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data / b.data)
    return _record(out, (a, b), lambda g: (
        _unbroadcast(g / b.data, a.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# linear algebra and structure

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner extents do not match: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.T.copy())
    return _record(out, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, ts, backward)


def stack_rows(vectors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors into a matrix, one per row."""
    vs = tuple(_as_tensor(v) for v in vectors)
    out = Tensor(np.stack([v.data for v in vs], axis=0))

    def backward(g):
        return tuple(g[i] for i in range(len(vs)))

    return _record(out, vs, backward)


def take_rows(a, indices) -> Tensor:
    """Row gather; duplicate indices accumulate in the backward scatter."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(a.data[idx])

    def backward(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _record(out, (a,), backward)


def take_index_pairs(a, rows, cols) -> Tensor:
    a = _as_tensor(a)
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)
    out = Tensor(a.data[r, c])

    def backward(g):
        z = np.zeros_like(a.data)
        np.add.at(z, (r, c), g)
        return (z,)

    return _record(out, (a,), backward)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data[:, start:stop].copy())

    def backward(g):
        z = np.zeros_like(a.data)
        z[:, start:stop] = g
        return (z,)

    return _record(out, (a,), backward)


def diag_part(a) -> Tensor:
    a = _as_tensor(a)
    n = min(a.shape)
    out = Tensor(np.diagonal(a.data).copy())

    def backward(g):
        z = np.zeros_like(a.data)
        z[np.arange(n), np.arange(n)] = g
        return (z,)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _record(out, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy() / count,)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy() / count,)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# transcendental / nonlinear

def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.sqrt(a.data))
    return _record(out, (a,), lambda g: (g * 0.5 / out.data,))


def softmax(a, axis: int = -1) -> Tensor:
    """Max-shifted softmax; rows sum to 1 for any finite input."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y)

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), backward)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m).sum(axis=axis, keepdims=True)
    val = np.log(s) + m
    out = Tensor(val if keepdims else val.squeeze(axis=axis))

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.exp(a.data - m) / s * gg,)

    return _record(out, (a,), backward)


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact error-function GELU: x * Phi(x)."""
    a = _as_tensor(a)
    cdf = 0.5 * (1.0 + special.erf(a.data / _SQRT2))
    out = Tensor(a.data * cdf)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (cdf + a.data * pdf),)

    return _record(out, (a,), backward)


def smooth_l1(a, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1 of a residual: quadratic below beta, linear above."""
    if beta <= 0:
        raise ContractError(f"smooth_l1 requires beta > 0, got {beta}")
    a = _as_tensor(a)
    absd = np.abs(a.data)
    small = absd < beta
    out = Tensor(np.where(small, 0.5 * a.data * a.data / beta, absd - 0.5 * beta))

    def backward(g):
        return (g * np.where(small, a.data / beta, np.sign(a.data)),)

    return _record(out, (a,), backward)


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy on raw logits, targets in {0,1}."""
    z = _as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    out = Tensor(np.maximum(z.data, 0.0) - z.data * y + np.log1p(np.exp(-np.abs(z.data))))

    def backward(g):
        sig = special.expit(z.data)
        return (g * (sig - y),)

    return _record(out, (z,), backward)


# ---------------------------------------------------------------------------
# composites

def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Zero-mean/unit-variance over the last axis, then affine."""
    if eps <= 0:
        raise ContractError(f"layer_norm requires eps > 0, got {eps}")
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    normed = div(centered, sqrt(add(var, eps)))
    return add(mul(normed, gain), bias)


def l2_normalize(x, eps: float = 1e-24) -> Tensor:
    """Scale a vector to unit L2 norm (eps only guards the zero vector)."""
    s = add(tsum(mul(x, x)), eps)
    return div(x, sqrt(s))


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout. rate == 0 is the identity (no rng draw)."""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return math.sqrt(total)


# ---------------------------------------------------------------------------
# finite-difference verification

@dataclass
class GradientCheckReport:
    """Per-input max relative error of reverse-mode vs central differences."""

    max_rel_errors: list[float]
    tolerance: float
    step: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = all(e <= self.tolerance for e in self.max_rel_errors)


def gradient_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-4,
    tolerance: float = 1e-3,
    rel_floor: float = 1e-4,
) -> GradientCheckReport:
    """Compare reverse-mode gradients of scalar-valued ``f`` with central
    finite differences at ``inputs``.

    Relative error uses ``|a - n| / max(|a|, |n|, rel_floor)`` so near-zero
    gradients are compared absolutely at the ``rel_floor`` scale.
    """
    if step <= 0:
        raise ContractError(f"gradient_check requires step > 0, got {step}")
    inputs = list(inputs)
    with GradientTape() as tape:
        out = f(*inputs)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("gradient_check requires f to return a scalar Tensor")
    tape.backward(out)
    analytic = [tape.grad(t) for t in inputs]

    def eval_at(k: int, flat_idx: int, delta: float) -> float:
        moved = inputs[k].data.copy()
        moved.flat[flat_idx] += delta
        probe = list(inputs)
        probe[k] = Tensor(moved)
        return f(*probe).item()

    max_errs = []
    for k, t in enumerate(inputs):
        worst = 0.0
        for flat_idx in range(t.data.size):
            plus = eval_at(k, flat_idx, step)
            minus = eval_at(k, flat_idx, -step)
            numeric = (plus - minus) / (2.0 * step)
            a = float(analytic[k].flat[flat_idx])
            denom = max(abs(a), abs(numeric), rel_floor)
            worst = max(worst, abs(a - numeric) / denom)
        max_errs.append(worst)
    return GradientCheckReport(max_rel_errors=max_errs, tolerance=tolerance, step=step)
