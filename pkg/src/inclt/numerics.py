"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Every op computes its value eagerly with numpy.  When any input requires a
gradient, the op appends an entry to the active :class:`Tape`; ``backward``
replays the tape in reverse record order and fills ``.grad`` on every leaf
that asked for one.

Elementwise ops accept numpy-style broadcasting; the backward rule sums the
incoming gradient back down to each operand's shape.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "no_grad",
    "finite_checks",
    "get_tape",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "einsum",
    "exp",
    "log",
    "relu",
    "elu_plus_one",
    "softmax",
    "log_softmax",
    "layer_norm",
    "dropout",
    "sum",
    "mean",
    "cumsum",
    "embedding",
    "concat",
    "reshape",
    "transpose",
    "masked_fill",
    "backward",
]


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf while finite checks were enabled."""


class _State(threading.local):
    def __init__(self) -> None:
        self.tape = Tape()
        self.grad_enabled = True
        self.check_finite = True



class Tape:
    """Ordered record of differentiable ops for one backward pass."""

    def __init__(self) -> None:
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], rule: Callable) -> None:
        self.entries.append((out, inputs, rule))

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


_state = _State()


def get_tape() -> Tape:
    return _state.tape


@contextlib.contextmanager
def no_grad():
    """Disable recording; ops return plain constants."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    prev = _state.check_finite
    _state.check_finite = enabled
    try:
        yield
    finally:
        _state.check_finite = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, inputs: Sequence[Tensor], rule: Callable, name: str) -> Tensor:
    if _state.check_finite and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{name} produced non-finite values")
    needs = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        _state.tape.record(out, tuple(inputs), rule)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), rule, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), rule, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: zero in denominator")
    out = a.data / b.data

    def rule(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), rule, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def elu_plus_one(a) -> Tensor:
    """Feature map ``elu(x) + 1``: ``x + 1`` for positive x, ``exp(x)`` otherwise.

    The result is strictly positive, which keeps linear-attention
    denominators away from zero.
    """
    a = _as_tensor(a)
    pos = a.data > 0
    ex = np.exp(np.minimum(a.data, 0.0))
    out = np.where(pos, a.data + 1.0, ex)
    deriv = np.where(pos, 1.0, ex)
    return _make(out, (a,), lambda g: (g * deriv,), "elu_plus_one")


def masked_fill(a, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant; no gradient flows there."""
    a = _as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    keep = ~mask
    return _make(np.where(mask, value, a.data), (a,), lambda g: (g * keep,), "masked_fill")


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes)

    def rule(g):
        if axes is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return _make(np.asarray(out), (a,), rule, "sum")


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes)

    def rule(g):
        g = g / count
        if axes is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return _make(np.asarray(out), (a,), rule, "mean")


def cumsum(a, axis: int) -> Tensor:
    a = _as_tensor(a)
    out = np.cumsum(a.data, axis=axis)

    def rule(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _make(out, (a,), rule, "cumsum")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be a plain 2-D weight shared across the leading axes of ``a``
    or carry the same leading axes as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 2:
        raise ValueError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def rule(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), rule, "matmul")


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum with explicit output, e.g. ``"bhtd,bhte->bhtde"``."""
    a, b = _as_tensor(a), _as_tensor(b)
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if len(set(s)) != len(s):
            raise ValueError(f"einsum: repeated index in {s!r}")
        missing = set(s) - set(other) - set(out_sub)
        if missing:
            raise ValueError(f"einsum: index {sorted(missing)} summed within one operand")
    out = np.einsum(subscripts, a.data, b.data, optimize=True)

    def rule(g):
        ga = np.einsum(f"{out_sub},{sb}->{sa}", g, b.data, optimize=True)
        gb = np.einsum(f"{out_sub},{sa}->{sb}", g, a.data, optimize=True)
        return ga, gb

    return _make(out, (a, b), rule, "einsum")


# ---------------------------------------------------------------- normalisation


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), rule, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def rule(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), rule, "log_softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def rule(g):
        gx_hat = g * gamma.data
        n = x.shape[-1]
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _make(out, (x, gamma, beta), rule, "layer_norm")


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout.  Identity when not training or ``p == 0``."""
    x = _as_tensor(x)
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- indexing & shape


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def rule(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(out, (table,), rule, "embedding")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, rule, "concat")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``.

    Gradients accumulate into existing ``.grad`` buffers.  The tape is
    cleared afterwards.
    """
    tape = tape if tape is not None else _state.tape
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    if not len(tape):
        raise RuntimeError("backward called on an empty tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(out) for out, _, _ in tape.entries}
    leaves: dict[int, Tensor] = {}
    for out, inputs, rule in reversed(tape.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, rule(g)):
            if not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64, copy=True)
            if key not in produced:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    tape.clear()
