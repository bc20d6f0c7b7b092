"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps a numpy float64 array plus an optional gradient buffer.
Operations run eagerly; when a ``Tape`` is active (``with Tape() as tape:``)
and any input requires a gradient, the op records a backward rule on the
tape. ``tape.backward(loss)`` then walks the recorded ops once, in reverse
(recording order is topological by construction), accumulating gradients
into ``Tensor.grad``.

Shapes must match exactly; the only broadcast allowed is the trailing-axis
bias add in ``add_bias``. All arithmetic is 64-bit.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import InputError, ShapeError, VocabError

__all__ = [
    "Tensor",
    "Tape",
    "active_tape",
    "tensor",
    "parameter",
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "take_column",
    "embedding_lookup",
    "sum_all",
    "sum_axis",
    "mean_all",
    "relu",
    "gelu",
    "log",
    "sqrt",
    "arccos",
    "clamp",
    "softmax",
    "layer_norm",
    "normalize_rows",
    "cross_entropy",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """Dense n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("values", "requires_grad", "grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


def tensor(values) -> Tensor:
    """Constant tensor (no gradient)."""
    return Tensor(values, requires_grad=False)


def parameter(values, name: str | None = None) -> Tensor:
    """Trainable tensor."""
    return Tensor(values, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of operations; backward visits each exactly once."""

    def __init__(self):
        # (inputs, output, backward) where backward(grad_out) returns one
        # gradient array (or None) per input, aligned positionally.
        self._ops: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._ops)

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, backward: Callable) -> None:
        self._ops.append((inputs, output, backward))

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and accumulate gradients into ``.grad``."""
        if loss.values.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        loss.accumulate_grad(np.ones_like(loss.values))
        for inputs, output, backward in reversed(self._ops):
            grad_out = output.grad
            if grad_out is None:
                continue  # op not on any path to the loss
            input_grads = backward(grad_out)
            for t, g in zip(inputs, input_grads):
                if g is None or not t.requires_grad:
                    continue
                t.accumulate_grad(g)


def _record(inputs: tuple[Tensor, ...], out_values: np.ndarray, backward: Callable) -> Tensor:
    """Build the output tensor and record the op if a tape is listening."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_values, requires_grad=needs)
    tape = active_tape()
    if tape is not None and needs:
        tape.record(inputs, out, backward)
    return out


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} must match exactly")


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    return _record((a, b), a.values + b.values, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    return _record((a, b), a.values - b.values, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    av, bv = a.values, b.values
    return _record((a, b), av * bv, lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record((a,), a.values * c, lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., H] + b[H]; the single permitted broadcast."""
    if b.values.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: trailing dim {x.shape} vs bias {b.shape}")
    reduce_axes = tuple(range(x.values.ndim - 1))

    def backward(g):
        return (g, g.sum(axis=reduce_axes) if reduce_axes else g)

    return _record((x, b), x.values + b.values, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape} x {b.shape}")
    av, bv = a.values, b.values
    return _record((a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError(f"transpose: expects 2-D, got {a.shape}")
    return _record((a,), a.values.T.copy(), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return _record((a,), a.values.reshape(shape).copy(), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise InputError("concat: needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(tuple(tensors), np.concatenate([t.values for t in tensors], axis=axis), backward)


def take_column(a: Tensor, col: int) -> Tensor:
    """a[:, col] from a 2-D tensor."""
    if a.values.ndim != 2:
        raise ShapeError(f"take_column: expects 2-D, got {a.shape}")
    if not 0 <= col < a.shape[1]:
        raise InputError(f"take_column: column {col} out of range for {a.shape}")

    def backward(g):
        full = np.zeros_like(a.values)
        full[:, col] = g
        return (full,)

    return _record((a,), a.values[:, col].copy(), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows: table[V, H], ids (n,) ints -> (n, H).

    Also serves as a differentiable row gather on any 2-D tensor.
    """
    ids = np.asarray(ids)
    if table.values.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if ids.ndim != 1:
        raise ShapeError(f"embedding_lookup: ids must be 1-D, got {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise VocabError("embedding_lookup: ids must be integers")
    n_rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise VocabError(f"embedding_lookup: id out of range [0, {n_rows})")

    def backward(g):
        d_table = np.zeros_like(table.values)
        np.add.at(d_table, ids, g)
        return (d_table,)

    return _record((table,), table.values[ids].copy(), backward)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record((a,), np.asarray(a.values.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_axis(a: Tensor, axis: int) -> Tensor:
    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record((a,), a.values.sum(axis=axis), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape
    return _record(
        (a,), np.asarray(a.values.mean()), lambda g: (np.broadcast_to(g / n, shape).copy(),)
    )


# ---------------------------------------------------------------------------
# Elementwise nonlinearities
# ---------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _record((a,), np.where(mask, a.values, 0.0), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit: x * Phi(x)."""
    x = a.values
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return _record((a,), x * cdf, lambda g: (g * (cdf + x * pdf),))


def log(a: Tensor) -> Tensor:
    x = a.values
    return _record((a,), np.log(x), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.values)
    return _record((a,), y, lambda g: (g * 0.5 / y,))


def arccos(a: Tensor) -> Tensor:
    x = a.values
    return _record((a,), np.arccos(x), lambda g: (-g / np.sqrt(1.0 - x * x),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.values
    mask = (x >= lo) & (x <= hi)
    return _record((a,), np.clip(x, lo, hi), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Normalizations and losses
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along ``axis``."""
    x = a.values
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _record((a,), s, backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise ShapeError(f"layer_norm: gain/bias must be ({h},)")
    v = x.values
    mu = v.mean(axis=-1, keepdims=True)
    var = v.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (v - mu) * inv
    gv = gain.values
    reduce_axes = tuple(range(v.ndim - 1))

    def backward(g):
        gxh = g * gv
        m1 = gxh.mean(axis=-1, keepdims=True)
        m2 = (gxh * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (gxh - m1 - xhat * m2)
        dgain = (g * xhat).sum(axis=reduce_axes) if reduce_axes else g * xhat
        dbias = g.sum(axis=reduce_axes) if reduce_axes else g
        return (dx, dgain, dbias)

    return _record((x, gain, bias), xhat * gv + bias.values, backward)


def normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """L2-normalize each row of a 2-D tensor. Zero rows raise."""
    from .errors import NumericsError

    if x.values.ndim != 2:
        raise ShapeError(f"normalize_rows: expects 2-D, got {x.shape}")
    v = x.values
    norms = np.sqrt((v * v).sum(axis=1, keepdims=True))
    if np.any(norms < eps):
        raise NumericsError("normalize_rows: zero-norm row")
    y = v / norms

    def backward(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * dot) / norms,)

    return _record((x,), y, backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits).

    logits (N, C) with targets (N,), or (C,) with a single int target.
    Fused stable log-softmax; never produces non-finite values on finite
    logits.
    """
    v = logits.values
    squeeze = False
    if v.ndim == 1:
        v = v[None, :]
        squeeze = True
    if v.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 1-D or 2-D, got {logits.shape}")
    t = np.atleast_1d(np.asarray(targets))
    if t.shape != (v.shape[0],):
        raise ShapeError(f"cross_entropy: targets shape {t.shape} vs logits rows {v.shape[0]}")
    if not np.issubdtype(t.dtype, np.integer):
        raise InputError("cross_entropy: targets must be integer class ids")
    if t.min() < 0 or t.max() >= v.shape[1]:
        raise InputError(f"cross_entropy: target class out of range [0, {v.shape[1]})")

    n = v.shape[0]
    m = v.max(axis=1, keepdims=True)
    logz = m + np.log(np.exp(v - m).sum(axis=1, keepdims=True))
    nll = logz[:, 0] - v[np.arange(n), t]
    probs = np.exp(v - logz)

    def backward(g):
        d = probs.copy()
        d[np.arange(n), t] -= 1.0
        d *= float(g) / n
        return (d[0] if squeeze else d,)

    return _record((logits,), np.asarray(nll.mean()), backward)
