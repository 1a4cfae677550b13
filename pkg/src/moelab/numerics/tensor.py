"""Reverse-mode autodiff over dense numpy arrays.

Every op below computes its forward value eagerly and, when any input
requires a gradient, records a closure that maps the output gradient to
input gradients. ``DiffTensor.backward`` replays those closures in reverse
topological order. Leaf gradients accumulate additively across calls;
callers zero them explicitly (``zero_grad``).

Layout is numpy's default C order (row-major), so ``values.tobytes()`` is
byte-comparable between runs.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

# tanh-approximation GELU constants
GELU_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class DiffTensor:
    """A dense n-d array with an optional gradient accumulator."""

    __slots__ = ("values", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(values, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.values: np.ndarray = arr if arr.flags.c_contiguous else np.array(arr, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(self.values) if requires_grad else None
        self.name = name
        self._parents: tuple[DiffTensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic properties ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"DiffTensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def detach(self) -> DiffTensor:
        return DiffTensor(self.values, requires_grad=False)

    def astype(self, dtype) -> DiffTensor:
        """Cast without tracking; returns a new leaf."""
        return DiffTensor(self.values.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    # -- backward -----------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
        order = _topo_order(self)
        for node in order:
            if node._backward is not None:
                node.grad = None
        seed = np.ones_like(self.values) if grad is None else np.asarray(grad, dtype=self.dtype)
        _accumulate(self, seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _topo_order(root: DiffTensor) -> list[DiffTensor]:
    order: list[DiffTensor] = []
    seen: set[int] = set()
    stack: list[tuple[DiffTensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _accumulate(t: DiffTensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.values.dtype:
        g = g.astype(t.values.dtype)
    # out-of-place: the same gradient array may be handed to several parents
    t.grad = g if t.grad is None else t.grad + g


def as_tensor(x, dtype=None) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(np.asarray(x, dtype=dtype))


def _make(values: np.ndarray, parents: Sequence[DiffTensor], backward) -> DiffTensor:
    out = DiffTensor.__new__(DiffTensor)
    out.values = values
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b) -> tuple[DiffTensor, DiffTensor]:
    a = as_tensor(a)
    b = as_tensor(b)
    # python scalars / constants follow the tracked operand's dtype
    if not b.requires_grad and b.values.dtype != a.values.dtype and b.values.ndim == 0:
        b = DiffTensor(b.values.astype(a.values.dtype))
    if not a.requires_grad and a.values.dtype != b.values.dtype and a.values.ndim == 0:
        a = DiffTensor(a.values.astype(b.values.dtype))
    return a, b


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> DiffTensor:
    a, b = _pair(a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.values + b.values, (a, b), backward)


def sub(a, b) -> DiffTensor:
    a, b = _pair(a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.values - b.values, (a, b), backward)


def mul(a, b) -> DiffTensor:
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.values, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.values, b.shape))

    return _make(a.values * b.values, (a, b), backward)


def div(a, b) -> DiffTensor:
    a, b = _pair(a, b)
    out = a.values / b.values

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.values, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out / b.values, b.shape))

    return _make(out, (a, b), backward)


def exp(x: DiffTensor) -> DiffTensor:
    out = np.exp(x.values)
    return _make(out, (x,), lambda g: _accumulate(x, g * out))


def log(x: DiffTensor) -> DiffTensor:
    return _make(np.log(x.values), (x,), lambda g: _accumulate(x, g / x.values))


def square(x: DiffTensor) -> DiffTensor:
    return _make(x.values * x.values, (x,), lambda g: _accumulate(x, 2.0 * g * x.values))


# -- reductions and shape ops ---------------------------------------------------


def reduce_sum(x: DiffTensor, axis=None, keepdims: bool = False) -> DiffTensor:
    out = np.sum(x.values, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape).copy())

    return _make(np.asarray(out), (x,), backward)


def reduce_mean(x: DiffTensor, axis=None, keepdims: bool = False) -> DiffTensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: DiffTensor, shape) -> DiffTensor:
    src = x.shape
    return _make(x.values.reshape(shape), (x,), lambda g: _accumulate(x, g.reshape(src)))


def transpose(x: DiffTensor, axes: Sequence[int]) -> DiffTensor:
    inv = np.argsort(axes)
    out = np.ascontiguousarray(np.transpose(x.values, axes))
    return _make(out, (x,), lambda g: _accumulate(x, np.ascontiguousarray(np.transpose(g, inv))))


def concat(tensors: Sequence[DiffTensor], axis: int = 0) -> DiffTensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, np.ascontiguousarray(piece))

    return _make(np.concatenate([t.values for t in tensors], axis=axis), tensors, backward)


# -- linear algebra ---------------------------------------------------------------


def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.values, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.values, -1, -2) @ g, b.shape))

    return _make(a.values @ b.values, (a, b), backward)


def affine(x: DiffTensor, w: DiffTensor, b: DiffTensor | None = None) -> DiffTensor:
    """``x @ w + b`` over the last axis of ``x``; leading axes are batch."""
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"affine: x shape {x.shape} incompatible with w shape {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"affine: bias shape {b.shape} incompatible with w shape {w.shape}")
    lead = x.shape[:-1]
    x2 = x.values.reshape(-1, w.shape[0])
    y = x2 @ w.values
    if b is not None:
        y = y + b.values
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        if x.requires_grad:
            _accumulate(x, (g2 @ w.values.T).reshape(x.shape))
        if w.requires_grad:
            _accumulate(w, x2.T @ g2)
        if b is not None and b.requires_grad:
            _accumulate(b, g2.sum(axis=0))

    return _make(y.reshape(*lead, w.shape[1]), parents, backward)


# -- nonlinearities ---------------------------------------------------------------


def softmax(x: DiffTensor) -> DiffTensor:
    """Softmax over the last axis, max-shifted."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax: need a non-empty last axis, got shape {x.shape}")
    z = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(x, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _make(out, (x,), backward)


def log_softmax(x: DiffTensor) -> DiffTensor:
    z = x.values - x.values.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        _accumulate(x, g - p * g.sum(axis=-1, keepdims=True))

    return _make(out, (x,), backward)


def logsumexp(x: DiffTensor) -> DiffTensor:
    """log sum exp over the last axis (axis dropped)."""
    m = x.values.max(axis=-1, keepdims=True)
    e = np.exp(x.values - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + m)[..., 0]
    p = e / s

    def backward(g):
        _accumulate(x, g[..., None] * p)

    return _make(out, (x,), backward)


def relu(x: DiffTensor) -> DiffTensor:
    pos = x.values > 0
    return _make(np.where(pos, x.values, 0).astype(x.dtype), (x,), lambda g: _accumulate(x, g * pos))


def gelu(x: DiffTensor) -> DiffTensor:
    """0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    v = x.values
    inner = GELU_SQRT_2_OVER_PI * (v + GELU_CUBIC * v * v * v)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * v * v)
        _accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner))

    return _make(out, (x,), backward)


def layer_norm(x: DiffTensor, gain: DiffTensor, bias: DiffTensor, eps: float = 1e-5) -> DiffTensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs input {x.shape}")
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.values + bias.values

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).sum(axis=lead))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=lead))
        if x.requires_grad:
            gx = g * gain.values
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, gx)

    return _make(out.astype(x.dtype, copy=False), (x, gain, bias), backward)


def dropout(x: DiffTensor, rate: float, training: bool, rng) -> DiffTensor:
    """Inverted dropout. Eval mode and ``rate == 0`` return ``x`` itself."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    mask = keep.astype(x.dtype) * scale
    return _make(x.values * mask, (x,), lambda g: _accumulate(x, g * mask))


# -- losses and indexing ------------------------------------------------------------


def cross_entropy(logits: DiffTensor, targets, ignore_id: int = -100) -> DiffTensor:
    """Mean negative log-likelihood over positions whose target != ignore_id."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be [N, V], got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, v = logits.shape
    if targets.shape[0] != n:
        raise DimensionError(f"cross_entropy: {n} rows of logits vs {targets.shape[0]} targets")
    valid = targets != ignore_id
    bad = valid & ((targets < 0) | (targets >= v))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise IndexError(f"cross_entropy: target {int(targets[i])} at position {i} outside [0, {v})")
    count = int(valid.sum())
    rows = np.flatnonzero(valid)
    cols = targets[rows]
    if count == 0:
        out = np.zeros((), dtype=logits.dtype)
        return _make(out, (logits,), lambda g: _accumulate(logits, np.zeros_like(logits.values)))
    z = logits.values[rows] - logits.values[rows].max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    out = np.asarray(-logp[np.arange(count), cols].sum() / count, dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        p[np.arange(count), cols] -= 1.0
        full = np.zeros_like(logits.values)
        full[rows] = p * (g / count)
        _accumulate(logits, full)

    return _make(out, (logits,), backward)


def _scatter_rows(index: np.ndarray, rows: np.ndarray, n: int, d: int, dtype) -> np.ndarray:
    """``out[index[i]] += rows[i]`` for width-``d`` rows via one bincount (64-bit accumulation)."""
    rows = rows.reshape(index.shape[0], d)
    flat = (index[:, None] * d + np.arange(d)).reshape(-1)
    out = np.bincount(flat, weights=rows.reshape(-1).astype(np.float64), minlength=n * d)
    return out.reshape(n, d).astype(dtype, copy=False)


def embedding_lookup(table: DiffTensor, ids) -> DiffTensor:
    """Gather rows of ``table``; backward scatter-adds (repeated ids accumulate)."""
    ids = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        bad = ids[(ids < 0) | (ids >= v)].reshape(-1)[0]
        raise IndexError(f"embedding_lookup: id {int(bad)} outside [0, {v})")

    def backward(g):
        full = _scatter_rows(ids.reshape(-1), g, v, int(np.prod(table.shape[1:])), table.values.dtype)
        _accumulate(table, full.reshape(table.shape))

    return _make(table.values[ids], (table,), backward)


def take_pairs(x: DiffTensor, rows, cols) -> DiffTensor:
    """``x[rows[i], cols[i]]`` for a 2-d ``x``; returns shape [n]."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def backward(g):
        n, m = x.shape
        flat = np.bincount(rows * m + cols, weights=np.asarray(g, dtype=np.float64), minlength=n * m)
        _accumulate(x, flat.reshape(n, m).astype(x.values.dtype, copy=False))

    return _make(x.values[rows, cols], (x,), backward)


def weighted_scatter_add(rows_in: DiffTensor, weights: DiffTensor, index, n_out: int) -> DiffTensor:
    """out[index[i]] += weights[i] * rows_in[i]; output shape [n_out, D]."""
    index = np.asarray(index, dtype=np.int64)
    if rows_in.shape[0] != index.shape[0] or weights.shape != (index.shape[0],):
        raise DimensionError(
            f"weighted_scatter_add: rows {rows_in.shape}, weights {weights.shape}, index {index.shape}"
        )
    out = _scatter_rows(index, rows_in.values * weights.values[:, None], n_out, rows_in.shape[1], rows_in.dtype)

    def backward(g):
        picked = g[index]
        if rows_in.requires_grad:
            _accumulate(rows_in, picked * weights.values[:, None])
        if weights.requires_grad:
            _accumulate(weights, (picked * rows_in.values).sum(axis=1))

    return _make(out, (rows_in, weights), backward)

