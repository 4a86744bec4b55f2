"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record onto a tape while one is active::

    with Tape() as tape:
        loss = tsum(matmul(x, w))
    tape.backward(loss)

Outside a tape every op is a plain numpy computation, which is what the
inference, invariant and benchmark paths use.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor", "Tape", "tensor", "parameter", "zero_grad", "mac_counter",
    "matmul", "add", "sub", "mul", "scale", "neg", "tanh_elem", "exp", "sigmoid",
    "relu", "gelu", "softmax_rows", "softmax", "layer_norm", "tsum", "mean", "max_rows",
    "concat_rows", "take_rows", "transpose", "swapaxes", "reshape", "segment_softmax",
    "depthwise_conv2d", "bce_with_logits", "stack_rows",
]

_TAPES: list["Tape"] = []
_COUNTERS: list["MacCounter"] = []


class Tensor:
    """Row-major float64 buffer with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return self.data.shape[0]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, _wrap(other))
    def __radd__(self, other): return add(_wrap(other), self)
    def __sub__(self, other): return sub(self, _wrap(other))
    def __rsub__(self, other): return sub(_wrap(other), self)
    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _wrap(other))
    def __rmul__(self, other): return self.__mul__(other)
    def __truediv__(self, other: float): return scale(self, 1.0 / other)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


class Tape:
    """Ordered record of differentiable operations.

    Records are appended in execution order, which is a topological order of
    the graph, so replaying them backwards is a valid reverse sweep.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor reached."""
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ContractError("loss does not depend on any recorded tensor")
        produced = {id(rec[0]) for rec in self.records}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, rule in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            out.grad = g
            for inp, gi in zip(inputs, rule(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _record(data: np.ndarray, inputs: tuple[Tensor, ...], rule: Callable) -> Tensor:
    tape = _TAPES[-1] if _TAPES else None
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        tape.records.append((out, inputs, rule))
        return out
    return Tensor(data)


class MacCounter:
    """Tally of multiply-accumulate operations performed by ``matmul``, per tag."""

    def __init__(self):
        self.by_tag: dict[str, int] = {}

    @property
    def total(self) -> int:
        return sum(self.by_tag.values())

    def add(self, tag: str, n: int) -> None:
        self.by_tag[tag] = self.by_tag.get(tag, 0) + n

    def __getitem__(self, tag: str) -> int:
        return self.by_tag.get(tag, 0)


@contextmanager
def mac_counter():
    counter = MacCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- arithmetic

def matmul(a: Tensor, b: Tensor, tag: str = "matmul") -> Tensor:
    """Matrix product over the last two axes (leading axes batch)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    if _COUNTERS:
        macs = int(np.prod(out.shape, dtype=np.int64)) * a.shape[-1]
        for c in _COUNTERS:
            c.add(tag, macs)

    def rule(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _record(out, (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}") from exc
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub shape mismatch: {a.shape} - {b.shape}") from exc
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}") from exc
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(x.data * c, (x,), lambda g: (g * c,))


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


# ------------------------------------------------------------- elementwise

def tanh_elem(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(x.data * mask, (x,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    y = x.data * cdf

    def rule(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _record(y, (x,), rule)


# ------------------------------------------------------- normalizations

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), rule)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction."""
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=-1)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; no affine parameters."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def rule(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv_std * (g - gm - xhat * gxm),)

    return _record(xhat, (x,), rule)


# ------------------------------------------------------------ reductions

def tsum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.asarray(y), (x,), rule)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def max_rows(x: Tensor) -> Tensor:
    """Column-wise max over rows; gradient goes to the first arg-max row."""
    idx = np.argmax(x.data, axis=0)
    cols = np.arange(x.shape[1])
    y = x.data[idx, cols]

    def rule(g):
        gx = np.zeros_like(x.data)
        gx[idx, cols] = g
        return (gx,)

    return _record(y, (x,), rule)


# ------------------------------------------------------------ structure

def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows of an empty list")
    tail = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != tail:
            raise ShapeError(f"concat_rows shape mismatch: {[q.shape for q in parts]}")
    y = np.concatenate([p.data for p in parts], axis=0)
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def rule(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record(y, tuple(parts), rule)


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors into a matrix."""
    return concat_rows([reshape(p, (1, -1)) for p in parts])


def take_rows(x: Tensor, idx) -> Tensor:
    """Gather rows by index; repeated indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.int64)
    y = x.data[idx]

    def rule(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(y, (x,), rule)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        if x.ndim != 2:
            raise ShapeError(f"transpose without axes needs a matrix, got {x.shape}")
        axes = (1, 0)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _record(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


# ------------------------------------------------------------- specials

def segment_softmax(scores: Tensor, lengths: Sequence[int]) -> Tensor:
    """Softmax of a score vector within consecutive segments.

    Returns an (n_segments x K) matrix whose row s holds the softmax of segment
    s in its own columns and zeros elsewhere, so ``matmul(A, X)`` pools each
    segment of the rows of X.
    """
    if scores.ndim != 1 or sum(lengths) != scores.shape[0]:
        raise ShapeError(f"segment lengths {list(lengths)} do not cover scores {scores.shape}")
    bounds = np.cumsum([0] + list(lengths))
    out = np.zeros((len(lengths), scores.shape[0]))
    for s in range(len(lengths)):
        lo, hi = bounds[s], bounds[s + 1]
        seg = scores.data[lo:hi]
        e = np.exp(seg - seg.max())
        out[s, lo:hi] = e / e.sum()

    def rule(g):
        gs = np.empty(scores.shape[0])
        for s in range(len(lengths)):
            lo, hi = bounds[s], bounds[s + 1]
            a = out[s, lo:hi]
            gg = g[s, lo:hi]
            gs[lo:hi] = a * (gg - np.dot(gg, a))
        return (gs,)

    return _record(out, (scores,), rule)


def depthwise_conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """Same-padded depthwise convolution (cross-correlation).

    x is (H, W, C), kernel is (k, k, C) with k odd; output is (H, W, C).
    """
    h, w, c = x.shape
    k = kernel.shape[0]
    if kernel.shape != (k, k, c) or k % 2 == 0:
        raise ShapeError(f"kernel {kernel.shape} incompatible with input {x.shape}")
    p = k // 2
    padded = np.pad(x.data, ((p, p), (p, p), (0, 0)))
    out = np.zeros_like(x.data)
    for a in range(k):
        for b in range(k):
            out += padded[a:a + h, b:b + w, :] * kernel.data[a, b]

    def rule(g):
        gk = None
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for a in range(k):
                for b in range(k):
                    gk[a, b] = (padded[a:a + h, b:b + w, :] * g).sum(axis=(0, 1))
        gx = None
        if x.requires_grad:
            gpad = np.zeros_like(padded)
            for a in range(k):
                for b in range(k):
                    gpad[a:a + h, b:b + w, :] += g * kernel.data[a, b]
            gx = gpad[p:p + h, p:p + w, :]
        return gx, gk

    return _record(out, (x, kernel), rule)


def bce_with_logits(logit: Tensor, target: float) -> Tensor:
    """Binary cross-entropy on a raw logit, numerically stable."""
    z = logit.data
    y = float(target)
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def rule(g):
        return (g * (0.5 * (1.0 + np.tanh(0.5 * z)) - y),)

    return _record(loss, (logit,), rule)
