"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Every forward op records a closure on a dynamic tape; ``Tensor.backward`` walks
the recorded graph in reverse topological order. Kernels are numpy, which keeps
results bitwise deterministic for a fixed input. All math is float64 so finite
difference checks can be tight.

Every op output is checked for NaN/Inf and raises :class:`NonFiniteError`
naming the producing op, so numerical blowups surface at the op that caused
them instead of a later loss value.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "neg",
    "exp",
    "log",
    "sqrt",
    "sigmoid",
    "softplus",
    "tanh",
    "gelu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "embedding_gather",
    "select_last",
    "narrow",
    "reshape",
    "transpose",
    "reduce_sum",
    "reduce_mean",
    "clamp_min",
    "stop_gradient",
    "dropout",
    "cosine_similarity",
    "normalize_rows",
]

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class NonFiniteError(RuntimeError):
    """A tensor op produced NaN or Inf. ``op`` names the producing op."""

    def __init__(self, op: str):
        super().__init__(f"non-finite values produced by op '{op}'")
        self.op = op


_grad_enabled = True


class no_grad:
    """Context manager: ops inside build no graph (inference / sampling passes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense float64 array plus an optional gradient slot.

    Non-leaf tensors remember their parents and a backward closure; leaves
    (parameters, constants) have neither.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def _accum_owned(self, g: np.ndarray) -> None:
        """Accumulate a gradient array the caller just allocated (no aliasing)."""
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.shape != ():
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self._accum(np.array(1.0))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # operator sugar; scalars and arrays are promoted to constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, op, tuple(parents), backward)
    return Tensor(data, False, op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` over the axes that were broadcast relative to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(out, "add", (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.data.shape))

    return _make(out, "sub", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(out, "mul", (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, "div", (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accum(-g)

    return _make(-a.data, "neg", (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy stacking semantics. Operands must be >= 2-D."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D; reshape vectors first")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    return _make(out, "matmul", (a, b), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        a._accum(g * out)

    return _make(out, "exp", (a,), backward)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def backward(g):
        a._accum(g / a.data)

    return _make(out, "log", (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        a._accum(g * 0.5 / out)

    return _make(out, "sqrt", (a,), backward)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)

    def backward(g):
        a._accum_owned(g * out * (1.0 - out))

    return _make(out, "sigmoid", (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed stably; gradient is sigmoid(x)."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        a._accum_owned(g * _stable_sigmoid(x))

    return _make(out, "softplus", (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        a._accum(g * (1.0 - out * out))

    return _make(out, "tanh", (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU with its exact analytic gradient."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        a._accum_owned(g * grad)

    return _make(out, "gelu", (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; rows sum to 1 within 1e-12."""
    x = a.data
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        a._accum(out * (g - dot))

    return _make(out, "softmax", (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - np.max(x, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def backward(g):
        soft = np.exp(out)
        a._accum(g - soft * np.sum(g, axis=axis, keepdims=True))

    return _make(out, "log_softmax", (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.var(x.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accum(_unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad:
            bias._accum(_unbroadcast(g, bias.data.shape))
        if x.requires_grad:
            gh = g * gain.data
            m1 = np.mean(gh, axis=-1, keepdims=True)
            m2 = np.mean(gh * xhat, axis=-1, keepdims=True)
            x._accum((gh - m1 - xhat * m2) * inv)

    return _make(out, "layer_norm", (x, gain, bias), backward)


def embedding_gather(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; backward is a scatter-add into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError("embedding id out of range")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        table._accum(gt)

    return _make(out, "embedding_gather", (table,), backward)


def select_last(t: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one element along the last axis per leading position: out[...] = t[..., idx[...]]."""
    idx = np.asarray(idx)
    out = np.take_along_axis(t.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gt = np.zeros_like(t.data)
        flat = gt.reshape(-1, gt.shape[-1])
        flat[np.arange(flat.shape[0]), idx.reshape(-1)] = g.reshape(-1)
        t._accum(gt)

    return _make(out, "select_last", (t,), backward)


def narrow(t: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward pads with zeros."""
    index = [slice(None)] * t.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = t.data[index].copy()

    def backward(g):
        gt = np.zeros_like(t.data)
        gt[index] = g
        t._accum(gt)

    return _make(out, "narrow", (t,), backward)


def reshape(t: Tensor, shape: tuple) -> Tensor:
    out = t.data.reshape(shape)

    def backward(g):
        t._accum(g.reshape(t.data.shape))

    return _make(out, "reshape", (t,), backward)


def transpose(t: Tensor, axes: tuple) -> Tensor:
    out = np.transpose(t.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        t._accum(np.transpose(g, inverse))

    return _make(out, "transpose", (t,), backward)


def reduce_sum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(t.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            t._accum(np.broadcast_to(g, t.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        t._accum(np.broadcast_to(g, t.data.shape).copy())

    return _make(out, "sum", (t,), backward)


def reduce_mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(t.data, axis=axis, keepdims=keepdims)
    count = t.data.size if axis is None else t.data.shape[axis]

    def backward(g):
        if axis is None:
            t._accum(np.broadcast_to(g / count, t.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        t._accum(np.broadcast_to(g / count, t.data.shape).copy())

    return _make(out, "mean", (t,), backward)


def clamp_min(t: Tensor, lo: float) -> Tensor:
    out = np.maximum(t.data, lo)

    def backward(g):
        t._accum(g * (t.data > lo))

    return _make(out, "clamp_min", (t,), backward)


def stop_gradient(t: Tensor) -> Tensor:
    """Forward identity that contributes zero gradient to its input's producers."""
    return Tensor(t.data.copy(), requires_grad=False, op="stop_gradient")


def dropout(t: Tensor, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout: active only when ``train`` and p > 0."""
    if not train or p <= 0.0:
        return t
    mask = (rng.random(t.data.shape) >= p) / (1.0 - p)
    return mul(t, Tensor(mask))


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of two vectors, differentiable in both; zero-norm input is an error."""
    if a.ndim != 1 or b.ndim != 1:
        raise ValueError("cosine_similarity expects 1-D tensors")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine_similarity: zero-norm input (degenerate embedding)")
    dot = reduce_sum(mul(a, b))
    norm_a = sqrt(reduce_sum(mul(a, a)))
    norm_b = sqrt(reduce_sum(mul(b, b)))
    return div(dot, mul(norm_a, norm_b))


def normalize_rows(t: Tensor) -> Tensor:
    """L2-normalize the last axis; rows must have nonzero norm."""
    norms = np.linalg.norm(t.data, axis=-1)
    if np.any(norms == 0.0):
        raise ValueError("normalize_rows: zero-norm row (degenerate embedding)")
    sq = reduce_sum(mul(t, t), axis=-1, keepdims=True)
    return div(t, sqrt(sq))
