"""Reverse-mode autodiff over dense numpy arrays.

Tensors are immutable once produced by an op. Every op validates shapes up
front and checks its output for NaN/Inf (a hard error). Double precision is
the default; training code may opt into float32.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Parameter",
    "NumericError",
    "ShapeError",
    "no_grad",
    "matmul",
    "softmax",
    "masked_softmax",
    "layer_norm",
    "gelu",
    "cross_entropy_logits",
    "embedding",
    "concat",
    "gradients",
]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NumericError(RuntimeError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    """Raised on dimension mismatch; message names both shapes."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    # Fast path: a single reduction. NaN/Inf propagate through sum.
    if np.isfinite(arr.sum()):
        return
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by op '{op}' (shape {arr.shape})")


class Tensor:
    """A dense array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=np.float64 if not isinstance(data, np.ndarray) else data.dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        _check_finite(arr, "constant")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}, name={self.name!r})"

    # -- graph construction --------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, op: str, parents: Sequence["Tensor"],
                backward: Callable[[np.ndarray], None]) -> "Tensor":
        _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = ""
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(p for p in parents if p.requires_grad)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Backpropagate from this (scalar) node."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()

        def visit(node: Tensor) -> None:
            stack = [(node, False)]
            while stack:
                n, done = stack.pop()
                if done:
                    topo.append(n)
                    continue
                if id(n) in seen:
                    continue
                seen.add(id(n))
                stack.append((n, True))
                for p in n._parents:
                    stack.append((p, False))

        visit(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other, self.dtype)
        data = self.data + other.data
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.data.shape))

        return Tensor._result(data, "add", (a, b), bw)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def bw(g):
            a._accumulate(-g)

        return Tensor._result(-self.data, "neg", (a,), bw)

    def __sub__(self, other):
        return self + (-_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return _as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other, self.dtype)
        data = self.data * other.data
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._result(data, "mul", (a, b), bw)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other, self.dtype))

    # -- shape ops -----------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = self.data.shape

        def bw(g):
            a._accumulate(g.reshape(old))

        return Tensor._result(self.data.reshape(shape), "reshape", (a,), bw)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        a = self
        inv = np.argsort(axes)

        def bw(g):
            a._accumulate(g.transpose(inv))

        return Tensor._result(self.data.transpose(axes), "transpose", (a,), bw)

    def sum(self, axis=None):
        a = self

        def bw(g):
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.data.shape))
            else:
                a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.data.shape))

        return Tensor._result(self.data.sum(axis=axis), "sum", (a,), bw)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    t = Tensor(np.asarray(x, dtype=dtype))
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient g to `shape` by summing broadcast dimensions."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gd, sd) in enumerate(zip(g.shape, shape)):
        if sd == 1 and gd != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Parameter:
    """Named trainable tensor. Names are unique within a model."""

    __slots__ = ("tensor", "name", "trainable")

    def __init__(self, data, name: str, trainable: bool = True):
        self.tensor = Tensor(np.asarray(data), requires_grad=trainable, name=name)
        self.name = name
        self.trainable = trainable

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.tensor.data = value

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        self.tensor.requires_grad = flag

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape}, trainable={self.trainable})"


# ----------------------------------------------------------------------
# Ops
# ----------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, with stacked leading dimensions as in numpy."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return Tensor._result(data, "matmul", (a, b), bw)


def masked_softmax(x: Tensor, mask: Optional[np.ndarray], axis: int = -1) -> Tensor:
    """Softmax along `axis`; positions where mask is False get weight exactly 0.

    `mask` is a boolean array broadcastable to x. Every slice must keep at
    least one allowed position.
    """
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        masked = np.where(mask, xd, -np.inf)
        m = masked.max(axis=axis, keepdims=True)
        if not np.all(np.isfinite(m)):
            raise ShapeError("masked_softmax: some slice has no allowed position")
        e = np.exp(xd - m) * mask
    else:
        m = xd.max(axis=axis, keepdims=True)
        e = np.exp(xd - m)
    denom = e.sum(axis=axis, keepdims=True)
    w = e / denom

    def bw(g):
        gw = g * w
        x._accumulate(gw - w * gw.sum(axis=axis, keepdims=True))

    return Tensor._result(w, "softmax", (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max subtraction) along `axis`."""
    return masked_softmax(x, None, axis=axis)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row (last axis) zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be > 0")
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def bw(g):
        if x.requires_grad:
            gy = g * gain.data
            # d xhat / d x folded analytically
            gx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                        - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
            x._accumulate(gx)
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.data.shape))

    return Tensor._result(data, "layer_norm", (x, gain, bias), bw)


def gelu(x: Tensor, approximate: bool = False) -> Tensor:
    """GELU activation. Exact erf form by default; tanh approximation optional."""
    xd = x.data
    if approximate:
        c = np.sqrt(2.0 / np.pi)
        inner = c * (xd + 0.044715 * xd ** 3)
        t = np.tanh(inner)
        data = 0.5 * xd * (1.0 + t)

        def bw(g):
            dinner = c * (1.0 + 3 * 0.044715 * xd ** 2)
            d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t ** 2) * dinner
            x._accumulate(g * d)
    else:
        phi_cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
        data = xd * phi_cdf

        def bw(g):
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd ** 2)
            x._accumulate(g * (phi_cdf + xd * pdf))

    return Tensor._result(data, "gelu", (x,), bw)


def cross_entropy_logits(logits: Tensor, targets: np.ndarray, pad_id: int = -1) -> Tensor:
    """Mean negative log-softmax over non-pad target positions.

    logits: (..., T, V); targets: integer array (..., T).
    """
    xd = logits.data
    V = xd.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != xd.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {xd.shape}")
    valid = targets != pad_id
    n = int(valid.sum())
    if n == 0:
        raise ValueError("cross_entropy_logits: all positions are padding")
    if targets[valid].max() >= V or targets[valid].min() < 0:
        raise ValueError(f"target id out of range for vocab size {V}")

    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = xd - m - np.log(z)
    safe_t = np.where(valid, targets, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = -(picked * valid).sum() / n

    def bw(g):
        p = e / z
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
        grad = (p - onehot) * valid[..., None] * (float(g) / n)
        logits._accumulate(grad)

    return Tensor._result(np.asarray(loss), "cross_entropy_logits", (logits,), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: output[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.data.shape[0]:
        raise ValueError(f"embedding id out of range [0, {table.data.shape[0]})")
    data = table.data[ids]

    def bw(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        table._accumulate(acc)

    return Tensor._result(data, "embedding", (table,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return Tensor._result(data, "concat", tuple(tensors), bw)


def gradients(loss: Tensor, params: Iterable[Parameter]) -> dict[str, np.ndarray]:
    """d loss / d param for every trainable parameter in `params`.

    Non-finite gradients are a hard error naming the parameter.
    """
    params = list(params)
    for p in params:
        p.tensor.grad = None
    loss.backward()
    out: dict[str, np.ndarray] = {}
    for p in params:
        if not p.trainable:
            continue
        g = p.tensor.grad
        if g is None:
            g = np.zeros_like(p.tensor.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{p.name}'")
        out[p.name] = g
    return out
