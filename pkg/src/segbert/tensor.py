"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure that pushes the output gradient back to them.
:meth:`Tensor.backward` walks the resulting graph in reverse topological
order, accumulating gradients additively at fan-out points.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class GraphStateError(RuntimeError):
    """Raised when backward is requested on something that has no graph."""


class DimensionError(ValueError):
    pass


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    # -- basic properties ------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # -- graph construction ----------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
        needs = any(p.requires_grad for p in parents)
        if not needs:
            return Tensor(data)
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise GraphStateError("backward() called on a tensor that is not part of a graph")
        if grad is None:
            if self.data.size != 1:
                raise GraphStateError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        # interior nodes start from zero; leaves keep whatever was accumulated
        for node in order:
            if node._backward is not None:
                node.grad = None
        self._accum(_as_array(grad))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other) -> Tensor:
        other = ensure_tensor(other)
        a, b = self, other

        def bw(g):
            a._accum(_unbroadcast(g, a.shape))
            b._accum(_unbroadcast(g, b.shape))
        return Tensor._make(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        a = self
        return Tensor._make(-a.data, (a,), lambda g: a._accum(-g))

    def __sub__(self, other) -> Tensor:
        other = ensure_tensor(other)
        a, b = self, other

        def bw(g):
            a._accum(_unbroadcast(g, a.shape))
            b._accum(_unbroadcast(-g, b.shape))
        return Tensor._make(a.data - b.data, (a, b), bw)

    def __rsub__(self, other) -> Tensor:
        return ensure_tensor(other) - self

    def __mul__(self, other) -> Tensor:
        other = ensure_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.shape))
        return Tensor._make(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = ensure_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))
        return Tensor._make(a.data / b.data, (a, b), bw)

    def __pow__(self, p: float) -> Tensor:
        a = self
        out = a.data ** p
        return Tensor._make(out, (a,), lambda g: a._accum(g * p * a.data ** (p - 1)))

    def __matmul__(self, other) -> Tensor:
        other = ensure_tensor(other)
        a, b = self, other
        if b.ndim == 1:
            return (a @ b.reshape(-1, 1)).reshape(a.shape[:-1])
        if a.ndim == 1:
            return (a.reshape(1, -1) @ b).reshape(b.shape[:-2] + b.shape[-1:])
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))
        return Tensor._make(a.data @ b.data, (a, b), bw)

    # -- elementwise nonlinearities -----------------------------------------
    def exp(self) -> Tensor:
        a = self
        out = np.exp(a.data)
        return Tensor._make(out, (a,), lambda g: a._accum(g * out))

    def log(self) -> Tensor:
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: a._accum(g / a.data))

    def relu(self) -> Tensor:
        a = self
        keep = a.data > 0
        return Tensor._make(a.data * keep, (a,), lambda g: a._accum(g * keep))

    def tanh(self) -> Tensor:
        a = self
        out = np.tanh(a.data)
        return Tensor._make(out, (a,), lambda g: a._accum(g * (1.0 - out * out)))

    def sigmoid(self) -> Tensor:
        a = self
        out = _sigmoid(a.data)
        return Tensor._make(out, (a,), lambda g: a._accum(g * out * (1.0 - out)))

    def softplus(self) -> Tensor:
        a = self
        out = np.logaddexp(0.0, a.data)
        return Tensor._make(out, (a,), lambda g: a._accum(g * _sigmoid(a.data)))

    # -- reductions & reshaping -----------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape))
        return Tensor._make(np.asarray(out), (a,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        n = self.data.size if axis is None else np.prod([self.shape[ax] for ax in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> Tensor:
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor._make(a.data.reshape(shape), (a,), lambda g: a._accum(g.reshape(a.shape)))

    def transpose(self, *axes) -> Tensor:
        a = self
        axes = axes or tuple(reversed(range(a.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(np.transpose(a.data, axes), (a,),
                            lambda g: a._accum(np.transpose(g, inv)))

    @property
    def T(self) -> Tensor:
        return self.transpose()

    def __getitem__(self, idx) -> Tensor:
        a = self
        out = a.data[idx]

        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accum(full)
        return Tensor._make(np.array(out, copy=True), (a,), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def ensure_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    ts = [ensure_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, bounds, axis=axis)):
            t._accum(piece)
    return Tensor._make(out, ts, bw)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``. ``mask`` (broadcastable, True = keep) zeroes
    excluded entries exactly."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accum(out * (g - (g * out).sum(axis=axis, keepdims=True)))
    return Tensor._make(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply
    ``gamma * xhat + beta``."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps) if eps > 0 else np.where(var > 0, 1.0 / np.sqrt(np.where(var > 0, var, 1.0)), 0.0)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def bw(g):
        if gamma.requires_grad:
            gamma._accum(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accum(_unbroadcast(g, beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            x._accum(inv * (gx - gx.mean(axis=-1, keepdims=True)
                            - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / d))
    return Tensor._make(out, (x, gamma, beta), bw)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Same-padded 1-D convolution over time.

    ``x`` is (T, C_in), ``weight`` is (C_out, C_in, k) with odd k, ``bias`` is
    (C_out,). Returns (T, C_out).
    """
    T, cin = x.shape
    cout, wcin, k = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv1d expects {wcin} input channels, got {cin}")
    pad = k // 2
    xp = np.zeros((T + 2 * pad, cin))
    xp[pad:pad + T] = x.data
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=0)  # (T, cin, k)
    out = np.einsum("tck,ock->to", cols, weight.data) + bias.data

    def bw(g):
        if weight.requires_grad:
            weight._accum(np.einsum("tck,to->ock", cols, g))
        if bias.requires_grad:
            bias._accum(g.sum(axis=0))
        if x.requires_grad:
            dcols = np.einsum("to,ock->tck", g, weight.data)
            dxp = np.zeros_like(xp)
            for kk in range(k):
                dxp[kk:kk + T] += dcols[:, :, kk]
            x._accum(dxp[pad:pad + T])
    return Tensor._make(out, (x, weight, bias), bw)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accum(full)
    return Tensor._make(table.data[ids], (table,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


def mse(a: Tensor, b) -> Tensor:
    b = ensure_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return (d * d).mean()


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy written as softplus(z) - y*z (stable)."""
    y = ensure_tensor(targets)
    if logits.shape != y.shape:
        raise DimensionError(f"bce shape mismatch {logits.shape} vs {y.shape}")
    return (logits.softplus() - y * logits).mean()
