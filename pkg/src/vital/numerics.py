"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tape` records every operation whose inputs require gradients while
it is active.  Creation order is already a topological order, so
:meth:`Tape.gradient` simply walks the record backwards once.

    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(matmul(w, w))
    >>> grads = tape.gradient(loss, [w])
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from vital import kernels
from vital.errors import ShapeError, VitalError

__all__ = [
    "Tensor", "Tape", "backward", "grad_check",
    "add", "sub", "mul", "neg", "scale", "matmul", "transpose", "swapaxes", "reshape",
    "concat", "sum_", "mean", "softmax", "layernorm", "gelu", "dense", "cross_entropy",
    "getitem",
]

_TAPES: list["Tape"] = []


class Tensor:
    """An n-d array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None
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

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Records differentiable operations executed inside a ``with`` block."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def gradient(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Back-propagate from a scalar ``loss``.

        Returns a map from each requested parameter to its gradient.  Parameters
        that ``loss`` does not depend on get a zero array.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if parent.backward_fn is None:
                    leaves[key] = parent
        if params is None:
            params = leaves.values()
        out = {}
        for p in params:
            g = grads.get(id(p))
            out[p] = np.zeros_like(p.data) if g is None else g
        return out


def backward(loss: Tensor, tape: Tape, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    return tape.gradient(loss, params)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        _TAPES[-1].nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                   _unbroadcast(g, b.shape) if b.requires_grad else None),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                   _unbroadcast(-g, b.shape) if b.requires_grad else None),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                   _unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = a.data.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = _as_tensor(x)
    y, dy = kernels.gelu(x.data)
    return _result(y, (x,), lambda g: (g * dy,))


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def grad(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), grad)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = _as_tensor(a)
    return _result(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def grad(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, ts, grad)


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)

    def grad(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), grad)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), grad)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# ---------------------------------------------------------------------------
# neural-network primitives


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    x = _as_tensor(x)
    axis = axis % x.ndim
    if axis == x.ndim - 1:
        y = kernels.softmax(x.data)
        return _result(y, (x,), lambda g: (kernels.softmax_grad(y, g),))
    moved = np.moveaxis(x.data, axis, -1)
    y = np.moveaxis(kernels.softmax(moved), -1, axis)

    def grad(g):
        gm = kernels.softmax_grad(np.moveaxis(y, axis, -1), np.moveaxis(g, axis, -1))
        return (np.moveaxis(gm, -1, axis),)

    return _result(y, (x,), grad)


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gamma * xhat + beta``."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layernorm affine params must have shape ({x.shape[-1]},)")
    y, xhat, rstd = kernels.layernorm(x.data, gamma.data, beta.data, eps)

    def grad(g):
        dx, dgamma, dbeta = kernels.layernorm_grad(g, xhat, rstd, gamma.data)
        return dx, dgamma, dbeta

    return _result(y, (x, gamma, beta), grad)


def dense(x, W, b=None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    x, W = _as_tensor(x), _as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"dense: input {x.shape} does not fit weight {W.shape}")
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeError(f"dense: bias {b.shape} does not fit weight {W.shape}")
    din, dout = W.shape
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, din)
    out = x2 @ W.data
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (dout,))

    def grad(g):
        g2 = g.reshape(-1, dout)
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, (g2.sum(axis=0) if b.requires_grad else None)

    parents = (x, W) if b is None else (x, W, b)
    return _result(out, parents, grad)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``.

    ``logits`` is ``(C,)`` with a scalar label, or ``(B, C)`` with ``B`` labels.
    """
    logits = _as_tensor(logits)
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    lab = np.atleast_1d(np.asarray(labels))
    if lab.dtype.kind not in "iu":
        raise VitalError(f"labels must be integers, got {lab.dtype}")
    n, c = z.shape
    if lab.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {lab.shape}")
    if np.any(lab < 0) or np.any(lab >= c):
        raise VitalError(f"label out of range [0, {c})")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logsum - shifted[rows, lab])

    def grad(g):
        p = np.exp(shifted - logsum[:, None])
        p[rows, lab] -= 1.0
        p *= g / n
        return (p[0] if single else p,)

    return _result(np.asarray(loss, dtype=z.dtype), (logits,), grad)


# ---------------------------------------------------------------------------
# gradient verification


def numeric_gradient(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` with respect to ``param``."""
    flat = param.data.reshape(-1)
    out = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn().data)
        flat[i] = orig - step
        fm = float(fn().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(param.shape)


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` must rebuild the scalar loss from the current contents of ``params``
    each time it is called.  The error per entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    with Tape() as tape:
        loss = fn()
    analytic = tape.gradient(loss, params)
    worst = 0.0
    for p in params:
        a = np.asarray(analytic[p], dtype=np.float64)
        n = numeric_gradient(fn, p, step)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise VitalError(f"non-finite values in {what}")
    return t


def glorot(rng: np.random.Generator, shape: Sequence[int], dtype=np.float64) -> np.ndarray:
    fan_in, fan_out = shape[-2], shape[-1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape)).astype(dtype)
