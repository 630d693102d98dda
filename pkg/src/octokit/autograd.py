"""A small reverse-mode autodiff engine over numpy arrays.

Only the primitives the policy and the training losses need are provided.
Applying a numpy ufunc directly to a ``Tensor`` raises ``UnsupportedPrimitive``
instead of silently dropping the graph.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np


class UnsupportedPrimitive(TypeError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, parents: Sequence["Tensor"] = (),
                 backward: Callable | None = None):
        self.data = np.asarray(data, dtype=float)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        raise UnsupportedPrimitive(f"numpy ufunc {ufunc.__name__} is not differentiable here")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar output")
        order: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
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
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return add(self, neg(as_tensor(o)))

    def __rsub__(self, o):
        return add(as_tensor(o), neg(self))

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return index(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _make(data, parents, backward) -> Tensor:
    parents = tuple(p for p in parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, g)
        _accum(b, g)
    return _make(a.data + b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: _accum(a, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    return _make(a.data * b.data, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ad, bd = a.data, b.data
        if a.requires_grad:
            _accum(a, g @ bd.T if bd.ndim == 2 else (np.outer(g, bd) if ad.ndim == 2 else g * bd))
        if b.requires_grad:
            _accum(b, ad.T @ g if ad.ndim == 2 else (np.outer(ad, g) if bd.ndim == 2 else g * ad))
    return _make(a.data @ b.data, (a, b), bw)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: _accum(a, g * (1.0 - y * y)))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: _accum(a, g * y))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: _accum(a, g / a.data))


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.data.shape

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, shape))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), shape))
    return _make(a.data.sum(axis=axis), (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def index(a, idx) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)
    return _make(a.data[idx], (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(old)))


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        for p, gp in zip(parts, np.split(g, cuts, axis=axis)):
            _accum(p, gp)
    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def embedding(table, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids``."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        _accum(table, full)
    return _make(table.data[ids], (table,), bw)


def log_softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Log-softmax over the last axis; masked-out entries get ``-inf`` and no gradient."""
    a = as_tensor(a)
    x = a.data
    if mask is None:
        m = x.max(axis=-1, keepdims=True)
        lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
        y = x - lse
        p = np.exp(y)

        def bw(g):
            _accum(a, g - p * g.sum(axis=-1, keepdims=True))
        return _make(y, (a,), bw)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("every row needs at least one allowed entry")
    z = np.where(mask, x, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.where(mask, np.exp(np.where(mask, y, 0.0)), 0.0)

    def bw(g):
        gm = np.where(mask, g, 0.0)
        _accum(a, np.where(mask, gm - p * gm.sum(axis=-1, keepdims=True), 0.0))
    return _make(y, (a,), bw)


def gather(a, ids) -> Tensor:
    """``a[..., ids]`` picking one entry per leading index (last axis)."""
    a = as_tensor(a)
    ids = np.asarray(ids, dtype=np.int64)
    lead = np.indices(ids.shape)
    sel = tuple(lead) + (ids,)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, sel, g)
        _accum(a, full)
    return _make(a.data[sel], (a,), bw)


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    left = a.data <= b.data

    def bw(g):
        _accum(a, np.where(left, g, 0.0))
        _accum(b, np.where(left, 0.0, g))
    return _make(np.where(left, a.data, b.data), (a, b), bw)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; values exactly on a bound keep their gradient."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: _accum(a, np.where(inside, g, 0.0)))


def detach(a) -> Tensor:
    return Tensor(as_tensor(a).data.copy())


def grad(params: Mapping[str, np.ndarray], loss_fn: Callable[[dict], Tensor]) -> tuple[float, dict]:
    """Value and gradient of ``loss_fn`` with respect to every array in ``params``."""
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    out = loss_fn(leaves)
    if not isinstance(out, Tensor):
        raise UnsupportedPrimitive("loss closure must return a Tensor built from supported ops")
    out.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return float(out.data), grads
