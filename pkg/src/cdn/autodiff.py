"""Dense-matrix reverse-mode automatic differentiation.

Every value is a 2-D float64 array wrapped in a :class:`Tensor`.  Operations
record themselves on a dynamic tape (each output keeps references to its
parents plus a closure mapping the output gradient to parent gradients); the
tape is rebuilt on every forward pass and freed by :func:`backward`.

Broadcasting is deliberately narrow: a binary elementwise op accepts operands
whose shapes agree except where one side has extent 1 (scalars, row vectors,
column vectors).  That is enough for bias rows and diagonal scalings while
keeping every backward rule easy to audit.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "GraphError",
    "no_grad",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "relu",
    "tanh",
    "exp",
    "log",
    "softplus",
    "sqrt",
    "square",
    "clamp_min",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "log_softmax",
    "log_sum_exp",
    "log_mean_exp",
    "concat",
    "cols",
    "rows",
    "reshape",
    "transpose",
    "tile_rows",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside the mathematical domain of an op."""


class GraphError(RuntimeError):
    """The differentiation graph cannot be traversed as requested."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording the tape (inference, metric passes)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as2d(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"tensors are 2-D matrices, got shape {a.shape}")
    return a


_ids = iter(range(1, 2**62))


class Tensor:
    """A float64 matrix that can take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as2d(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    shape = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            shape.append(da)
        elif da == 1:
            shape.append(db)
        else:
            raise ShapeError(f"{op}: incompatible shapes {a} and {b}")
    return tuple(shape)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    for axis in (0, 1):
        if shape[axis] == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# binary elementwise


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.shape, b.shape, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
        "div",
    )


# ---------------------------------------------------------------------------
# unary elementwise


def neg(a) -> Tensor:
    a = _wrap(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise DomainError("log: input must be strictly positive")
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def softplus(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    # log(1 + e^x) = max(x, 0) + log1p(e^-|x|); the derivative sigmoid(x) reuses e^-|x|
    e = np.exp(-np.abs(ad))
    out = np.maximum(ad, 0.0) + np.log1p(e)
    sig = np.where(ad >= 0, 1.0, e) / (1.0 + e)
    return _node(out, (a,), lambda g: (g * sig,), "softplus")


def sqrt(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: input must be non-negative")
    out = np.sqrt(a.data)

    def fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(out > 0, 0.5 * g / out, 0.0),)

    return _node(out, (a,), fn, "sqrt")


def square(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where the floor is inactive."""
    a = _wrap(a)
    mask = a.data >= floor
    return _node(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,), "clamp_min")


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _node(ad @ bd, (a, b), fn, "matmul")


def _check_axis(axis):
    if axis not in (None, 0, 1):
        raise ShapeError(f"axis must be None, 0 or 1, got {axis!r}")


def reduce_sum(a, axis: Optional[int] = None) -> Tensor:
    a = _wrap(a)
    _check_axis(axis)
    shape = a.shape
    if axis is None:
        out = np.array([[a.data.sum()]])
    else:
        out = a.data.sum(axis=axis, keepdims=True)
    return _node(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def reduce_mean(a, axis: Optional[int] = None) -> Tensor:
    a = _wrap(a)
    _check_axis(axis)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis), 1.0 / n)


def reduce_max(a, axis: Optional[int] = None) -> Tensor:
    """Max reduction; the gradient goes to the first (lowest-index) argmax."""
    a = _wrap(a)
    _check_axis(axis)
    ad = a.data
    if axis is None:
        flat = int(np.argmax(ad))
        out = np.array([[ad.reshape(-1)[flat]]])

        def fn(g):
            d = np.zeros_like(ad)
            d.reshape(-1)[flat] = g[0, 0]
            return (d,)

    else:
        idx = np.argmax(ad, axis=axis)
        out = np.take_along_axis(ad, np.expand_dims(idx, axis), axis=axis)

        def fn(g):
            d = np.zeros_like(ad)
            np.put_along_axis(d, np.expand_dims(idx, axis), g, axis=axis)
            return (d,)

    return _node(out, (a,), fn, "max")


def log_softmax(a) -> Tensor:
    """Row-wise log-softmax with max subtraction."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    soft = np.exp(out)
    return _node(out, (a,), lambda g: (g - soft * g.sum(axis=1, keepdims=True),), "log_softmax")


def log_sum_exp(a, axis: Optional[int] = None) -> Tensor:
    a = _wrap(a)
    _check_axis(axis)
    ad = a.data
    if axis is None:
        m = ad.max()
        out = np.array([[m + np.log(np.exp(ad - m).sum())]])
    else:
        m = ad.max(axis=axis, keepdims=True)
        out = m + np.log(np.exp(ad - m).sum(axis=axis, keepdims=True))
    weights = np.exp(ad - out)
    return _node(out, (a,), lambda g: (g * weights,), "logsumexp")


def log_mean_exp(a, axis: Optional[int] = None) -> Tensor:
    a = _wrap(a)
    n = a.data.size if axis is None else a.shape[axis]
    return sub(log_sum_exp(a, axis), np.log(n))


# ---------------------------------------------------------------------------
# structural


def concat(tensors: Iterable, axis: int = 1) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if axis not in (0, 1):
        raise ShapeError(f"concat axis must be 0 or 1, got {axis!r}")
    other = 1 - axis
    if len({t.shape[other] for t in ts}) != 1:
        raise ShapeError(f"concat: mismatched shapes {[t.shape for t in ts]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def fn(g):
        if axis == 1:
            return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(ts)))
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(ts)))

    return _node(np.concatenate([t.data for t in ts], axis=axis), ts, fn, "concat")


def cols(a, start: int, stop: int) -> Tensor:
    a = _wrap(a)
    shape = a.shape
    if not 0 <= start < stop <= shape[1]:
        raise ShapeError(f"cols: bad range [{start}, {stop}) for shape {shape}")

    def fn(g):
        d = np.zeros(shape)
        d[:, start:stop] = g
        return (d,)

    return _node(a.data[:, start:stop], (a,), fn, "cols")


def rows(a, start: int, stop: int) -> Tensor:
    a = _wrap(a)
    shape = a.shape
    if not 0 <= start < stop <= shape[0]:
        raise ShapeError(f"rows: bad range [{start}, {stop}) for shape {shape}")

    def fn(g):
        d = np.zeros(shape)
        d[start:stop] = g
        return (d,)

    return _node(a.data[start:stop], (a,), fn, "rows")


def reshape(a, shape: tuple) -> Tensor:
    a = _wrap(a)
    old = a.shape
    if len(shape) != 2 or shape[0] * shape[1] != old[0] * old[1]:
        raise ShapeError(f"reshape: cannot view {old} as {shape}")
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a) -> Tensor:
    a = _wrap(a)
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def tile_rows(a, reps: int) -> Tensor:
    """Stack ``reps`` copies of ``a`` vertically (sample-major layout)."""
    a = _wrap(a)
    r, c = a.shape
    return _node(np.tile(a.data, (reps, 1)), (a,), lambda g: (g.reshape(reps, r, c).sum(axis=0),), "tile_rows")


# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    The tape is released afterwards; calling again without a new forward pass
    raises :class:`GraphError`.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a 1x1 loss, got {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed by backward(); run the forward pass again")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")

    order = _topo_order(loss)
    grads = {loss.node_id: np.ones((1, 1))}
    for node in reversed(order):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg

    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node.requires_grad = False
            node._consumed = True
    loss._consumed = True
