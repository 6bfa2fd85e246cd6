"""Reverse-mode automatic differentiation over dense numpy arrays.

Every tensor produced by an operation records its parents and a backward
closure.  Tensors receive a monotonically increasing id on creation, so the
creation order is a valid topological order of the (dynamic) tape; `backward`
simply walks the reachable nodes by descending id.

Broadcasting is deliberately limited to scalar-tensor and matching-shape
operations.  The few places that need a row vector added to a matrix go
through `linear`, which is an explicit op.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "zeros",
    "no_grad",
    "is_grad_enabled",
    "set_default_dtype",
    "get_default_dtype",
    "backward",
    "Graph",
    "make_node",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "bmm",
    "linear",
    "transpose",
    "reshape",
    "concat",
    "stack",
    "take_rows",
    "tsum",
    "mean",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "elementwise_pow",
    "softmax",
    "log_softmax",
    "logsumexp",
    "finite_difference_check",
]

_ids = itertools.count()
_state = threading.local()
_default_dtype = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for new tensors (float64 or float32)."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A dense array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "op", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or _default_dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._id = next(_ids)
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
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
        if self.data.size != 1:
            raise ValueError("only single-element tensors can be converted to a Python scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return elementwise_pow(self, exponent)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_default_dtype), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


GradOf = Callable[[Tensor], "np.ndarray | None"]


def make_node(data: np.ndarray, parents: Sequence[Tensor], bw: Callable[[np.ndarray, GradOf], None], op: str) -> Tensor:
    """Wrap `data` as the output of an operation.

    `bw(g, grad_of)` receives the upstream gradient and a function that
    returns the mutable gradient accumulator of a parent (or None when the
    parent does not need one); it must add its contributions in place.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._id = next(_ids)
    out.op = op
    out.name = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bw
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


class Graph:
    """Operation records reachable from a root, in topological order.

    Inputs always precede the nodes that consume them.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        seen = {id(root)}
        nodes = [root]
        stack = [root]
        while stack:
            node = stack.pop()
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    nodes.append(p)
                    stack.append(p)
        nodes.sort(key=lambda t: t._id)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def records(self) -> list[tuple[str, list[int], int]]:
        """(op, parent positions, own position) for every node."""
        pos = {id(t): i for i, t in enumerate(self.nodes)}
        return [(t.op, [pos[id(p)] for p in t._parents if id(p) in pos], i) for i, t in enumerate(self.nodes)]


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(t) into `t.grad` for every reachable t needing it."""
    if root.data.size != 1:
        raise ValueError(f"backward requires a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    nodes = Graph.trace(root).nodes[::-1]

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}

    def grad_of(t: Tensor):
        if not t.requires_grad:
            return None
        g = grads.get(id(t))
        if g is None:
            g = np.zeros_like(t.data)
            grads[id(t)] = g
        return g

    for node in nodes:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            node._backward(g, grad_of)
        if node.grad is None:
            node.grad = g
        else:
            node.grad = node.grad + g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _check_same_or_scalar(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar(a, b, "add")

    def bw(g, grad_of):
        ga, gb = grad_of(a), grad_of(b)
        if ga is not None:
            ga += _reduce_to(g, a)
        if gb is not None:
            gb += _reduce_to(g, b)

    return make_node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar(a, b, "sub")

    def bw(g, grad_of):
        ga, gb = grad_of(a), grad_of(b)
        if ga is not None:
            ga += _reduce_to(g, a)
        if gb is not None:
            gb -= _reduce_to(g, b)

    return make_node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar(a, b, "mul")

    def bw(g, grad_of):
        ga, gb = grad_of(a), grad_of(b)
        if ga is not None:
            ga += _reduce_to(g * b.data, a)
        if gb is not None:
            gb += _reduce_to(g * a.data, b)

    return make_node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar(a, b, "div")
    out = a.data / b.data

    def bw(g, grad_of):
        ga, gb = grad_of(a), grad_of(b)
        if ga is not None:
            ga += _reduce_to(g / b.data, a)
        if gb is not None:
            gb -= _reduce_to(g * out / b.data, b)

    return make_node(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    def bw(g, grad_of):
        ga = grad_of(a)
        if ga is not None:
            ga -= g

    return make_node(-a.data, (a,), bw, "neg")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a: Tensor, w: Tensor) -> Tensor:
    """x[..., k] @ w[k, n] -> [..., n]."""
    if w.ndim != 2 or a.shape[-1] != w.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {w.shape}")

    def bw(g, grad_of):
        ga, gw = grad_of(a), grad_of(w)
        if ga is not None:
            ga += g @ w.data.T
        if gw is not None:
            k, n = w.shape
            gw += a.data.reshape(-1, k).T @ g.reshape(-1, n)

    return make_node(a.data @ w.data, (a, w), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x[..., k] @ w[k, n] + b[n]."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"linear: incompatible shapes {x.shape}, {w.shape}, {b.shape}")

    def bw(g, grad_of):
        gx, gw, gb = grad_of(x), grad_of(w), grad_of(b)
        k, n = w.shape
        if gx is not None:
            gx += g @ w.data.T
        if gw is not None:
            gw += x.data.reshape(-1, k).T @ g.reshape(-1, n)
        if gb is not None:
            gb += g.reshape(-1, n).sum(axis=0)

    return make_node(x.data @ w.data + b.data, (x, w, b), bw, "linear")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul a[B, m, k] @ b[B, k, n]."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"bmm: incompatible shapes {a.shape} @ {b.shape}")

    def bw(g, grad_of):
        ga, gb = grad_of(a), grad_of(b)
        if ga is not None:
            ga += g @ b.data.transpose(0, 2, 1)
        if gb is not None:
            gb += a.data.transpose(0, 2, 1) @ g

    return make_node(a.data @ b.data, (a, b), bw, "bmm")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g, grad_of):
        ga = grad_of(a)
        if ga is not None:
            ga += g.transpose(inv)

    return make_node(a.data.transpose(axes), (a,), bw, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g, grad_of):
        ga = grad_of(a)
        if ga is not None:
            ga += g.reshape(a.shape)

    return make_node(a.data.reshape(shape), (a,), bw, "reshape")


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def index(a: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing; gradients scatter back (summing repeats)."""
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    fancy = _is_fancy(idx)

    def bw(g, grad_of):
        ga = grad_of(a)
        if ga is None:
            return
        if fancy:
            np.add.at(ga, idx, g)
        else:
            ga[idx] += g

    out = a.data[idx]
    if not fancy:
        out = np.array(out, copy=True)
    return make_node(np.asarray(out), (a,), bw, "index")


def take_rows(table: Tensor, ids) -> Tensor:
    """Row lookup table[ids] for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for table with {table.shape[0]} rows")

    def bw(g, grad_of):
        gt = grad_of(table)
        if gt is not None:
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))

    return make_node(table.data[ids], (table,), bw, "take_rows")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g, grad_of):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            gt = grad_of(t)
            if gt is not None:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                gt += g[tuple(sl)]

    return make_node(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def bw(g, grad_of):
        for i, t in enumerate(tensors):
            gt = grad_of(t)
            if gt is not None:
                gt += np.take(g, i, axis=ax)

    return make_node(out, tensors, bw, "stack")


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g, grad_of):
        ga = grad_of(a)
        if ga is None:
            return
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        ga += np.broadcast_to(g, a.shape)

    return make_node(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor) -> Tensor:
    return tsum(a) * (1.0 / a.size)


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g, grad_of):
        ga = grad_of(a)
        if ga is not None:
            ga += g * out

    return make_node(out, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        out = np.log(a.data)

    def bw(g, grad_of):
        ga = grad_of(a)
        if ga is not None:
            ga += g / a.data

    return make_node(out, (a,), bw, "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g, grad_of):
        ga = grad_of(a)
        if ga is not None:
            ga += g * (1.0 - out * out)

    return make_node(out, (a,), bw, "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form cannot overflow
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)

    def bw(g, grad_of):
        ga = grad_of(a)
        if ga is not None:
            ga += g * out * (1.0 - out)

    return make_node(out, (a,), bw, "sigmoid")


def elementwise_pow(t: Tensor, exponent: float) -> Tensor:
    """t ** exponent with the convention d/dt = 0 where t == 0 and exponent > 1."""
    exponent = float(exponent)
    if not exponent.is_integer() and np.any(t.data < 0):
        raise ValueError("elementwise_pow: negative base with fractional exponent")
    out = np.power(t.data, exponent)

    def bw(g, grad_of):
        gt = grad_of(t)
        if gt is None:
            return
        if exponent == 0.0:
            return
        with np.errstate(divide="ignore", invalid="ignore"):
            d = exponent * np.power(t.data, exponent - 1.0)
        if exponent > 1.0:
            d = np.where(t.data == 0, 0.0, d)
        gt += g * d

    return make_node(out, (t,), bw, "pow")


# ---------------------------------------------------------------------------
# normalizers


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite logits")


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    x = logits.data
    _check_finite(x)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, grad_of):
        gl = grad_of(logits)
        if gl is not None:
            gl += out * (g - (g * out).sum(axis=axis, keepdims=True))

    return make_node(out, (logits,), bw, "softmax")


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    x = logits.data
    _check_finite(x)
    z = x - x.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g, grad_of):
        gl = grad_of(logits)
        if gl is not None:
            gl += g - np.exp(out) * g.sum(axis=axis, keepdims=True)

    return make_node(out, (logits,), bw, "log_softmax")


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    with np.errstate(invalid="ignore"):
        out = (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)

    def bw(g, grad_of):
        ga = grad_of(a)
        if ga is not None:
            ga += np.expand_dims(g, axis) * np.exp(x - np.expand_dims(out, axis))

    return make_node(out, (a,), bw, "logsumexp")


# ---------------------------------------------------------------------------
# gradient check


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    stencil: int = 2,
    rel_floor: float = 0.0,
) -> float:
    """Compare backward() gradients of scalar f at x against central differences.

    `stencil` selects the 2-point or the 4-point (fourth-order) central
    difference.  Returns the max entrywise relative error with denominator
    max(|a|, |b|, 1e-8, rel_floor * max|b|): entries far below the
    gradient's scale are judged relative to that scale, since their finite
    differences are dominated by roundoff in f.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if stencil not in (2, 4):
        raise ValueError("stencil must be 2 or 4")
    x0 = np.array(x.data, dtype=np.float64, copy=True)
    probe = Tensor(x0, requires_grad=True)
    out = f(probe)
    backward(out)
    analytic = np.zeros_like(x0) if probe.grad is None else np.asarray(probe.grad, dtype=np.float64)

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    base = x0.reshape(-1)
    with no_grad():
        def at(i, step):
            xs = base.copy()
            xs[i] += step
            return f(Tensor(xs.reshape(x0.shape))).item()

        for i in range(base.size):
            if stencil == 2:
                flat[i] = (at(i, eps) - at(i, -eps)) / (2.0 * eps)
            else:
                flat[i] = (at(i, -2 * eps) - 8 * at(i, -eps) + 8 * at(i, eps) - at(i, 2 * eps)) / (12.0 * eps)

    floor = max(1e-8, rel_floor * float(np.abs(numeric).max())) if numeric.size else 1e-8
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = np.abs(analytic - numeric) / denom
    return float(err.max()) if err.size else 0.0


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)
