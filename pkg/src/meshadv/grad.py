"""Define-by-run reverse-mode differentiation over dense float64 arrays.

Operations on :class:`Tensor` objects are recorded on the active
:class:`Tape` whenever at least one input requires a gradient. Each record
stores the inputs, the output and a vector-Jacobian-product rule, in
execution order, so the reverse sweep is a plain walk backwards over the
record list::

    with Tape() as tape:
        x = Tensor(np.arange(3.0), requires_grad=True)
        y = (x * x).sum()
    grads = tape.backward(y)
    grads[x]  # -> 2 * x

One tape per thread: the active tape lives in thread-local storage.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import NonFiniteValue, NonScalarRoot, ShapeMismatch

__all__ = [
    "Tape", "Tensor", "Adam", "backward", "as_tensor",
    "add", "sub", "mul", "div", "neg", "matmul", "linear", "spmatmul", "relu",
    "max", "min", "sum", "mean", "square", "sqrt", "exp", "log", "abs",
    "concat", "index", "permute_rows", "reshape", "broadcast_to", "transpose",
]

_state = threading.local()

SQRT_EPS = 1e-12
# matmul backprop switches to sparse products below these non-zero fractions
_SPARSE_ENTRY_FRACTION = 0.02
_SPARSE_ROW_FRACTION = 0.85


def _active_tape() -> Tape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive operations.

    Entering the tape as a context manager makes it the recording target for
    the current thread. Leaves created with ``requires_grad=True`` while the
    tape is active are registered automatically; leaves created earlier can
    be registered with :meth:`watch`.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.leaves: list[Tensor] = []

    def __enter__(self) -> Tape:
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            t.requires_grad = True
            if not any(t is leaf for leaf in self.leaves):
                self.leaves.append(t)

    def backward(self, root: Tensor) -> dict[Tensor, np.ndarray]:
        """Reverse sweep from a scalar ``root``.

        Returns a mapping leaf -> gradient for every registered leaf (leaves
        the root does not depend on get exact zeros) and sets ``leaf.grad``.
        """
        if root.value.size != 1:
            raise NonScalarRoot(f"backward needs a scalar root, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
        for out, parents, vjp in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        result = {}
        for leaf in self.leaves:
            g = grads.get(id(leaf))
            leaf.grad = np.zeros_like(leaf.value) if g is None else np.asarray(g).reshape(leaf.shape)
            result[leaf] = leaf.grad
        return result


def backward(tape: Tape, root: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(root)


def _check_finite(value: np.ndarray, name: str) -> None:
    # the sum is a cheap screen; overflow there triggers the exact test
    with np.errstate(over="ignore", invalid="ignore"):
        total = value.sum()
    if not np.isfinite(total) and not np.isfinite(value).all():
        raise NonFiniteValue(f"non-finite value produced by '{name}'")


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, name: str = "leaf"):
        value = np.array(value, dtype=np.float64)
        _check_finite(value, name)
        self.value = value
        self.requires_grad = bool(requires_grad)
        self.grad = None
        if requires_grad:
            tape = _active_tape()
            if tape is not None:
                tape.leaves.append(self)

    @classmethod
    def _result(cls, value, parents: Sequence[Tensor], vjp: Callable, name: str) -> Tensor:
        _check_finite(value, name)
        out = cls.__new__(cls)
        out.value = value
        out.grad = None
        tape = _active_tape()
        if tape is not None and any(p.requires_grad for p in parents):
            out.requires_grad = True
            tape.nodes.append((out, tuple(parents), vjp))
        else:
            out.requires_grad = False
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else self.value.item()

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> Tensor:
        return Tensor(self.value)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, key: index(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# elementwise binary

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)
    return Tensor._result(a.value + b.value, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)
    return Tensor._result(a.value - b.value, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def vjp(g):
        return (_unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.value, b.shape) if b.requires_grad else None)
    return Tensor._result(a.value * b.value, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.value / b.value

    def vjp(g):
        ga = _unbroadcast(g / b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.value, b.shape) if b.requires_grad else None
        return ga, gb
    return Tensor._result(out, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.value, (a,), lambda g: (-g,), "neg")


# linear algebra

def _matmul_vjp(a: Tensor, b: Tensor):
    def vjp(g):
        k, p = b.shape
        g2 = g.reshape(-1, p)
        a2 = a.value.reshape(-1, k)
        if g2.size > 4096 and np.count_nonzero(g2) < _SPARSE_ENTRY_FRACTION * g2.size:
            nz = np.flatnonzero(g2)
            r, c = np.divmod(nz, p)
            gs = sp.csr_matrix((g2.ravel()[nz], (r, c)), shape=g2.shape)
            ga = np.asarray(gs @ b.value.T).reshape(a.shape) if a.requires_grad else None
            gb = np.asarray((gs.T @ a2).T) if b.requires_grad else None
            return ga, gb
        rows = None
        if g2.shape[0] > 8:
            live = np.flatnonzero(g2.any(axis=1))
            if live.size < _SPARSE_ROW_FRACTION * g2.shape[0]:
                rows = live
        ga = gb = None
        if a.requires_grad:
            if rows is None:
                ga = (g2 @ b.value.T).reshape(a.shape)
            else:
                ga = np.zeros_like(a2)
                ga[rows] = g2[rows] @ b.value.T
                ga = ga.reshape(a.shape)
        if b.requires_grad:
            gb = a2.T @ g2 if rows is None else a2[rows].T @ g2[rows]
        return ga, gb
    return vjp


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., k) and a 2-D ``b`` of shape (k, p)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return Tensor._result(a.value @ b.value, (a, b), _matmul_vjp(a, b), "matmul")


def linear(x, w, b) -> Tensor:
    """Affine map ``x @ w + b`` with ``w`` of shape (k, p) and ``b`` of shape (p,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"linear: cannot apply {w.shape} weights and {b.shape} bias to {x.shape}")
    out = x.value @ w.value
    out += b.value
    mm = _matmul_vjp(x, w)

    def vjp(g):
        ga, gw = mm(g)
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if b.requires_grad else None
        return ga, gw, gb
    return Tensor._result(out, (x, w, b), vjp, "linear")


def linear_relu_max(x, w, b) -> Tensor:
    """``max(relu(linear(x, w, b)), axis=-2)`` for ``x`` of shape (..., n, k).

    Relu and the bias shift are monotone, so the pool is taken on ``x @ w``
    first. Gradients reach only the lowest-index maximizing point of each
    output channel, and only where the pooled value is positive.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim < 2 or w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"linear_relu_max: cannot apply {w.shape} weights to {x.shape}")
    n, k = x.shape[-2:]
    p = w.shape[1]
    x3 = x.value.reshape(-1, n, k)
    B = x3.shape[0]
    zt = np.matmul(w.value.T, x3.transpose(0, 2, 1))  # (B, p, n), points contiguous
    idx = np.argmax(zt, axis=2)
    zmax = np.take_along_axis(zt, idx[..., None], axis=2)[..., 0] + b.value
    out = np.maximum(zmax, 0.0)

    def vjp(g):
        g2 = g.reshape(B, p) * (zmax > 0)
        ga = gw = gb = None
        if x.requires_grad:
            ga = np.empty((B, n, k))
            cols = np.arange(p)
            wt = w.value.T
            for i in range(B):
                S = sp.csr_matrix((g2[i], (idx[i], cols)), shape=(n, p))
                ga[i] = S @ wt
            ga = ga.reshape(x.shape)
        if w.requires_grad:
            rows = x3[np.arange(B)[:, None], idx]  # (B, p, k)
            gw = np.einsum("bpk,bp->kp", rows, g2)
        if b.requires_grad:
            gb = g2.sum(axis=0)
        return ga, gw, gb
    return Tensor._result(out.reshape(x.shape[:-2] + (p,)), (x, w, b), vjp, "linear_relu_max")


def spmatmul(S, x) -> Tensor:
    """Constant (sparse or dense) matrix times a tensor: ``S @ x``."""
    x = as_tensor(x)
    if S.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"spmatmul: cannot multiply {S.shape} by {x.shape}")
    out = np.asarray(S @ x.value)
    St = S.T.tocsr() if sp.issparse(S) else S.T

    def vjp(g):
        return (np.asarray(St @ g),)
    return Tensor._result(out, (x,), vjp, "spmatmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(a.value.T, (a,), lambda g: (g.T,), "transpose")


# elementwise unary

def relu(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.maximum(a.value, 0.0), (a,), lambda g: (g * (a.value > 0),), "relu")


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(a.value * a.value, (a,), lambda g: (2.0 * a.value * g,), "square")


def sqrt(a, eps: float = SQRT_EPS) -> Tensor:
    """Square root whose derivative denominator is guarded by ``eps``."""
    a = as_tensor(a)
    if (a.value < 0).any():
        raise NonFiniteValue("non-finite value produced by 'sqrt' (negative input)")
    out = np.sqrt(a.value)
    return Tensor._result(out, (a,), lambda g: (0.5 * g / np.sqrt(np.maximum(a.value, eps)),), "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.value)
    return Tensor._result(out, (a,), lambda g: (g / a.value,), "log")


def abs(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.value)
    return Tensor._result(np.abs(a.value), (a,), lambda g: (g * sign,), "abs")


# reductions

def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return Tensor._result(np.asarray(out), (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis, keepdims), 1.0 / count)


def max(a, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the lowest arg-max index only."""
    a = as_tensor(a)
    if axis is None:
        flat = int(np.argmax(a.value))
        out = a.value.reshape(-1)[flat]
        out = np.full((1,) * a.ndim, out) if keepdims else np.asarray(out)

        def vjp(g):
            ga = np.zeros(a.value.size)
            ga[flat] = np.asarray(g).reshape(-1)[0]
            return (ga.reshape(a.shape),)
        return Tensor._result(out, (a,), vjp, "max")

    axis = axis % a.ndim
    out = np.max(a.value, axis=axis, keepdims=True)

    def vjp(g):
        # first position equal to the maximum, i.e. the lowest arg-max index
        idx = np.expand_dims(np.argmax(a.value == out, axis=axis), axis)
        if not keepdims:
            g = np.expand_dims(g, axis)
        ga = np.zeros_like(a.value)
        np.put_along_axis(ga, idx, g, axis=axis)
        return (ga,)
    value = out if keepdims else np.squeeze(out, axis)
    return Tensor._result(value, (a,), vjp, "max")


def min(a, axis=None, keepdims: bool = False) -> Tensor:
    return neg(max(neg(a), axis, keepdims))


# structural

def permute_rows(a, order) -> Tensor:
    """Reorder axis -2 of ``a`` by ``order`` (same shape as ``a`` minus the last axis)."""
    a = as_tensor(a)
    idx = np.asarray(order)[..., None]

    def vjp(g):
        ga = np.empty_like(a.value)
        np.put_along_axis(ga, idx, g, axis=-2)
        return (ga,)
    return Tensor._result(np.take_along_axis(a.value, idx, axis=-2), (a,), vjp, "permute_rows")


def index(a, key) -> Tensor:
    """``a[key]`` for basic or advanced numpy indexing."""
    a = as_tensor(a)
    out = a.value[key]
    keys = key if isinstance(key, tuple) else (key,)
    advanced = any(isinstance(k, (np.ndarray, list)) for k in keys)

    def vjp(g):
        ga = np.zeros_like(a.value)
        if advanced:
            np.add.at(ga, key, g)
        else:
            ga[key] = g
        return (ga,)
    return Tensor._result(np.array(out, dtype=np.float64), (a,), vjp, "index")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))
    return Tensor._result(out, tensors, vjp, "concat")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape: {exc}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.value, shape).copy()
    except ValueError as exc:
        raise ShapeMismatch(f"broadcast_to: {exc}") from None
    return Tensor._result(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


class Adam:
    """Adam over a list of leaf tensors; updates ``param.value`` out of place."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            step = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.value = p.value - step

    def state(self) -> dict:
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = [np.array(m, dtype=np.float64) for m in state["m"]]
        self.v = [np.array(v, dtype=np.float64) for v in state["v"]]
