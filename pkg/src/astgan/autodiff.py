"""Small reverse-mode autodiff engine over numpy arrays.

Every learnable quantity in the package is a :class:`Value`.  Ops build a
graph of Values as they run; :func:`backward` walks it in reverse
topological order and accumulates gradients into the leaves.

Model math runs in float32.  :func:`precision` switches the working dtype,
which the finite-difference checks use to evaluate in float64.
"""

from __future__ import annotations

import contextlib
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


@contextlib.contextmanager
def precision(dtype):
    """Run the enclosed ops in ``dtype`` (float32 or float64)."""
    global _DTYPE
    old = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; ops return detached Values."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Value:
    __slots__ = ("data", "_grad", "requires_grad", "parents", "op", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), op="", backward=None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self._grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.op = op
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def grad(self):
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    def zero_grad(self):
        self._grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Value(shape={self.data.shape}, op={self.op or 'leaf'})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def const(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _make(data, parents, op, backward):
    parents = tuple(p for p in parents if p.requires_grad)
    if _GRAD_ENABLED and parents:
        return Value(data, True, parents, op, backward)
    return Value(data, False, (), op)


def _accum(v: Value, g):
    if not v.requires_grad:
        return
    if v._grad is None:
        v._grad = np.array(g, dtype=v.data.dtype, copy=True).reshape(v.data.shape)
    else:
        v._grad += g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------- primitives


def add(a, b) -> Value:
    a, b = const(a), const(b)
    _check_broadcast("add", a, b)
    out = None

    def backward():
        _accum(a, _unbroadcast(out.grad, a.shape))
        _accum(b, _unbroadcast(out.grad, b.shape))

    out = _make(a.data + b.data, (a, b), "add", backward)
    return out


def mul(a, b) -> Value:
    a, b = const(a), const(b)
    _check_broadcast("mul", a, b)
    out = None

    def backward():
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(out.grad * a.data, b.shape))

    out = _make(a.data * b.data, (a, b), "mul", backward)
    return out


def matmul(a, b) -> Value:
    """``a @ b`` for a of rank 2 or 3 and b of rank 2."""
    a, b = const(a), const(b)
    if b.data.ndim != 2 or a.data.ndim not in (1, 2, 3) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = None

    def backward():
        g = out.grad
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            a2 = a.data.reshape(-1, a.shape[-1])
            _accum(b, a2.T @ g.reshape(-1, b.shape[1]))

    out = _make(a.data @ b.data, (a, b), "matmul", backward)
    return out


def concat(values, axis=-1) -> Value:
    values = [const(v) for v in values]
    try:
        data = np.concatenate([v.data for v in values], axis=axis)
    except ValueError:
        shapes = " and ".join(str(v.shape) for v in values)
        raise ShapeError(f"concat along axis {axis}: shapes {shapes} do not conform") from None
    sizes = np.cumsum([v.shape[axis] for v in values])[:-1]
    out = None

    def backward():
        for v, g in zip(values, np.split(out.grad, sizes, axis=axis)):
            _accum(v, g)

    out = _make(data, values, "concat", backward)
    return out


def stack(values, axis=0) -> Value:
    values = [const(v) for v in values]
    try:
        data = np.stack([v.data for v in values], axis=axis)
    except ValueError:
        shapes = " and ".join(str(v.shape) for v in values)
        raise ShapeError(f"stack: shapes {shapes} do not conform") from None
    out = None

    def backward():
        for i, v in enumerate(values):
            _accum(v, np.take(out.grad, i, axis=axis))

    out = _make(data, values, "stack", backward)
    return out


def sigmoid(x) -> Value:
    x = const(x)
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    out = None

    def backward():
        _accum(x, out.grad * y * (1.0 - y))

    out = _make(y, (x,), "sigmoid", backward)
    return out


def tanh(x) -> Value:
    x = const(x)
    y = np.tanh(x.data)
    out = None

    def backward():
        _accum(x, out.grad * (1.0 - y * y))

    out = _make(y, (x,), "tanh", backward)
    return out


def relu(x) -> Value:
    x = const(x)
    y = np.maximum(x.data, 0)
    out = None

    def backward():
        _accum(x, out.grad * (x.data > 0))

    out = _make(y, (x,), "relu", backward)
    return out


def softmax(x, axis=-1, mask=None) -> Value:
    """Softmax along ``axis``; entries where ``mask`` is False get exactly 0."""
    x = const(x)
    d = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), d.shape)
        d = np.where(mask, d, -np.inf)
    m = np.max(d, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    e = np.exp(d - m)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = None

    def backward():
        g = out.grad
        _accum(x, y * (g - np.sum(g * y, axis=axis, keepdims=True)))

    out = _make(y, (x,), "softmax", backward)
    return out


def log_softmax(x, axis=-1) -> Value:
    x = const(x)
    d = x.data
    m = np.max(d, axis=axis, keepdims=True)
    lse = m + np.log(np.sum(np.exp(d - m), axis=axis, keepdims=True))
    y = d - lse
    out = None

    def backward():
        g = out.grad
        _accum(x, g - np.exp(y) * np.sum(g, axis=axis, keepdims=True))

    out = _make(y, (x,), "log_softmax", backward)
    return out


def log(x) -> Value:
    x = const(x)
    if np.any(x.data <= 0):
        bad = float(x.data[x.data <= 0].flat[0])
        raise DomainError(f"log: non-positive entry {bad} in input of shape {x.shape}")
    out = None

    def backward():
        _accum(x, out.grad / x.data)

    out = _make(np.log(x.data), (x,), "log", backward)
    return out


def sum(x, axis=None, keepdims=False) -> Value:  # noqa: A001
    x = const(x)
    out = None

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    out = _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), "sum", backward)
    return out


def mean(x, axis=None, keepdims=False) -> Value:
    x = const(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def embedding_lookup(table, ids) -> Value:
    """Rows of ``table`` at integer ``ids`` (any shape); result shape ids.shape + (dim,)."""
    table = const(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table shape {table.shape} is not rank 2")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: ids out of range for table shape {table.shape}")
    out = None

    def backward():
        g = np.zeros_like(table.data)
        np.add.at(g, ids.reshape(-1), out.grad.reshape(-1, table.shape[1]))
        _accum(table, g)

    out = _make(table.data[ids], (table,), "embedding_lookup", backward)
    return out


def slice(x, index) -> Value:  # noqa: A001
    """``x[index]`` for basic indices (ints, slices)."""
    x = const(x)
    out = None

    def backward():
        g = np.zeros_like(x.data)
        g[index] += out.grad
        _accum(x, g)

    try:
        data = x.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: index {index!r} invalid for shape {x.shape}") from exc
    out = _make(np.array(data), (x,), "slice", backward)
    return out


def pick(x, idx) -> Value:
    """Row-wise gather: ``out[b] = x[b, idx[b]]`` for x of shape (B, n, ...)."""
    x = const(x)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])
    if idx.shape != (x.shape[0],):
        raise ShapeError(f"pick: index shape {idx.shape} does not match input shape {x.shape}")
    out = None

    def backward():
        g = np.zeros_like(x.data)
        g[rows, idx] = out.grad
        _accum(x, g)

    out = _make(x.data[rows, idx], (x,), "pick", backward)
    return out


def take_rows(x, idx) -> Value:
    """``x[idx]`` along axis 0 with an integer index array (repeats allowed)."""
    x = const(x)
    idx = np.asarray(idx, dtype=np.int64)
    out = None

    def backward():
        g = np.zeros_like(x.data)
        np.add.at(g, idx, out.grad)
        _accum(x, g)

    out = _make(x.data[idx], (x,), "take_rows", backward)
    return out


def gather_steps(values, idx) -> Value:
    """``out[b] = values[idx[b]][b]`` for a list of equally shaped (B, ...) Values."""
    values = [const(v) for v in values]
    idx = np.asarray(idx, dtype=np.int64)
    data = np.stack([values[k].data[b] for b, k in enumerate(idx)])
    out = None

    def backward():
        for b, k in enumerate(idx):
            v = values[k]
            if v.requires_grad:
                g = np.zeros_like(v.data)
                g[b] = out.grad[b]
                _accum(v, g)

    out = _make(data, values, "gather_steps", backward)
    return out


def reshape(x, shape) -> Value:
    x = const(x)
    out = None

    def backward():
        _accum(x, out.grad.reshape(x.shape))

    out = _make(x.data.reshape(shape), (x,), "reshape", backward)
    return out


# ------------------------------------------------------------------ backward


def _topo(root: Value):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Value) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf."""
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo(root)
    root._grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node._grad is not None:
            node._backward()
    # free intermediate buffers; leaves keep theirs
    for node in order:
        if node.parents:
            node._grad = None


# ----------------------------------------------------------- parameter store


class ParameterStore:
    """Insertion-ordered named parameters plus the seed they were drawn with."""

    def __init__(self, rng_seed: int = 0):
        self.entries: OrderedDict[str, Value] = OrderedDict()
        self.rng_seed = int(rng_seed)

    def add(self, name: str, data) -> Value:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        v = data if isinstance(data, Value) else Value(data)
        v.requires_grad = True
        self.entries[name] = v
        return v

    def __getitem__(self, name) -> Value:
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def zero_grad(self):
        for v in self.entries.values():
            v.zero_grad()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.entries.items()}

    def load_arrays(self, arrays):
        for k, arr in arrays.items():
            v = self.entries[k]
            if v.data.shape != arr.shape:
                raise ShapeError(f"parameter {k}: stored shape {arr.shape} != model shape {v.shape}")
            v.data = np.array(arr, dtype=np.float32)


def xavier_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> Value:
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"xavier_uniform: fan_in={fan_in}, fan_out={fan_out} must be >= 1")
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Value(rng.uniform(-a, a, size=shape).astype(np.float32), requires_grad=True)


# ---------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParameterStore, **hyper) -> "AdamState":
        st = cls(**hyper)
        for k, p in params.items():
            st.m[k] = np.zeros_like(p.data)
            st.v[k] = np.zeros_like(p.data)
        return st


def adam_step(params: ParameterStore, state: AdamState) -> None:
    """One bias-corrected Adam update in place, then zero the gradients."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, p in params.items():
        if k not in state.m:
            raise RuntimeError(f"adam_step: no optimizer state for parameter {k!r}")
        g = p._grad
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(np.float32)
    params.zero_grad()
