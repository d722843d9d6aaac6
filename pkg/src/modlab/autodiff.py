"""Tape-based reverse-mode differentiation over numpy arrays.

Every differentiable op appends its output node to the tape of its inputs.
Nodes are appended in creation order, which is already a topological order,
so :meth:`Tape.backward` walks the list once in reverse.

    tape = Tape()
    w = tape.param("w", np.ones((3, 2)))
    loss = (Var(x) @ w).sum()
    grads = tape.backward(loss)     # {"w": array of shape (3, 2)}

An :class:`OpCounter` can be activated to tally floating point operations of
everything evaluated inside it (matmul = 2 FLOPs per multiply-accumulate,
elementwise ops one per output element, a few fused ops weighted higher).
"""

from __future__ import annotations

import contextlib
from collections import defaultdict

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "Var", "Tape", "OpCounter", "flop_scope", "constant",
    "matmul", "add", "mul", "exp", "log", "tanh", "clip", "softmax",
    "layer_norm", "gelu", "embedding", "scatter_add", "cross_entropy", "concat",
]

# Relative cost, in FLOPs per output element, of fused elementwise kernels.
SOFTMAX_FLOPS = 4
LAYER_NORM_FLOPS = 6

_counters: list["OpCounter"] = []
_scopes: list[str] = []


class OpCounter:
    """Context manager accumulating FLOPs per scope label."""

    def __init__(self):
        self.by_scope: dict[str, float] = defaultdict(float)
        self.by_kind: dict[str, float] = defaultdict(float)

    def __enter__(self):
        _counters.append(self)
        return self

    def __exit__(self, *exc):
        _counters.remove(self)
        return False

    @property
    def total(self) -> float:
        return float(sum(self.by_scope.values()))

    def scope_total(self, prefix: str) -> float:
        return float(sum(v for k, v in self.by_scope.items() if k.startswith(prefix)))


@contextlib.contextmanager
def flop_scope(name: str):
    _scopes.append(name)
    try:
        yield
    finally:
        _scopes.pop()


def _count(kind: str, n) -> None:
    if not _counters:
        return
    scope = _scopes[-1] if _scopes else "other"
    for c in _counters:
        c.by_scope[scope] += float(n)
        c.by_kind[kind] += float(n)


class Var:
    __slots__ = ("value", "grad", "tape", "name", "_backward")

    def __init__(self, value, tape: "Tape | None" = None, name: str | None = None):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value, dtype=np.float64)
        self.grad = None
        self.tape = tape
        self.name = name
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape}, tracked={self.tape is not None})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(constant(other)))

    def __rsub__(self, other):
        return add(constant(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def constant(x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=np.float64))


class Tape:
    """Records differentiable ops for one forward pass."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.params: dict[str, Var] = {}

    def param(self, name: str, value: np.ndarray) -> Var:
        if name in self.params:
            return self.params[name]
        v = Var(value, tape=self, name=name)
        self.params[name] = v
        return v

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Propagate adjoints from scalar ``loss``; returns gradients by parameter name."""
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        if loss.tape is not self:
            raise NumericError("loss was not recorded on this tape")
        for node in self.nodes:
            node.grad = None
        for p in self.params.values():
            p.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is not None:
                node._backward(node.grad)
        grads = {}
        for name, p in self.params.items():
            g = np.zeros_like(p.value) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            grads[name] = g
        return grads


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else constant(x)


def _tape_of(*vs: Var):
    for v in vs:
        if v.tape is not None:
            return v.tape
    return None


def _emit(value: np.ndarray, parents: tuple[Var, ...], backward) -> Var:
    tape = _tape_of(*parents)
    out = Var(value, tape)
    if tape is not None:
        out._backward = backward
        tape.nodes.append(out)
    return out


def _accumulate(v: Var, g: np.ndarray) -> None:
    if v.tape is None:
        return
    if v.grad is None:
        v.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        v.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    out_value = a.value + b.value
    _count("elementwise", out_value.size)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _emit(out_value, (a, b), backward)


def neg(a) -> Var:
    a = _as_var(a)

    def backward(g):
        _accumulate(a, -g)

    return _emit(-a.value, (a,), backward)


def mul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    out_value = a.value * b.value
    _count("elementwise", out_value.size)

    def backward(g):
        if a.tape is not None:
            _accumulate(a, _unbroadcast(g * b.value, a.shape))
        if b.tape is not None:
            _accumulate(b, _unbroadcast(g * a.value, b.shape))

    return _emit(out_value, (a, b), backward)


def exp(a) -> Var:
    a = _as_var(a)
    y = np.exp(a.value)
    _count("activation", y.size)
    return _emit(y, (a,), lambda g: _accumulate(a, g * y))


def log(a) -> Var:
    a = _as_var(a)
    y = np.log(a.value)
    _count("activation", y.size)
    return _emit(y, (a,), lambda g: _accumulate(a, g / a.value))


def tanh(a) -> Var:
    a = _as_var(a)
    y = np.tanh(a.value)
    _count("activation", y.size)
    return _emit(y, (a,), lambda g: _accumulate(a, g * (1.0 - y * y)))


def clip(a, lo: float, hi: float) -> Var:
    """Clamp values; the gradient is zero wherever the clamp is active."""
    a = _as_var(a)
    y = np.clip(a.value, lo, hi)
    inside = (a.value >= lo) & (a.value <= hi)
    return _emit(y, (a,), lambda g: _accumulate(a, g * inside))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Var:
    """Tanh-approximated GELU (smooth everywhere, which keeps gradient checks clean)."""
    a = _as_var(a)
    x = a.value
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)
    _count("activation", y.size)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        _accumulate(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

    return _emit(y, (a,), backward)


# --- shape and indexing ------------------------------------------------------

def reshape(a, shape) -> Var:
    a = _as_var(a)
    src = a.shape
    return _emit(a.value.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(src)))


def transpose(a, axes) -> Var:
    a = _as_var(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit(a.value.transpose(axes), (a,), lambda g: _accumulate(a, g.transpose(inv)))


def getitem(a, key) -> Var:
    a = _as_var(a)
    out_value = a.value[key]

    def backward(g):
        ga = np.zeros_like(a.value)
        np.add.at(ga, key, g)
        _accumulate(a, ga)

    return _emit(np.array(out_value, copy=True), (a,), backward)


def embedding(table, ids) -> Var:
    """Row lookup ``table[ids]`` for an integer index array of any shape."""
    table = _as_var(table)
    ids = np.asarray(ids, dtype=np.int64)
    out_value = table.value[ids]

    def backward(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids, g)
        _accumulate(table, gt)

    return _emit(out_value, (table,), backward)


def scatter_add(base, values, index) -> Var:
    """``out = base`` with ``values[b, j]`` added at row ``index[b, j]`` of sequence ``b``.

    ``base`` is (B, L, d), ``values`` (B, k, d) and ``index`` (B, k) with
    distinct entries per row.
    """
    base, values = _as_var(base), _as_var(values)
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(index.shape[0])[:, None]
    out_value = base.value.copy()
    out_value[rows, index] += values.value
    _count("elementwise", values.value.size)

    def backward(g):
        _accumulate(base, g)
        if values.tape is not None:
            _accumulate(values, g[rows, index])

    return _emit(out_value, (base, values), backward)


def concat(parts, axis: int = 0) -> Var:
    parts = [_as_var(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    out_value = np.concatenate([p.value for p in parts], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(p, g[tuple(sl)])

    return _emit(out_value, tuple(parts), backward)


# --- reductions ------------------------------------------------------------

def vsum(a, axis=None, keepdims=False) -> Var:
    a = _as_var(a)
    out_value = np.sum(a.value, axis=axis, keepdims=keepdims)
    _count("reduction", a.value.size)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _emit(np.asarray(out_value), (a,), backward)


def vmean(a, axis=None, keepdims=False) -> Var:
    a = _as_var(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(vsum(a, axis, keepdims), 1.0 / float(n))


# --- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out_value = a.value @ b.value
    _count("matmul", 2 * out_value.size * a.shape[-1])

    def backward(g):
        if a.tape is not None:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape))
        if b.tape is not None:
            _accumulate(b, _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape))

    return _emit(out_value, (a, b), backward)


# --- fused kernels -------------------------------------------------------------

def softmax(a, axis: int = -1) -> Var:
    a = _as_var(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    _count("softmax", SOFTMAX_FLOPS * s.size)

    def backward(g):
        _accumulate(a, s * (g - np.sum(g * s, axis=axis, keepdims=True)))

    return _emit(s, (a,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Var:
    x, gamma, beta = _as_var(x), _as_var(gamma), _as_var(beta)
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.value + beta.value
    _count("layer_norm", LAYER_NORM_FLOPS * y.size)

    def backward(g):
        _accumulate(beta, _unbroadcast(g, beta.shape))
        _accumulate(gamma, _unbroadcast(g * xhat, gamma.shape))
        if x.tape is not None:
            gx = g * gamma.value
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * np.mean(gx * xhat, axis=-1, keepdims=True))
            _accumulate(x, gx)

    return _emit(y, (x, gamma, beta), backward)


def cross_entropy(logits, targets) -> Var:
    """Mean negative log-likelihood of integer ``targets`` under row-softmax of (N, V) logits."""
    logits = _as_var(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    if n == 0:
        raise ShapeError("cross_entropy over zero rows")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        _accumulate(logits, g * p / n)

    return _emit(np.asarray(loss), (logits,), backward)
