"""Dense-array math with a small reverse-mode tape.

Every op in this module accepts plain ``numpy`` arrays (or floats) and
:class:`Var` objects interchangeably.  When none of the inputs is a ``Var``
the op evaluates eagerly and returns a plain array, so model code can be
written once and used both for cheap evaluation and for gradient tracking::

    tape = Tape()
    x = tape.param("x", np.array([1.0, 2.0, 3.0]))
    loss = dm.sum(x * x)
    grads = backward(tape, loss)      # {"x": array([2., 4., 6.])}

Broadcasting is restricted to the cases the models need: identical shapes,
a scalar against anything, and a row or column vector against a matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class _Node:
    __slots__ = ("parents", "vjp")

    def __init__(self, parents, vjp):
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as ops execute, so parents always precede children.
    ``slots`` maps parameter names to the node holding them.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.slots: dict[str, int] = {}
        self._shapes: dict[int, tuple] = {}

    def __len__(self):
        return len(self.nodes)

    def param(self, name: str, value) -> "Var":
        if name in self.slots:
            raise KeyError(f"parameter slot {name!r} already registered")
        var = self._record(np.array(value, dtype=np.float64), (), None)
        self.slots[name] = var.index
        self._shapes[var.index] = var.value.shape
        return var

    def params(self, arrays: dict) -> dict:
        return {name: self.param(name, a) for name, a in arrays.items()}

    def _record(self, value, parents, vjp) -> "Var":
        self.nodes.append(_Node(parents, vjp))
        return Var(self, len(self.nodes) - 1, value)


class Var:
    """A value tracked on a :class:`Tape`."""

    __slots__ = ("tape", "index", "value")
    __array_priority__ = 100.0

    def __init__(self, tape, index, value):
        self.tape = tape
        self.index = index
        self.value = value

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)
    size = property(lambda self: self.value.size)
    T = property(lambda self: transpose(self))

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape})"

    def __len__(self):
        return len(self.value)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)


def value(x):
    """Strip tracking; returns the underlying array."""
    return x.value if isinstance(x, Var) else x


def is_tracked(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _tape_of(xs):
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands belong to different tapes")
    return tape


def custom_op(out, inputs, vjp):
    """Record ``out`` as a function of ``inputs``.

    ``vjp(g)`` must return one gradient (or ``None``) per input, in order.
    Untracked inputs are skipped when gradients are propagated.
    """
    tape = _tape_of(inputs)
    if tape is None:
        return out
    parents = tuple(x.index if isinstance(x, Var) else -1 for x in inputs)
    return tape._record(out, parents, vjp)


# ----------------------------------------------------------------------------
# broadcasting helpers


def _as_array(x):
    return np.asarray(value(x), dtype=np.float64)


def _check_broadcast(a, b, opname):
    sa, sb = np.shape(a), np.shape(b)
    if sa == sb or sa == () or sb == () or np.size(a) == 1 or np.size(b) == 1:
        return
    try:
        out = np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"{opname}: incompatible shapes {sa} and {sb}") from None
    if out != sa and out != sb:
        raise ShapeError(f"{opname}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    _check_broadcast(value(a), value(b), "add")
    va, vb = _as_array(a), _as_array(b)
    out = va + vb
    return custom_op(out, (a, b), lambda g: (_unbroadcast(g, va.shape), _unbroadcast(g, vb.shape)))


def sub(a, b):
    _check_broadcast(value(a), value(b), "sub")
    va, vb = _as_array(a), _as_array(b)
    out = va - vb
    return custom_op(out, (a, b), lambda g: (_unbroadcast(g, va.shape), _unbroadcast(-g, vb.shape)))


def mul(a, b):
    _check_broadcast(value(a), value(b), "mul")
    va, vb = _as_array(a), _as_array(b)
    out = va * vb
    return custom_op(
        out, (a, b), lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape))
    )


def div(a, b):
    _check_broadcast(value(a), value(b), "div")
    va, vb = _as_array(a), _as_array(b)
    out = va / vb
    return custom_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / vb, va.shape), _unbroadcast(-g * out / vb, vb.shape)),
    )


def neg(a):
    return custom_op(-_as_array(a), (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(_as_array(a))
    return custom_op(out, (a,), lambda g: (g * out,))


def log(a):
    va = _as_array(a)
    if np.any(va <= 0):
        raise ValueError(f"log of non-positive value (min {va.min():.3g})")
    return custom_op(np.log(va), (a,), lambda g: (g / va,))


def tanh(a):
    out = np.tanh(_as_array(a))
    return custom_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    va = _as_array(a)
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(-va))
    return custom_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def square(a):
    va = _as_array(a)
    return custom_op(va * va, (a,), lambda g: (2.0 * g * va,))


def sqrt(a):
    out = np.sqrt(_as_array(a))
    return custom_op(out, (a,), lambda g: (0.5 * g / out,))


# ----------------------------------------------------------------------------
# shape manipulation


def transpose(a):
    va = _as_array(a)
    if va.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {va.shape}")
    return custom_op(va.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    va = _as_array(a)
    return custom_op(va.reshape(shape), (a,), lambda g: (g.reshape(va.shape),))


def getitem(a, key):
    va = _as_array(a)
    out = va[key]

    keys = key if isinstance(key, tuple) else (key,)
    fancy = any(isinstance(k, (list, np.ndarray)) for k in keys)

    def vjp(g):
        ga = np.zeros_like(va)
        if fancy:
            np.add.at(ga, key, g)
        else:
            ga[key] += g
        return (ga,)

    return custom_op(np.array(out), (a,), vjp)


def concat(xs, axis=0):
    vals = [_as_array(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(vals))
        )

    return custom_op(out, tuple(xs), vjp)


def diagonal(a):
    va = _as_array(a)
    n = va.shape[0]

    def vjp(g):
        ga = np.zeros_like(va)
        ga[np.arange(n), np.arange(n)] = g
        return (ga,)

    return custom_op(np.diagonal(va).copy(), (a,), vjp)


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    va, vb = _as_array(a), _as_array(b)
    if va.ndim not in (1, 2) or vb.ndim not in (1, 2) or va.shape[-1] != vb.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {va.shape} by {vb.shape}")
    out = va @ vb

    def vjp(g):
        if va.ndim == 2 and vb.ndim == 2:
            return g @ vb.T, va.T @ g
        if va.ndim == 2:
            return np.outer(g, vb), va.T @ g
        if vb.ndim == 2:
            return vb @ g, np.outer(va, g)
        return g * vb, g * va

    return custom_op(out, (a, b), vjp)


def cholesky(a):
    """Lower Cholesky factor of a symmetric positive-definite matrix."""
    va = _as_array(a)
    try:
        L = np.linalg.cholesky(va)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("cholesky: matrix is not positive definite") from None

    def vjp(g):
        P = np.tril(L.T @ g)
        P[np.diag_indices_from(P)] *= 0.5
        Linv = np.linalg.inv(L)
        S = Linv.T @ P @ Linv
        return (0.5 * (S + S.T),)

    return custom_op(L, (a,), vjp)


def solve_triangular(L, b, trans=False):
    """Solve ``L x = b`` (or ``L^T x = b`` when ``trans``) for lower-triangular ``L``."""
    from scipy.linalg import solve_triangular as _st

    vL, vb = _as_array(L), _as_array(b)
    x = _st(vL, vb, lower=True, trans=1 if trans else 0)

    def vjp(g):
        gb = _st(vL, g, lower=True, trans=0 if trans else 1)
        x2 = x if x.ndim == 2 else x[:, None]
        gb2 = gb if gb.ndim == 2 else gb[:, None]
        gL = -np.tril(x2 @ gb2.T) if trans else -np.tril(gb2 @ x2.T)
        return gL, gb

    return custom_op(x, (L, b), vjp)


# ----------------------------------------------------------------------------
# reductions


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    va = _as_array(a)
    out = np.sum(va, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, va.shape).copy(),)

    return custom_op(np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    va = _as_array(a)
    n = va.size if axis is None else va.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(a, axis=-1):
    """Row-wise log-sum-exp with max-shift; keeps the reduced axis."""
    va = _as_array(a)
    m = np.max(va, axis=axis, keepdims=True)
    e = np.exp(va - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    return custom_op(out, (a,), lambda g: (g * (e / s),))


def softmax(a, tau=1.0, axis=-1):
    """Tempered softmax ``softmax(a / tau)`` along ``axis``."""
    if tau <= 0:
        raise ValueError(f"softmax temperature must be positive, got {tau}")
    va = _as_array(a) / tau
    e = np.exp(va - np.max(va, axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return ((out * (g - np.sum(g * out, axis=axis, keepdims=True))) / tau,)

    return custom_op(out, (a,), vjp)


def log_softmax(a, tau=1.0, axis=-1):
    """``log softmax(a / tau)`` computed without forming the softmax first."""
    if tau <= 0:
        raise ValueError(f"softmax temperature must be positive, got {tau}")
    va = _as_array(a) / tau
    sh = va - np.max(va, axis=axis, keepdims=True)
    out = sh - np.log(np.exp(sh).sum(axis=axis, keepdims=True))
    sm = np.exp(out)

    def vjp(g):
        return ((g - sm * np.sum(g, axis=axis, keepdims=True)) / tau,)

    return custom_op(out, (a,), vjp)


def sq_err(a, b):
    return sum(square(sub(a, b)))


def gaussian_logpdf_diag(x, mean_, std):
    """Total log-density of independent normals, summed over every entry."""
    for other, name in ((mean_, "mean"), (std, "std")):
        _check_broadcast(value(x), value(other), f"gaussian_logpdf_diag({name})")
    vx, vm, vs = _as_array(x), _as_array(mean_), _as_array(std)
    if np.any(vs <= 0):
        raise ValueError("gaussian_logpdf_diag: standard deviations must be positive")
    r = (vx - vm) / vs
    full = np.broadcast_shapes(vx.shape, vm.shape, vs.shape)
    logs = np.broadcast_to(np.log(vs), full)
    out = np.asarray(-0.5 * np.sum(r * r) - np.sum(logs) - 0.5 * LOG_2PI * np.prod(full))

    def vjp(g):
        gr = g * np.broadcast_to(r / vs, full)
        gs = g * np.broadcast_to((r * r - 1.0) / vs, full)
        return (
            _unbroadcast(-gr, vx.shape),
            _unbroadcast(gr, vm.shape),
            _unbroadcast(gs, vs.shape),
        )

    return custom_op(out, (x, mean_, std), vjp)


# ----------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, loss: Var, wrt=None) -> dict:
    """Gradients of scalar ``loss`` for every registered parameter slot.

    The tape is left untouched, so repeated calls return identical results.
    """
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise ValueError("loss is not tracked on this tape")
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    grads: list = [None] * (loss.index + 1)
    grads[loss.index] = np.ones_like(loss.value)
    nodes = tape.nodes
    for i in range(loss.index, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or node.vjp is None:
            continue
        for p, gp in zip(node.parents, node.vjp(g)):
            if p < 0 or gp is None:
                continue
            grads[p] = gp if grads[p] is None else grads[p] + gp
    names = tape.slots if wrt is None else {n: tape.slots[n] for n in wrt}
    out = {}
    for name, idx in names.items():
        g = grads[idx] if idx <= loss.index else None
        out[name] = np.zeros(tape._shapes[idx]) if g is None else np.array(g)
    return out


# ----------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def global_norm(grads: dict) -> float:
    return math.sqrt(float(np.sum([np.sum(g * g) for g in grads.values()])))


def clip_by_global_norm(grads: dict, max_norm: float):
    """Scale all gradients jointly so their global norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if not math.isfinite(norm):
        bad = sorted(k for k, g in grads.items() if not np.all(np.isfinite(g)))
        raise NonFiniteGradient(f"non-finite gradient in {', '.join(bad)}")
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def adam_step(params: dict, grads: dict, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, descending along ``grads``.

    Pure: returns new ``(params, state)`` and leaves the inputs unchanged.
    """
    bad = sorted(k for k, g in grads.items() if not np.all(np.isfinite(g)))
    if bad:
        raise NonFiniteGradient(f"non-finite gradient in {', '.join(bad)}")
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p
            continue
        if np.shape(g) != np.shape(p):
            raise ShapeError(f"adam_step: gradient for {name} has shape {np.shape(g)}, expected {np.shape(p)}")
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1**t)
        vhat = v / (1.0 - beta2**t)
        new_params[name] = p - lr * mhat / (np.sqrt(vhat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)
