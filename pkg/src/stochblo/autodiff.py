"""Second-order automatic differentiation for scalar fields phi(lam, theta).

Reverse mode on a per-call tape, with an optional forward tangent pushed
through both the forward sweep and the adjoint sweep (forward-over-reverse).
One sweep seeded with tangents (dlam, dtheta) returns the gradient together
with its directional derivative, which gives Hessian-vector products and
mixed lambda/theta products without ever forming a matrix.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from typing import Callable, NamedTuple

import numpy as np

from .errors import DimensionError, NonFiniteError, SpaceMismatchError


class Space(Enum):
    THETA = "theta"
    LAMBDA = "lambda"


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite entries in {what}")


class FlatVector:
    """Immutable dense real vector tagged with the space it lives in."""

    __slots__ = ("_values", "space")
    __array_ufunc__ = None

    def __init__(self, values, space: Space):
        if not isinstance(space, Space):
            raise TypeError(f"space must be a Space, got {space!r}")
        arr = np.array(values, dtype=float).reshape(-1)
        _require_finite(arr, f"{space.value} vector")
        arr.setflags(write=False)
        self._values = arr
        self.space = space

    @classmethod
    def zeros(cls, dim: int, space: Space) -> "FlatVector":
        return cls(np.zeros(dim), space)

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def dim(self) -> int:
        return self._values.size

    def to_array(self) -> np.ndarray:
        return self._values.copy()

    def retag(self, space: Space) -> "FlatVector":
        return FlatVector(self._values, space)

    def _check(self, other: "FlatVector") -> np.ndarray:
        if not isinstance(other, FlatVector):
            raise TypeError("FlatVector arithmetic needs another FlatVector")
        if other.space is not self.space:
            raise SpaceMismatchError(
                f"cannot combine {self.space.value} and {other.space.value} vectors")
        if other.dim != self.dim:
            raise DimensionError(f"dimension {self.dim} vs {other.dim}")
        return other._values

    def __add__(self, other):
        return FlatVector(self._values + self._check(other), self.space)

    def __sub__(self, other):
        return FlatVector(self._values - self._check(other), self.space)

    def __neg__(self):
        return FlatVector(-self._values, self.space)

    def __mul__(self, scalar):
        if isinstance(scalar, FlatVector):
            raise TypeError("use dot() for vector products")
        return FlatVector(self._values * float(scalar), self.space)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return FlatVector(self._values / float(scalar), self.space)

    def dot(self, other: "FlatVector") -> float:
        return float(self._values @ self._check(other))

    def norm(self) -> float:
        return float(np.linalg.norm(self._values))

    def __len__(self):
        return self.dim

    def __getitem__(self, i):
        return float(self._values[i])

    def __eq__(self, other):
        return (isinstance(other, FlatVector) and other.space is self.space
                and np.array_equal(other._values, self._values))

    __hash__ = None

    def __repr__(self):
        return f"FlatVector({self._values.tolist()}, {self.space.value})"


def as_array(x, space: Space, dim: int | None = None) -> np.ndarray:
    """Coerce a FlatVector or array-like into a flat float array, checking tags."""
    if isinstance(x, FlatVector):
        if x.space is not space:
            raise SpaceMismatchError(f"expected {space.value} vector, got {x.space.value}")
        arr = x.values
    else:
        arr = np.asarray(x, dtype=float).reshape(-1)
    if dim is not None and arr.size != dim:
        raise DimensionError(f"{space.value} vector has size {arr.size}, expected {dim}")
    return arr


# ---------------------------------------------------------------- tape

_local = threading.local()


class _Tape:
    __slots__ = ("nodes", "second")

    def __init__(self, second: bool):
        self.nodes: list[Node] = []
        self.second = second


def _current() -> _Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        raise RuntimeError("autodiff primitives may only be used inside a ScalarField")
    return tape


class Node:
    """A taped value. `tangent` and `adj_t` are None when identically zero."""

    __slots__ = ("value", "tangent", "adj", "adj_t", "backward")
    __array_ufunc__ = None

    def __init__(self, value, tangent, backward):
        self.value = value
        self.tangent = tangent
        self.adj = None
        self.adj_t = None
        self.backward = backward
        _current().nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)


def _val(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=float)


def _tan(x):
    return x.tangent if isinstance(x, Node) else None


def _plus(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _times(a, b):
    return None if a is None or b is None else a * b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _acc(x, g, gt) -> None:
    if not isinstance(x, Node):
        return
    shape = x.value.shape
    g = _unbroadcast(g, shape)
    x.adj = g if x.adj is None else x.adj + g
    if gt is not None:
        gt = _unbroadcast(gt, shape)
        x.adj_t = gt if x.adj_t is None else x.adj_t + gt


# ---------------------------------------------------------------- primitives

def add(a, b):
    def back(n):
        _acc(a, n.adj, n.adj_t)
        _acc(b, n.adj, n.adj_t)
    return Node(_val(a) + _val(b), _plus(_tan(a), _tan(b)), back)


def sub(a, b):
    def back(n):
        _acc(a, n.adj, n.adj_t)
        _acc(b, -n.adj, None if n.adj_t is None else -n.adj_t)
    tb = _tan(b)
    return Node(_val(a) - _val(b), _plus(_tan(a), None if tb is None else -tb), back)


def neg(a):
    def back(n):
        _acc(a, -n.adj, None if n.adj_t is None else -n.adj_t)
    ta = _tan(a)
    return Node(-_val(a), None if ta is None else -ta, back)


def mul(a, b):
    va, vb, ta, tb = _val(a), _val(b), _tan(a), _tan(b)

    def back(n):
        g, gt = n.adj, n.adj_t
        _acc(a, g * vb, _plus(_times(gt, vb), _times(g, tb)))
        _acc(b, g * va, _plus(_times(gt, va), _times(g, ta)))
    return Node(va * vb, _plus(_times(ta, vb), _times(va, tb)), back)


def div(a, b):
    if isinstance(b, Node):
        return mul(a, power(b, -1.0))
    return mul(a, 1.0 / _val(b))


def _unary(x, value, d1, d2):
    tx = _tan(x)

    def back(n):
        g, gt = n.adj, n.adj_t
        _acc(x, g * d1, _plus(_times(gt, d1), None if tx is None else g * d2 * tx))
    return Node(value, None if tx is None else d1 * tx, back)


def power(x, p: float):
    p = float(p)
    v = _val(x)
    if p == 1.0:
        return _unary(x, v.copy(), np.ones_like(v), np.zeros_like(v))
    if p == 2.0:
        return _unary(x, v * v, 2.0 * v, np.full_like(v, 2.0))
    return _unary(x, v ** p, p * v ** (p - 1.0), p * (p - 1.0) * v ** (p - 2.0))


def exp(x):
    e = np.exp(_val(x))
    return _unary(x, e, e, e)


def log(x):
    v = _val(x)
    inv = 1.0 / v
    return _unary(x, np.log(v), inv, -inv * inv)


def tanh(x):
    t = np.tanh(_val(x))
    d1 = 1.0 - t * t
    return _unary(x, t, d1, -2.0 * t * d1)


def abs_(x):
    """|x| with the subgradient at 0 taken to be 0."""
    v = _val(x)
    return _unary(x, np.abs(v), np.sign(v), np.zeros_like(v))


def softplus(x):
    v = _val(x)
    s = np.exp(-np.logaddexp(0.0, -v))
    return _unary(x, np.logaddexp(0.0, v), s, s * (1.0 - s))


def sum_(x, axis=None):
    vx, tx = _val(x), _tan(x)
    shape = vx.shape

    def expand(g):
        if axis is None:
            return np.full(shape, g)
        return np.broadcast_to(np.expand_dims(g, axis), shape)

    def back(n):
        _acc(x, expand(n.adj), None if n.adj_t is None else expand(n.adj_t))
    return Node(np.sum(vx, axis=axis), None if tx is None else np.sum(tx, axis=axis), back)


def dot(a, b):
    return sum_(mul(a, b))


def _as2d(a, left: bool):
    if a.ndim == 2:
        return a
    return a[None, :] if left else a[:, None]


def _mm_adj_a(g, b, a_shape):
    b2 = _as2d(b, left=False)
    return (g.reshape(-1, b2.shape[1]) @ b2.T).reshape(a_shape)


def _mm_adj_b(a, g, b_shape):
    a2 = _as2d(a, left=True)
    return (a2.T @ g.reshape(a2.shape[0], -1)).reshape(b_shape)


def matmul(a, b):
    va, vb, ta, tb = _val(a), _val(b), _tan(a), _tan(b)
    sa, sb = va.shape, vb.shape

    def back(n):
        g, gt = n.adj, n.adj_t
        ga_t = _plus(None if gt is None else _mm_adj_a(gt, vb, sa),
                     None if tb is None else _mm_adj_a(g, tb, sa))
        gb_t = _plus(None if gt is None else _mm_adj_b(va, gt, sb),
                     None if ta is None else _mm_adj_b(ta, g, sb))
        _acc(a, _mm_adj_a(g, vb, sa), ga_t)
        _acc(b, _mm_adj_b(va, g, sb), gb_t)
    tangent = _plus(None if ta is None else ta @ vb, None if tb is None else va @ tb)
    return Node(va @ vb, tangent, back)


def getitem(x, idx):
    vx, tx = _val(x), _tan(x)

    def scatter(g):
        z = np.zeros_like(vx)
        np.add.at(z, idx, g)
        return z

    def back(n):
        _acc(x, scatter(n.adj), None if n.adj_t is None else scatter(n.adj_t))
    return Node(vx[idx], None if tx is None else tx[idx], back)


def reshape(x, shape):
    vx, tx = _val(x), _tan(x)
    old = vx.shape

    def back(n):
        _acc(x, n.adj.reshape(old), None if n.adj_t is None else n.adj_t.reshape(old))
    return Node(vx.reshape(shape), None if tx is None else tx.reshape(shape), back)


def logsumexp(x, axis=None):
    """Stable log-sum-exp; the max shift is a constant so no extra rule is needed."""
    shift = np.max(_val(x), axis=axis, keepdims=True)
    inner = log(sum_(exp(sub(x, shift)), axis=axis))
    return add(inner, np.squeeze(shift, axis=axis) if axis is not None else shift.reshape(()))


# ---------------------------------------------------------------- fields

@dataclass(frozen=True)
class ScalarField:
    """A scalar function phi(lam, theta) written with the primitives above.

    `fn` receives two taped vectors and must return a scalar Node (or a
    plain number when the value does not depend on its inputs).
    """

    fn: Callable
    dim_lambda: int
    dim_theta: int
    name: str = "phi"

    def scaled(self, factor: float, name: str | None = None) -> "ScalarField":
        base, c = self.fn, float(factor)
        return ScalarField(lambda lam, th: mul(base(lam, th), c),
                           self.dim_lambda, self.dim_theta, name or f"{c}*{self.name}")

    def __call__(self, lam, theta) -> float:
        return evaluate(self, lam, theta)


class Derivatives(NamedTuple):
    value: float
    grad_lambda: np.ndarray
    grad_theta: np.ndarray
    dgrad_lambda: np.ndarray | None
    dgrad_theta: np.ndarray | None


class _Counter:
    __slots__ = ("first", "second")

    def __init__(self):
        self.first = 0
        self.second = 0

    @property
    def total(self) -> int:
        return self.first + self.second


@contextmanager
def counting():
    """Count derivative sweeps made on this thread inside the block."""
    stack = getattr(_local, "counters", None)
    if stack is None:
        stack = _local.counters = []
    c = _Counter()
    stack.append(c)
    try:
        yield c
    finally:
        stack.remove(c)


def _bump(second: bool) -> None:
    for c in getattr(_local, "counters", ()) or ():
        if second:
            c.second += 1
        else:
            c.first += 1


def _sweep(phi: ScalarField, lam, theta, lam_t=None, theta_t=None,
           backward: bool = True) -> Derivatives:
    lam = as_array(lam, Space.LAMBDA, phi.dim_lambda)
    theta = as_array(theta, Space.THETA, phi.dim_theta)
    second = lam_t is not None or theta_t is not None
    if second:
        lam_t = np.zeros_like(lam) if lam_t is None else as_array(lam_t, Space.LAMBDA, phi.dim_lambda)
        theta_t = (np.zeros_like(theta) if theta_t is None
                   else as_array(theta_t, Space.THETA, phi.dim_theta))
    tape = _Tape(second)
    outer_tape = getattr(_local, "tape", None)
    _local.tape = tape
    try:
        L = Node(lam.copy(), lam_t.copy() if second else None, None)
        T = Node(theta.copy(), theta_t.copy() if second else None, None)
        out = phi.fn(L, T)
    finally:
        _local.tape = outer_tape
    if isinstance(out, Node):
        value = out.value
    else:
        value = np.asarray(out, dtype=float)
    if value.size != 1:
        raise DimensionError(f"{phi.name} returned shape {value.shape}, expected a scalar")
    value = float(value.reshape(()))
    if not np.isfinite(value):
        raise NonFiniteError(f"{phi.name} evaluated to {value}")
    if not backward:
        return Derivatives(value, None, None, None, None)
    _bump(second)
    if isinstance(out, Node):
        out.adj = np.ones_like(out.value)
        for node in reversed(tape.nodes):
            if node.adj is not None and node.backward is not None:
                node.backward(node)

    def grab(leaf, attr, size):
        g = getattr(leaf, attr)
        g = np.zeros(size) if g is None else g.ravel().copy()
        _require_finite(g, f"derivative of {phi.name}")
        return g

    gl, gt = grab(L, "adj", lam.size), grab(T, "adj", theta.size)
    if not second:
        return Derivatives(value, gl, gt, None, None)
    return Derivatives(value, gl, gt, grab(L, "adj_t", lam.size), grab(T, "adj_t", theta.size))


# ---------------------------------------------------------------- public ops

def evaluate(phi: ScalarField, lam, theta) -> float:
    return _sweep(phi, lam, theta, backward=False).value


def grad_theta(phi: ScalarField, lam, theta) -> FlatVector:
    return FlatVector(_sweep(phi, lam, theta).grad_theta, Space.THETA)


def grad_lambda(phi: ScalarField, lam, theta) -> FlatVector:
    return FlatVector(_sweep(phi, lam, theta).grad_lambda, Space.LAMBDA)


def value_and_grads(phi: ScalarField, lam, theta) -> tuple[float, np.ndarray, np.ndarray]:
    """Value, d/dlam and d/dtheta from a single reverse sweep (plain arrays)."""
    d = _sweep(phi, lam, theta)
    return d.value, d.grad_lambda, d.grad_theta


def grad_jvp(phi: ScalarField, lam, theta, lam_tangent=None, theta_tangent=None) -> Derivatives:
    """Gradient plus its directional derivative along (lam_tangent, theta_tangent).

    dgrad_theta = H_tt @ dtheta + H_tl @ dlam and dgrad_lambda = H_lt @ dtheta + H_ll @ dlam.
    """
    if lam_tangent is None and theta_tangent is None:
        theta_tangent = np.zeros(phi.dim_theta)
    return _sweep(phi, lam, theta, lam_tangent, theta_tangent)


def hvp_theta(phi: ScalarField, lam, theta, v) -> FlatVector:
    d = _sweep(phi, lam, theta, None, v)
    return FlatVector(d.dgrad_theta, Space.THETA)


def mixed_vhp(phi: ScalarField, lam, theta, v) -> FlatVector:
    """d/dlam of v . d(phi)/dtheta with v held fixed."""
    d = _sweep(phi, lam, theta, None, v)
    return FlatVector(d.dgrad_lambda, Space.LAMBDA)


def hvp_and_mixed(phi: ScalarField, lam, theta, v) -> tuple[np.ndarray, np.ndarray]:
    """Both contractions of v with the theta-row of the Hessian in one sweep."""
    d = _sweep(phi, lam, theta, None, v)
    return d.dgrad_theta, d.dgrad_lambda
