"""Small differentiation engine.

Two pieces live here:

* ``Dual2`` -- second-order forward mode in a single scalar parameter.  Every
  field is a float64 array so a whole batch of curves can be pushed through a
  network at once.  Used for time derivatives of interpolants.
* ``Tape`` / ``Var`` -- reverse mode over numpy arrays with a closed set of
  primitives (affine maps, elementwise activations, reductions, dot, norm,
  division).  Used for parameter gradients of the small MLPs.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


class DomainError(ArithmeticError):
    """A primitive was evaluated where it is not differentiable."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"{op}: not differentiable at the given point"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ShapeError(ValueError):
    pass


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# forward mode
# ---------------------------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Dual2:
    """Truncated Taylor jet ``value + d1*e + d2*e^2/2`` in one scalar direction."""

    __slots__ = ("value", "d1", "d2")
    __array_priority__ = 100.0

    def __init__(self, value, d1=None, d2=None):
        self.value = _f64(value)
        self.d1 = np.zeros_like(self.value) if d1 is None else _f64(d1)
        self.d2 = np.zeros_like(self.value) if d2 is None else _f64(d2)

    @classmethod
    def variable(cls, t) -> "Dual2":
        t = _f64(t)
        return cls(t, np.ones_like(t), np.zeros_like(t))

    @staticmethod
    def lift(x) -> "Dual2":
        return x if isinstance(x, Dual2) else Dual2(x)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Dual2(value={self.value!r}, d1={self.d1!r}, d2={self.d2!r})"

    # arithmetic ------------------------------------------------------------
    def __add__(self, other):
        o = Dual2.lift(other)
        return Dual2(self.value + o.value, self.d1 + o.d1, self.d2 + o.d2)

    __radd__ = __add__

    def __neg__(self):
        return Dual2(-self.value, -self.d1, -self.d2)

    def __sub__(self, other):
        return self + (-Dual2.lift(other))

    def __rsub__(self, other):
        return Dual2.lift(other) + (-self)

    def __mul__(self, other):
        o = Dual2.lift(other)
        a, b = self, o
        return Dual2(
            a.value * b.value,
            a.d1 * b.value + a.value * b.d1,
            a.d2 * b.value + 2.0 * a.d1 * b.d1 + a.value * b.d2,
        )

    __rmul__ = __mul__

    def reciprocal(self):
        v = self.value
        if np.any(v == 0.0):
            raise DomainError("reciprocal", "zero denominator")
        return self._chain(1.0 / v, -1.0 / v**2, 2.0 / v**3)

    def __truediv__(self, other):
        if isinstance(other, Dual2):
            return self * other.reciprocal()
        o = _f64(other)
        if np.any(o == 0.0):
            raise DomainError("div", "zero denominator")
        return Dual2(self.value / o, self.d1 / o, self.d2 / o)

    def __rtruediv__(self, other):
        return Dual2.lift(other) * self.reciprocal()

    def __pow__(self, n: int):
        if not isinstance(n, (int, np.integer)):
            raise TypeError("Dual2 supports integer powers only")
        v = self.value
        if n == 0:
            return Dual2(np.ones_like(v))
        return self._chain(v**n, n * v ** (n - 1), n * (n - 1) * v ** (n - 2))

    def __matmul__(self, w):
        w = _f64(w)
        return Dual2(self.value @ w, self.d1 @ w, self.d2 @ w)

    def __rmatmul__(self, w):
        w = _f64(w)
        return Dual2(w @ self.value, w @ self.d1, w @ self.d2)

    def __getitem__(self, idx):
        return Dual2(self.value[idx], self.d1[idx], self.d2[idx])

    def _chain(self, f, df, ddf):
        return Dual2(f, df * self.d1, ddf * self.d1**2 + df * self.d2)

    # reductions -------------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return Dual2(
            self.value.sum(axis=axis, keepdims=keepdims),
            self.d1.sum(axis=axis, keepdims=keepdims),
            self.d2.sum(axis=axis, keepdims=keepdims),
        )

    def reshape(self, *shape):
        return Dual2(self.value.reshape(*shape), self.d1.reshape(*shape), self.d2.reshape(*shape))


def concat(parts, axis=-1):
    """Concatenate jets and/or plain arrays."""
    if not any(isinstance(p, Dual2) for p in parts):
        return np.concatenate([_f64(p) for p in parts], axis=axis)
    jets = [Dual2.lift(p) for p in parts]
    return Dual2(
        np.concatenate([j.value for j in jets], axis=axis),
        np.concatenate([j.d1 for j in jets], axis=axis),
        np.concatenate([j.d2 for j in jets], axis=axis),
    )


def _unary(name, f, df, ddf, domain=None):
    def op(x):
        if not isinstance(x, Dual2):
            return f(_f64(x))
        v = x.value
        if domain is not None and not np.all(domain(v)):
            raise DomainError(name)
        return x._chain(f(v), df(v), ddf(v))

    op.__name__ = name
    return op


def _tanh_d(v):
    return 1.0 - np.tanh(v) ** 2


def _tanh_dd(v):
    th = np.tanh(v)
    return -2.0 * th * (1.0 - th**2)


def _silu(v):
    return v * _sigmoid(v)


def _silu_d(v):
    s = _sigmoid(v)
    return s * (1.0 + v * (1.0 - s))


def _silu_dd(v):
    s = _sigmoid(v)
    ds = s * (1.0 - s)
    return 2.0 * ds + v * ds * (1.0 - 2.0 * s)


def _softplus(v):
    return np.logaddexp(0.0, v)


def _softplus_dd(v):
    s = _sigmoid(v)
    return s * (1.0 - s)


exp = _unary("exp", np.exp, np.exp, np.exp)
log = _unary("log", np.log, lambda v: 1.0 / v, lambda v: -1.0 / v**2, domain=lambda v: v > 0)
sin = _unary("sin", np.sin, np.cos, lambda v: -np.sin(v))
cos = _unary("cos", np.cos, lambda v: -np.sin(v), lambda v: -np.cos(v))
tanh = _unary("tanh", np.tanh, _tanh_d, _tanh_dd)
silu = _unary("silu", _silu, _silu_d, _silu_dd)
softplus = _unary("softplus", _softplus, _sigmoid, _softplus_dd)
sqrt = _unary(
    "sqrt",
    np.sqrt,
    lambda v: 0.5 / np.sqrt(v),
    lambda v: -0.25 / v**1.5,
    domain=lambda v: v > 0,
)

ACTIVATIONS = {"tanh": tanh, "silu": silu, "softplus": softplus}


def dot(a, b, axis=-1):
    """Inner product along ``axis`` for jets or arrays."""
    if isinstance(a, Dual2) or isinstance(b, Dual2):
        return (Dual2.lift(a) * b).sum(axis=axis)
    return np.sum(_f64(a) * _f64(b), axis=axis)


def norm(a, axis=-1):
    sq = dot(a, a, axis=axis)
    if isinstance(sq, Dual2):
        if np.any(sq.value <= 0.0):
            raise DomainError("norm", "zero vector")
        return sqrt(sq)
    return np.sqrt(sq)


def forward_dual(f: Callable[[Dual2], object], t):
    """Value, first and second derivative of ``f`` at scalar (or batch of) ``t``.

    ``f`` receives a ``Dual2`` seeded with unit tangent and may return a jet or
    a plain array (treated as constant in ``t``).
    """
    out = f(Dual2.variable(t))
    out = Dual2.lift(out)
    return out.value, out.d1, out.d2


# ---------------------------------------------------------------------------
# reverse mode
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Var:
    """A node on a ``Tape``."""

    __slots__ = ("tape", "value", "parents", "grad", "index", "op", "needs_grad")
    __array_priority__ = 100.0

    def __init__(self, tape, value, parents=(), op="const", needs_grad=False):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.grad = None
        self.op = op
        self.needs_grad = needs_grad
        self.index = tape._record(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(op={self.op}, index={self.index}, shape={self.value.shape})"

    def _lift(self, x) -> "Var":
        if isinstance(x, Var):
            if x.tape is not self.tape:
                raise ValueError("operands belong to different tapes")
            return x
        return self.tape.const(x)

    def __add__(self, o):
        return add(self, self._lift(o))

    def __radd__(self, o):
        return add(self._lift(o), self)

    def __sub__(self, o):
        return sub(self, self._lift(o))

    def __rsub__(self, o):
        return sub(self._lift(o), self)

    def __mul__(self, o):
        return mul(self, self._lift(o))

    def __rmul__(self, o):
        return mul(self._lift(o), self)

    def __truediv__(self, o):
        return div(self, self._lift(o))

    def __rtruediv__(self, o):
        return div(self._lift(o), self)

    def __neg__(self):
        return self.tape.op("neg", -self.value, [(self, lambda g: -g)])

    def __matmul__(self, o):
        return matmul(self, self._lift(o))

    def __rmatmul__(self, o):
        return matmul(self._lift(o), self)

    def __getitem__(self, idx):
        shape = self.value.shape

        def vjp(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return out

        return self.tape.op("slice", self.value[idx], [(self, vjp)])

    def reshape(self, *shape):
        old = self.value.shape
        return self.tape.op("reshape", self.value.reshape(*shape), [(self, lambda g: g.reshape(old))])

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.value.shape[axis]
        return vsum(self, axis=axis) * (1.0 / n)


class Tape:
    """Ordered record of primitive applications.

    A tape is single-use: create it, register parameters with :meth:`param`,
    build a scalar, call :meth:`backward`.
    """

    def __init__(self):
        self.nodes: list[Var] = []

    def _record(self, var: Var) -> int:
        self.nodes.append(var)
        return len(self.nodes) - 1

    def param(self, value) -> Var:
        return Var(self, _f64(value).copy(), op="param", needs_grad=True)

    def const(self, value) -> Var:
        return Var(self, _f64(value), op="const")

    def op(self, name, value, parents) -> Var:
        value = _f64(value)
        live = tuple((p, vjp) for p, vjp in parents if p.needs_grad)
        var = Var(self, value, live, op=name, needs_grad=bool(live))
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite value produced by '{name}' at tape node {var.index}")
        return var

    def backward(self, out: Var) -> None:
        if out.value.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {out.value.shape}")
        for node in self.nodes:
            node.grad = None
        out.grad = np.ones_like(out.value)
        for node in reversed(self.nodes[: out.index + 1]):
            if node.grad is None or not node.parents:
                continue
            for parent, vjp in node.parents:
                g = vjp(node.grad)
                parent.grad = g if parent.grad is None else parent.grad + g


def add(a: Var, b: Var) -> Var:
    sa, sb = a.value.shape, b.value.shape
    return a.tape.op(
        "add",
        a.value + b.value,
        [(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(g, sb))],
    )


def sub(a: Var, b: Var) -> Var:
    sa, sb = a.value.shape, b.value.shape
    return a.tape.op(
        "sub",
        a.value - b.value,
        [(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: -_unbroadcast(g, sb))],
    )


def mul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    return a.tape.op(
        "mul",
        av * bv,
        [(a, lambda g: _unbroadcast(g * bv, av.shape)), (b, lambda g: _unbroadcast(g * av, bv.shape))],
    )


def div(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    if np.any(bv == 0.0):
        raise DomainError("div", "zero denominator")
    return a.tape.op(
        "div",
        av / bv,
        [
            (a, lambda g: _unbroadcast(g / bv, av.shape)),
            (b, lambda g: _unbroadcast(-g * av / bv**2, bv.shape)),
        ],
    )


def matmul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: {av.shape} @ {bv.shape}")
    if av.ndim == 1:
        ga = lambda g: bv @ g  # noqa: E731
        gb = lambda g: np.outer(av, g)  # noqa: E731
    else:
        ga = lambda g: g @ bv.T  # noqa: E731
        gb = lambda g: av.T @ g  # noqa: E731
    return a.tape.op("matmul", av @ bv, [(a, ga), (b, gb)])


def vsum(a: Var, axis=None, keepdims=False) -> Var:
    shape = a.value.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return a.tape.op("sum", a.value.sum(axis=axis, keepdims=keepdims), [(a, vjp)])


def _elementwise(name, f, df, domain=None):
    def op(a: Var) -> Var:
        v = a.value
        if domain is not None and not np.all(domain(v)):
            raise DomainError(name)
        d = df(v)
        return a.tape.op(name, f(v), [(a, lambda g: g * d)])

    op.__name__ = "v" + name
    return op


vexp = _elementwise("exp", np.exp, np.exp)
vlog = _elementwise("log", np.log, lambda v: 1.0 / v, domain=lambda v: v > 0)
vsin = _elementwise("sin", np.sin, np.cos)
vcos = _elementwise("cos", np.cos, lambda v: -np.sin(v))
vtanh = _elementwise("tanh", np.tanh, _tanh_d)
vsilu = _elementwise("silu", _silu, _silu_d)
vsoftplus = _elementwise("softplus", _softplus, _sigmoid)
vsqrt = _elementwise("sqrt", np.sqrt, lambda v: 0.5 / np.sqrt(v), domain=lambda v: v > 0)
vsquare = _elementwise("square", np.square, lambda v: 2.0 * v)

V_ACTIVATIONS = {"tanh": vtanh, "silu": vsilu, "softplus": vsoftplus}


def vdot(a: Var, b: Var, axis=-1) -> Var:
    return vsum(a * b, axis=axis)


def vnorm(a: Var, axis=-1) -> Var:
    sq = vdot(a, a, axis=axis)
    if np.any(sq.value <= 0.0):
        raise DomainError("norm", "zero vector")
    return vsqrt(sq)


def vconcat(parts, axis=-1) -> Var:
    tape = next(p.tape for p in parts if isinstance(p, Var))
    vars_ = [p if isinstance(p, Var) else tape.const(p) for p in parts]
    sizes = [v.value.shape[axis] for v in vars_]
    bounds = np.cumsum([0] + sizes)
    value = np.concatenate([v.value for v in vars_], axis=axis)

    def make_vjp(lo, hi):
        def vjp(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        return vjp

    return tape.op("concat", value, [(v, make_vjp(bounds[i], bounds[i + 1])) for i, v in enumerate(vars_)])


def stop(a) -> Var | np.ndarray:
    """Stop-gradient: the current value, detached from the tape."""
    if isinstance(a, Var):
        return a.tape.const(a.value.copy())
    return _f64(a)


def reverse_grad(loss: Callable[[Var], Var], params) -> np.ndarray:
    """Gradient of a scalar ``loss(p)`` with respect to the flat vector ``params``."""
    params = _f64(params)
    tape = Tape()
    p = tape.param(params)
    out = loss(p)
    if not isinstance(out, Var):
        raise TypeError("loss must return a Var built on the supplied parameter")
    tape.backward(out)
    if p.grad is None:
        return np.zeros_like(params)
    if p.grad.shape != params.shape:
        raise ShapeError(f"gradient shape {p.grad.shape} != params shape {params.shape}")
    return p.grad


def value_and_grad(loss: Callable[[Var], Var], params):
    params = _f64(params)
    tape = Tape()
    p = tape.param(params)
    out = loss(p)
    tape.backward(out)
    g = np.zeros_like(params) if p.grad is None else p.grad
    return float(out.value), g
