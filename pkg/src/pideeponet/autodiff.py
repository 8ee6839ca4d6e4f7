"""Reverse-mode tape over numpy arrays, with a second-order forward jet on top.

Two layers live here:

* ``Tape`` / ``Var`` record array-valued primitives and replay them backwards
  to obtain parameter gradients.
* ``Dual2`` carries ``(value, d1, d2)`` along one or more coordinate
  directions.  Its coefficients may themselves be ``Var`` objects, so a single
  reverse sweep differentiates quantities that already contain first and
  second input derivatives (forward-over-reverse nesting).

Every public primitive accepts plain numpy arrays, ``Var`` or ``Dual2``; with
plain arrays it reduces to ordinary numpy arithmetic and records nothing.
"""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

__all__ = [
    "AutodiffError",
    "Tape",
    "Var",
    "Dual2",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "tanh",
    "exp",
    "sin",
    "cos",
    "sqrt",
    "elu",
    "relu",
    "minimum0",
    "linear",
    "matmul",
    "sum",
    "mean",
    "take",
    "concatenate",
    "reshape",
    "value_of",
    "reverse_grad",
    "directional_derivs",
    "grad_of_residual",
]


class AutodiffError(ArithmeticError):
    """Raised when a sweep meets a non-finite number.

    ``node`` is the tape index where it was detected (``None`` for forward-jet
    checks outside a tape).
    """

    def __init__(self, message: str, node: int | None = None):
        super().__init__(message)
        self.node = node


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------


class Tape:
    """Ordered record of primitive operations.

    Each node stores the indices of its operands and a vector-Jacobian
    closure.  Operands always precede the node, so reversed insertion order is
    a valid reverse topological order.
    """

    def __init__(self) -> None:
        self.values: list[np.ndarray] = []
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list[Callable | None] = []
        self.replays: list[Callable | None] = []
        self.inputs: list[int] = []

    def __len__(self) -> int:
        return len(self.values)

    def variable(self, value) -> "Var":
        """Register a leaf variable."""
        idx = self._push(np.asarray(value, dtype=np.float64), (), None, None)
        self.inputs.append(idx)
        return Var(self, idx)

    def _push(self, value, parents, vjp, replay) -> int:
        self.values.append(value)
        self.parents.append(parents)
        self.vjps.append(vjp)
        self.replays.append(replay)
        return len(self.values) - 1

    def backward(self, output: "Var", check_finite: bool = True) -> dict[int, np.ndarray]:
        """Propagate adjoints from a scalar ``output`` to every leaf.

        Returns a mapping leaf index -> adjoint (zeros for unreached leaves).
        """
        if output.tape is not self:
            raise ValueError("output was recorded on a different tape")
        if np.size(output.value) != 1:
            raise ValueError("backward needs a scalar output")
        adj: list[np.ndarray | None] = [None] * len(self.values)
        adj[output.idx] = np.ones_like(self.values[output.idx])
        leaves = set(self.inputs)
        for i in range(output.idx, -1, -1):
            g = adj[i]
            if g is None:
                continue
            if check_finite and not np.all(np.isfinite(g)):
                raise AutodiffError(f"non-finite adjoint at tape node {i}", node=i)
            vjp = self.vjps[i]
            if vjp is None:
                continue
            grads = vjp(g)
            for p, gp in zip(self.parents[i], grads):
                if gp is None:
                    continue
                adj[p] = gp if adj[p] is None else adj[p] + gp
            if i not in leaves:
                adj[i] = None
        out = {}
        for i in self.inputs:
            out[i] = adj[i] if adj[i] is not None else np.zeros_like(self.values[i])
        return out

    def replay(self, leaf_values: Mapping[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Re-run the recorded forward pass, optionally with new leaf values.

        With unchanged leaves the recomputed node values equal the recorded
        ones bit-for-bit.
        """
        leaf_values = leaf_values or {}
        vals: list[np.ndarray] = []
        for i, replay in enumerate(self.replays):
            if replay is None:
                vals.append(np.asarray(leaf_values.get(i, self.values[i]), dtype=np.float64))
            else:
                vals.append(replay(*(vals[p] for p in self.parents[i])))
        return vals


class Var:
    """Handle on a tape node."""

    __slots__ = ("tape", "idx")
    # keep numpy ufuncs from silently swallowing a Var
    __array_ufunc__ = None

    def __init__(self, tape: Tape, idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.idx]

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(node={self.idx}, shape={self.shape})"

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

    def __getitem__(self, key):
        return _getitem(self, key)


def value_of(x):
    """Strip tape/jet wrappers down to the primal numpy value."""
    if isinstance(x, Var):
        return x.value
    if isinstance(x, Dual2):
        return value_of(x.value)
    return x


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def _check_operand(x):
    if isinstance(x, (Var, np.ndarray, float, int, np.floating, np.integer)):
        return
    raise TypeError(f"unsupported operand type {type(x).__name__}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _record(fn, args, vjp_maker):
    """Evaluate ``fn`` on primal values; record a node if any arg is a Var.

    ``vjp_maker(out, *vals)`` returns a closure mapping the output adjoint to
    a tuple of operand adjoints (``None`` for non-Var operands is fine).
    """
    for a in args:
        _check_operand(a)
    tape = _tape_of(*args)
    vals = [a.value if isinstance(a, Var) else a for a in args]
    out = fn(*vals)
    if tape is None:
        return out
    out = np.asarray(out, dtype=np.float64)
    var_pos = [i for i, a in enumerate(args) if isinstance(a, Var)]
    parents = tuple(args[i].idx for i in var_pos)
    consts = {i: vals[i] for i in range(len(args)) if i not in var_pos}
    full_vjp = vjp_maker(out, *vals)

    def vjp(g):
        grads = full_vjp(g)
        return tuple(grads[i] for i in var_pos)

    def replay(*pvals):
        it = iter(pvals)
        call = [next(it) if i in var_pos else consts[i] for i in range(len(args))]
        return np.asarray(fn(*call), dtype=np.float64)

    return Var(tape, tape._push(out, parents, vjp, replay))


# --------------------------------------------------------------------------
# primitives on Var / ndarray
# --------------------------------------------------------------------------


def _shape(v):
    return np.shape(v)


def _add(a, b):
    if isinstance(a, Dual2) or isinstance(b, Dual2):
        return Dual2.lift(a) + b
    return _record(
        np.add,
        (a, b),
        lambda out, x, y: lambda g: (_unbroadcast(g, _shape(x)), _unbroadcast(g, _shape(y))),
    )


def _sub(a, b):
    if isinstance(a, Dual2) or isinstance(b, Dual2):
        return Dual2.lift(a) - b
    return _record(
        np.subtract,
        (a, b),
        lambda out, x, y: lambda g: (_unbroadcast(g, _shape(x)), _unbroadcast(-g, _shape(y))),
    )


def _mul(a, b):
    if isinstance(a, Dual2) or isinstance(b, Dual2):
        return Dual2.lift(a) * b
    return _record(
        np.multiply,
        (a, b),
        lambda out, x, y: lambda g: (_unbroadcast(g * y, _shape(x)), _unbroadcast(g * x, _shape(y))),
    )


def _div(a, b):
    if isinstance(a, Dual2) or isinstance(b, Dual2):
        return Dual2.lift(a) / b
    return _record(
        np.divide,
        (a, b),
        lambda out, x, y: lambda g: (
            _unbroadcast(g / y, _shape(x)),
            _unbroadcast(-g * out / y, _shape(y)),
        ),
    )


add, sub, mul, div = _add, _sub, _mul, _div


def neg(a):
    if isinstance(a, Dual2):
        return -a
    return _record(np.negative, (a,), lambda out, x: lambda g: (-g,))


def power(a, p: float):
    """``a ** p`` for a constant real exponent ``p``."""
    if isinstance(p, (Var, Dual2)):
        raise TypeError("power supports constant exponents only")
    if isinstance(a, Dual2):
        return a ** p
    p = float(p)
    if p == 2.0:
        return _record(np.square, (a,), lambda out, x: lambda g: (2.0 * g * x,))
    return _record(
        lambda x: np.power(x, p),
        (a,),
        lambda out, x: lambda g: (g * p * np.power(x, p - 1.0),),
    )


def tanh(a):
    if isinstance(a, Dual2):
        return a.tanh()
    return _record(np.tanh, (a,), lambda out, x: lambda g: (g * (1.0 - out * out),))


def exp(a):
    if isinstance(a, Dual2):
        return a.exp()
    return _record(np.exp, (a,), lambda out, x: lambda g: (g * out,))


def sin(a):
    if isinstance(a, Dual2):
        return a.sin()
    return _record(np.sin, (a,), lambda out, x: lambda g: (g * np.cos(x),))


def cos(a):
    if isinstance(a, Dual2):
        return a.cos()
    return _record(np.cos, (a,), lambda out, x: lambda g: (-g * np.sin(x),))


def sqrt(a):
    if isinstance(a, Dual2):
        return a.sqrt()
    return _record(np.sqrt, (a,), lambda out, x: lambda g: (0.5 * g / out,))


def relu(a):
    if isinstance(a, Dual2):
        return a.relu()
    return _record(
        lambda x: np.maximum(x, 0.0),
        (a,),
        lambda out, x: lambda g: (g * (x > 0.0),),
    )


def minimum0(a):
    """``min(a, 0)`` elementwise."""
    return _record(
        lambda x: np.minimum(x, 0.0),
        (a,),
        lambda out, x: lambda g: (g * (x < 0.0),),
    )


def elu(a):
    # relu(x) + exp(min(x, 0)) - 1 equals ELU on both branches and keeps every
    # piece a recorded primitive.
    if isinstance(a, Dual2):
        return a.elu()
    return _add(relu(a), _sub(exp(minimum0(a)), 1.0))


def matmul(a, b):
    def vjp_maker(out, x, y):
        def vjp(g):
            gx = g @ np.swapaxes(y, -1, -2) if np.ndim(y) > 1 else np.multiply.outer(g, y)
            if np.ndim(x) == 1:
                gy = np.multiply.outer(x, g)
            else:
                gy = np.swapaxes(x, -1, -2) @ g
            return _unbroadcast(gx, _shape(x)), _unbroadcast(gy, _shape(y))

        return vjp

    return _record(np.matmul, (a, b), vjp_maker)


def linear(x, W, b=None):
    """Affine map ``x @ W.T + b`` over the last axis of ``x``.

    ``W`` has shape ``(out, in)``.  A ``Dual2`` input maps its value through
    the affine map and its derivative parts through ``W`` alone.
    """
    if isinstance(x, Dual2):
        return x.linear(W, b)
    args = (x, W) if b is None else (x, W, b)
    if _tape_of(*args) is None:
        # untaped (inference) path: einsum's per-row loop rounds identically
        # whatever the batch size, unlike BLAS gemm/gemv
        for a in args:
            _check_operand(a)
        out = np.einsum("...i,oi->...o", np.asarray(x, dtype=np.float64), np.asarray(W, dtype=np.float64))
        return out if b is None else out + b

    def fn(xv, Wv, bv=None):
        out = xv @ Wv.T
        return out if bv is None else out + bv

    def vjp_maker(out, xv, Wv, bv=None):
        def vjp(g):
            gx = g @ Wv
            g2 = g.reshape(-1, g.shape[-1])
            x2 = xv.reshape(-1, xv.shape[-1])
            gW = g2.T @ x2
            if bv is None:
                return gx, gW
            return gx, gW, g2.sum(axis=0)

        return vjp

    return _record(fn, args, vjp_maker)


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    if isinstance(a, Dual2):
        return a.sum(axis)

    def vjp_maker(out, x):
        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, np.shape(x)).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), np.shape(x)).copy(),)

        return vjp

    return _record(lambda x: np.sum(x, axis=axis), (a,), vjp_maker)


def mean(a, axis=None):
    if isinstance(a, Dual2):
        raise TypeError("mean of a Dual2 is not supported; reduce its parts")
    n = np.size(value_of(a)) if axis is None else np.shape(value_of(a))[axis]
    return _mul(sum(a, axis), 1.0 / n)


def take(a, indices, axis: int = 0):
    """Gather rows (``indices`` is a constant integer array)."""
    if isinstance(a, Dual2):
        raise TypeError("take of a Dual2 is not supported")
    indices = np.asarray(indices)

    def vjp_maker(out, x):
        def vjp(g):
            gx = np.zeros_like(x)
            np.add.at(gx, (slice(None),) * axis + (indices,), g)
            return (gx,)

        return vjp

    return _record(lambda x: np.take(x, indices, axis=axis), (a,), vjp_maker)


def _is_basic(key):
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is Ellipsis for k in parts)


def _getitem(a, key):
    basic = _is_basic(key)

    def vjp_maker(out, x):
        def vjp(g):
            gx = np.zeros_like(x)
            if basic:
                gx[key] = g
            else:
                np.add.at(gx, key, g)
            return (gx,)

        return vjp

    return _record(lambda x: x[key], (a,), vjp_maker)


def concatenate(items, axis: int = 0):
    items = tuple(items)
    if any(isinstance(a, Dual2) for a in items):
        raise TypeError("concatenate of Dual2 is not supported")
    sizes = [np.shape(value_of(a))[axis] for a in items]
    splits = np.cumsum(sizes)[:-1]

    def vjp_maker(out, *xs):
        return lambda g: tuple(np.split(g, splits, axis=axis))

    return _record(lambda *xs: np.concatenate(xs, axis=axis), items, vjp_maker)


def reshape(a, shape):
    if isinstance(a, Dual2):
        raise TypeError("reshape of a Dual2 is not supported")
    return _record(
        lambda x: np.reshape(x, shape),
        (a,),
        lambda out, x: lambda g: (np.reshape(g, np.shape(x)),),
    )


# --------------------------------------------------------------------------
# second-order forward jet
# --------------------------------------------------------------------------


class Dual2:
    """Truncated Taylor jet ``(value, d1, d2)`` along coordinate directions.

    ``d1`` and ``d2`` may carry a leading direction axis that broadcasts
    against ``value``; each slice along it is an independent directional
    jet.  ``d2`` holds pure second directional derivatives only (no mixed
    terms).  Components may be floats, arrays or tape ``Var`` objects.
    """

    __slots__ = ("value", "d1", "d2")
    __array_ufunc__ = None

    def __init__(self, value, d1=0.0, d2=0.0):
        self.value = value
        self.d1 = d1
        self.d2 = d2

    @staticmethod
    def lift(x) -> "Dual2":
        """Constants carry zero derivatives."""
        if isinstance(x, Dual2):
            return x
        _check_operand(x)
        return Dual2(x, 0.0, 0.0)

    def __repr__(self):
        return f"Dual2(value={value_of(self.value)!r}, d1={value_of(self.d1)!r}, d2={value_of(self.d2)!r})"

    # structure ------------------------------------------------------------

    def _chain(self, f0, f1, f2) -> "Dual2":
        # h = f(g): h' = f'(g) g', h'' = f''(g) g'^2 + f'(g) g''
        d1 = _mul(f1, self.d1)
        d2 = _add(_mul(f2, _mul(self.d1, self.d1)), _mul(f1, self.d2))
        return Dual2(f0, d1, d2)

    # arithmetic ------------------------------------------------------------

    def __add__(self, o):
        o = Dual2.lift(o)
        return Dual2(_add(self.value, o.value), _add(self.d1, o.d1), _add(self.d2, o.d2))

    __radd__ = __add__

    def __sub__(self, o):
        o = Dual2.lift(o)
        return Dual2(_sub(self.value, o.value), _sub(self.d1, o.d1), _sub(self.d2, o.d2))

    def __rsub__(self, o):
        return Dual2.lift(o) - self

    def __neg__(self):
        return Dual2(neg(self.value), neg(self.d1), neg(self.d2))

    def __mul__(self, o):
        if not isinstance(o, Dual2):
            _check_operand(o)
            return Dual2(_mul(self.value, o), _mul(self.d1, o), _mul(self.d2, o))
        # (ab)'' = a''b + 2a'b' + ab''
        v = _mul(self.value, o.value)
        d1 = _add(_mul(self.d1, o.value), _mul(self.value, o.d1))
        d2 = _add(
            _add(_mul(self.d2, o.value), _mul(self.value, o.d2)),
            _mul(2.0, _mul(self.d1, o.d1)),
        )
        return Dual2(v, d1, d2)

    __rmul__ = __mul__

    def reciprocal(self) -> "Dual2":
        r = _div(1.0, self.value)
        r2 = _mul(r, r)
        return self._chain(r, neg(r2), _mul(2.0, _mul(r2, r)))

    def __truediv__(self, o):
        if not isinstance(o, Dual2):
            return self * _div(1.0, o)
        return self * o.reciprocal()

    def __rtruediv__(self, o):
        return Dual2.lift(o) * self.reciprocal()

    def __pow__(self, p):
        if isinstance(p, (Var, Dual2)):
            raise TypeError("power supports constant exponents only")
        p = float(p)
        if p == 2.0:
            return self * self
        f0 = power(self.value, p)
        f1 = _mul(p, power(self.value, p - 1.0))
        f2 = _mul(p * (p - 1.0), power(self.value, p - 2.0))
        return self._chain(f0, f1, f2)

    # elementary functions ----------------------------------------------------

    def tanh(self):
        t = tanh(self.value)
        s = _sub(1.0, _mul(t, t))
        return self._chain(t, s, _mul(-2.0, _mul(t, s)))

    def exp(self):
        e = exp(self.value)
        return self._chain(e, e, e)

    def sin(self):
        s = sin(self.value)
        return self._chain(s, cos(self.value), neg(s))

    def cos(self):
        c = cos(self.value)
        return self._chain(c, neg(sin(self.value)), neg(c))

    def sqrt(self):
        r = sqrt(self.value)
        f1 = _div(0.5, r)
        # f'' = -1/(4 x^{3/2}) = -f1 / (2x)
        f2 = _div(neg(f1), _mul(2.0, self.value))
        return self._chain(r, f1, f2)

    def relu(self):
        mask = (value_of(self.value) > 0.0).astype(np.float64)
        return self._chain(relu(self.value), mask, 0.0)

    def elu(self):
        e = exp(minimum0(self.value))
        mask = (value_of(self.value) <= 0.0).astype(np.float64)
        return self._chain(elu(self.value), e, _mul(e, mask))

    # linear algebra ---------------------------------------------------------

    def linear(self, W, b=None):
        return Dual2(linear(self.value, W, b), linear(self.d1, W), linear(self.d2, W))

    def sum(self, axis=None):
        return Dual2(sum(self.value, axis), sum(self.d1, axis), sum(self.d2, axis))

    def check_finite(self):
        for part in (self.value, self.d1, self.d2):
            if not np.all(np.isfinite(value_of(part))):
                raise AutodiffError("non-finite value in Dual2 propagation")
        return self


# --------------------------------------------------------------------------
# user-level operations
# --------------------------------------------------------------------------


def reverse_grad(f: Callable, params: Mapping[str, np.ndarray], inputs=None) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``f(params, inputs)`` with respect to every parameter.

    ``params`` maps names to arrays (or floats).  The returned dictionary has
    exactly the same keys.  Raises ``AutodiffError`` if a non-finite adjoint
    appears during the sweep.
    """
    tape = Tape()
    leaves = {name: tape.variable(v) for name, v in params.items()}
    out = f(leaves, inputs)
    if not isinstance(out, Var):
        # output does not depend on any parameter
        return {name: np.zeros_like(np.asarray(v, dtype=np.float64)) for name, v in params.items()}
    if not np.all(np.isfinite(out.value)):
        raise AutodiffError(f"non-finite output at tape node {out.idx}", node=out.idx)
    adj = tape.backward(out)
    return {name: adj[v.idx] for name, v in leaves.items()}


def value_and_grad(f: Callable, params: Mapping[str, np.ndarray], inputs=None):
    """Like ``reverse_grad`` but also returns ``f``'s (possibly structured) output.

    ``f`` may return ``(scalar, aux)``; the gradient is taken of the scalar
    and ``aux`` is passed through with tape wrappers stripped.
    """
    tape = Tape()
    leaves = {name: tape.variable(v) for name, v in params.items()}
    result = f(leaves, inputs)
    if isinstance(result, tuple):
        out, aux = result
    else:
        out, aux = result, None
    if isinstance(aux, dict):
        aux = {k: float(np.asarray(value_of(v))) for k, v in aux.items()}
    if not isinstance(out, Var):
        grads = {name: np.zeros_like(np.asarray(v, dtype=np.float64)) for name, v in params.items()}
        return float(np.asarray(out)), aux, grads
    if not np.all(np.isfinite(out.value)):
        raise AutodiffError(f"non-finite output at tape node {out.idx}", node=out.idx)
    adj = tape.backward(out)
    return float(out.value), aux, {name: adj[v.idx] for name, v in leaves.items()}


def directional_derivs(f: Callable, x, k: int):
    """Return ``(f(x), df/dx_k, d2f/dx_k^2)`` by pushing a Dual2 through ``f``.

    ``f`` takes a 1-D array-like of jets (one per coordinate) and returns a
    scalar jet.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if not 0 <= k < n:
        raise IndexError(f"direction {k} out of range for {n} coordinates")
    jets = [Dual2(x[i], 1.0 if i == k else 0.0, 0.0) for i in range(n)]
    out = Dual2.lift(f(jets)).check_finite()
    return float(value_of(out.value)), float(value_of(out.d1)), float(value_of(out.d2))


def grad_of_residual(residual: Callable, params: Mapping[str, np.ndarray], inputs=None) -> dict[str, np.ndarray]:
    """Gradient of ``residual(params, inputs) ** 2`` (summed if array-valued).

    ``residual`` is expected to build its value from Dual2 jets whose parts
    were recorded on the tape, so the result differentiates through the
    input derivatives as well.
    """

    def squared(p, inp):
        r = residual(p, inp)
        return sum(mul(r, r))

    return reverse_grad(squared, params, inputs)
