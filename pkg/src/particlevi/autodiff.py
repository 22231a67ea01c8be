"""Reverse-mode automatic differentiation on a define-by-run tape.

Values are dense float64 numpy arrays of rank at most 2 (scalars, vectors,
matrices).  Every operation computes its forward value immediately and, when
a tape is active, appends one node holding the parent ids and a closure that
maps the incoming cotangent to one cotangent per parent.  ``grad`` walks the
node list once in reverse id order, which is a reverse topological order
because ids strictly increase at creation.

The contract callers may rely on for elementwise shapes is scalar-with-tensor
and equal-shape; internally the library also leans on general numpy
broadcasting (row/column vectors against matrices), and cotangents are summed
back to the parent shape.  log(0) produces -inf; downstream code only ever
feeds such values through logsumexp, whose softmax backward assigns them
exactly zero weight, so no infinite gradient is materialized.
"""

from __future__ import annotations

import math
from contextvars import ContextVar

import numpy as np
from scipy import special as _special

_ACTIVE: ContextVar["Tape | None"] = ContextVar("particlevi_tape", default=None)

_INV_SQRT_PI_2 = 2.0 / math.sqrt(math.pi)
LEAKY_SLOPE = 0.01


class Tape:
    """Recording context; nodes are (parent-ids, multi-cotangent closure)."""

    __slots__ = ("nodes", "_token")

    def __init__(self):
        self.nodes = []

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        return False


class Var:
    """A float64 array plus its position on a tape (None for constants)."""

    __slots__ = ("data", "nid", "tape")

    # keeps ndarray <op> Var from silently broadcasting to an object array
    __array_ufunc__ = None

    def __init__(self, data, nid=None, tape=None):
        self.data = data
        self.nid = nid
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = "const" if self.nid is None else f"node {self.nid}"
        return f"Var({self.data!r}, {tag})"

    # Operator sugar; all dispatch to the module-level ops below.
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return reduce("sum", self, axis)

    def max(self, axis=None):
        return reduce("max", self, axis)


def _lift(x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=np.float64))


def constant(x) -> Var:
    """Wrap a value as a non-differentiable Var."""
    return _lift(x)


def leaf(x) -> Var:
    """Wrap a value as a differentiable leaf on the active tape."""
    data = np.asarray(x, dtype=np.float64)
    tape = _ACTIVE.get()
    if tape is None:
        return Var(data)
    nid = len(tape.nodes)
    tape.nodes.append(((), None))
    return Var(data, nid, tape)


def _rec1(out, a: Var, fa) -> Var:
    if a.nid is None:
        return Var(out)
    tape = _ACTIVE.get()
    if tape is None:
        return Var(out)
    nid = len(tape.nodes)
    tape.nodes.append(((a.nid,), lambda g: (fa(g),)))
    return Var(out, nid, tape)


def _rec2(out, a: Var, fa, b: Var, fb) -> Var:
    tape = _ACTIVE.get()
    if tape is None:
        return Var(out)
    la, lb = a.nid is not None, b.nid is not None
    if la and lb:
        pids, fn = (a.nid, b.nid), (lambda g: (fa(g), fb(g)))
    elif la:
        pids, fn = (a.nid,), (lambda g: (fa(g),))
    elif lb:
        pids, fn = (b.nid,), (lambda g: (fb(g),))
    else:
        return Var(out)
    nid = len(tape.nodes)
    tape.nodes.append((pids, fn))
    return Var(out, nid, tape)


def _unb(g: np.ndarray, shape) -> np.ndarray:
    """Sum a cotangent back down to a (possibly broadcast-from) shape."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise operations


def add(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    sa, sb = a.data.shape, b.data.shape
    return _rec2(a.data + b.data, a, lambda g: _unb(g, sa), b, lambda g: _unb(g, sb))


def sub(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    sa, sb = a.data.shape, b.data.shape
    return _rec2(a.data - b.data, a, lambda g: _unb(g, sa), b, lambda g: _unb(-g, sb))


def mul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    da, db = a.data, b.data
    return _rec2(da * db, a, lambda g: _unb(g * db, da.shape), b, lambda g: _unb(g * da, db.shape))


def div(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    da, db = a.data, b.data
    out = da / db
    return _rec2(
        out,
        a,
        lambda g: _unb(g / db, da.shape),
        b,
        lambda g: _unb(-g * out / db, db.shape),
    )


def neg(a) -> Var:
    a = _lift(a)
    return _rec1(-a.data, a, lambda g: -g)


def exp(a) -> Var:
    a = _lift(a)
    out = np.exp(a.data)
    return _rec1(out, a, lambda g: g * out)


def log(a) -> Var:
    a = _lift(a)
    if np.any(a.data < 0.0):
        raise ValueError("log of negative value")
    with np.errstate(divide="ignore"):
        out = np.log(a.data)
    da = a.data
    return _rec1(out, a, lambda g: g / da)


def sqrt(a) -> Var:
    a = _lift(a)
    out = np.sqrt(a.data)
    return _rec1(out, a, lambda g: g / (2.0 * out))


def erf(a) -> Var:
    a = _lift(a)
    out = _special.erf(a.data)
    da = a.data
    return _rec1(out, a, lambda g: g * _INV_SQRT_PI_2 * np.exp(-da * da))


def sigmoid(a) -> Var:
    a = _lift(a)
    out = _special.expit(a.data)
    return _rec1(out, a, lambda g: g * out * (1.0 - out))


def tanh(a) -> Var:
    a = _lift(a)
    out = np.tanh(a.data)
    return _rec1(out, a, lambda g: g * (1.0 - out * out))


def leaky_relu(a) -> Var:
    a = _lift(a)
    pos = a.data > 0.0
    out = np.where(pos, a.data, LEAKY_SLOPE * a.data)
    return _rec1(out, a, lambda g: np.where(pos, g, LEAKY_SLOPE * g))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "erf": erf,
    "sigmoid": sigmoid,
    "leaky-relu": leaky_relu,
    "tanh": tanh,
}


def elementwise(kind: str, a, b=None) -> Var:
    """Named dispatch over the elementwise op set."""
    fn = _ELEMENTWISE.get(kind)
    if fn is None:
        raise ValueError(f"unknown elementwise op {kind!r}")
    return fn(a) if b is None else fn(a, b)


# ---------------------------------------------------------------------------
# matmul and reductions


def matmul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    da, db = a.data, b.data
    if da.ndim == 0 or db.ndim == 0:
        raise ValueError("matmul requires rank >= 1 operands")
    if da.shape[-1] != db.shape[0]:
        raise ValueError(f"matmul inner dimensions disagree: {da.shape} @ {db.shape}")
    out = np.matmul(da, db)

    if da.ndim == 2 and db.ndim == 2:
        fa = lambda g: np.matmul(g, db.T)
        fb = lambda g: np.matmul(da.T, g)
    elif da.ndim == 2 and db.ndim == 1:
        fa = lambda g: np.outer(g, db)
        fb = lambda g: np.matmul(da.T, g)
    elif da.ndim == 1 and db.ndim == 2:
        fa = lambda g: np.matmul(db, g)
        fb = lambda g: np.outer(da, g)
    else:
        fa = lambda g: g * db
        fb = lambda g: g * da
    return _rec2(out, a, fa, b, fb)


def _reduce_sum(a: Var, axis) -> Var:
    shape = a.data.shape
    out = np.sum(a.data, axis=axis)

    def back(g):
        if axis is None:
            return np.broadcast_to(g, shape).copy() if shape else np.asarray(g)
        return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

    return _rec1(out, a, back)


def _reduce_max(a: Var, axis) -> Var:
    data = a.data
    out = np.max(data, axis=axis)

    def back(g):
        if axis is None:
            mask = data == out
            return np.where(mask, g / mask.sum(), 0.0)
        outk = np.expand_dims(out, axis)
        mask = data == outk
        counts = mask.sum(axis=axis, keepdims=True)
        return np.where(mask, np.expand_dims(g, axis) / counts, 0.0)

    return _rec1(out, a, back)


def _reduce_logsumexp(a: Var, axis) -> Var:
    data = a.data
    m = np.max(data, axis=axis, keepdims=True)
    msafe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        outk = msafe + np.log(np.sum(np.exp(data - msafe), axis=axis, keepdims=True))
    out = outk.reshape(()) if axis is None else np.squeeze(outk, axis=axis)

    def back(g):
        with np.errstate(invalid="ignore"):
            soft = np.exp(data - outk)
        soft = np.where(np.isfinite(outk), soft, 0.0)
        if axis is None:
            return g * soft
        return np.expand_dims(g, axis) * soft

    return _rec1(out, a, back)


def reduce(kind: str, a, axis=None) -> Var:
    """Reductions: sum, max, and max-subtracted logsumexp."""
    a = _lift(a)
    if a.data.size == 0:
        raise ValueError("empty reduction")
    if kind == "sum":
        return _reduce_sum(a, axis)
    if kind == "max":
        return _reduce_max(a, axis)
    if kind == "logsumexp":
        return _reduce_logsumexp(a, axis)
    raise ValueError(f"unknown reduction {kind!r}")


def logsumexp(a, axis=None) -> Var:
    return reduce("logsumexp", a, axis)


# ---------------------------------------------------------------------------
# structural ops


def stop_gradient(a) -> Var:
    """Forward identity, zero gradient to all ancestors."""
    a = _lift(a)
    return Var(a.data)


def reshape(a, shape) -> Var:
    a = _lift(a)
    old = a.data.shape
    return _rec1(a.data.reshape(shape), a, lambda g: g.reshape(old))


def transpose(a) -> Var:
    a = _lift(a)
    if a.data.ndim != 2:
        raise ValueError("transpose expects a matrix")
    return _rec1(a.data.T.copy(), a, lambda g: g.T)


def gather_rows(a, idx) -> Var:
    """Select rows (or elements of a vector) by integer index; backward scatter-adds."""
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[idx]
    shape = a.data.shape

    def back(g):
        acc = np.zeros(shape)
        np.add.at(acc, idx, g)
        return acc

    return _rec1(out, a, back)


def stack_rows(rows) -> Var:
    """Stack equal-shape Vars along a new leading axis; backward splits rows."""
    rows = [_lift(r) for r in rows]
    out = np.stack([r.data for r in rows])
    tape = _ACTIVE.get()
    live = [(i, r.nid) for i, r in enumerate(rows) if r.nid is not None]
    if tape is None or not live:
        return Var(out)

    def fn(g):
        return tuple(g[i] for i, _ in live)

    nid = len(tape.nodes)
    tape.nodes.append((tuple(pid for _, pid in live), fn))
    return Var(out, nid, tape)


def custom_vjp(forward_value, parents, backward_rule) -> Var:
    """Record a node with a caller-supplied cotangent rule.

    The rule receives the incoming cotangent and must return one cotangent
    per parent, in order; it is invoked exactly once per backward call.
    Entries for constant parents are ignored.
    """
    out = np.asarray(forward_value, dtype=np.float64)
    tape = _ACTIVE.get()
    live = [(i, p.nid) for i, p in enumerate(parents) if p.nid is not None]
    if tape is None or not live:
        return Var(out)
    n_parents = len(parents)

    def fn(g):
        outs = backward_rule(g)
        if len(outs) != n_parents:
            raise ValueError(
                f"custom_vjp rule returned {len(outs)} cotangents for {n_parents} parents"
            )
        return tuple(outs[i] for i, _ in live)

    nid = len(tape.nodes)
    tape.nodes.append((tuple(pid for _, pid in live), fn))
    return Var(out, nid, tape)


# ---------------------------------------------------------------------------
# gradients


def grad(loss: Var, wrt) -> list:
    """Gradient of a scalar loss w.r.t. each requested Var.

    Pure given the tape: repeated calls return identical arrays.  Constants
    and untouched leaves get exact zeros.
    """
    if loss.data.shape != ():
        raise ValueError("grad requires a scalar loss")
    out = [None] * len(wrt)
    if loss.nid is None:
        return [np.zeros_like(np.asarray(w.data)) for w in wrt]
    tape = loss.tape
    nodes = tape.nodes
    acc = {loss.nid: np.ones(())}
    for nid in range(loss.nid, -1, -1):
        g = acc.get(nid)
        if g is None:
            continue
        pids, fn = nodes[nid]
        if fn is None:
            continue  # leaf; value stays in acc for collection
        del acc[nid]
        for pid, pg in zip(pids, fn(g)):
            prev = acc.get(pid)
            acc[pid] = pg if prev is None else prev + pg
    for k, w in enumerate(wrt):
        if w.nid is None:
            out[k] = np.zeros_like(np.asarray(w.data))
        else:
            g = acc.get(w.nid)
            if g is None:
                out[k] = np.zeros_like(np.asarray(w.data))
            else:
                out[k] = np.broadcast_to(g, w.data.shape).astype(np.float64).copy()
    return out


def finite_diff_check(f, point, step: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    ``f`` maps one Var per entry of ``point`` to a scalar Var.  The error
    metric per coordinate is |autodiff - numeric| / max(1, |numeric|).
    """
    point = [np.asarray(p, dtype=np.float64) for p in point]
    with Tape():
        vars_ = [leaf(p) for p in point]
        loss = f(*vars_)
        gs = grad(loss, vars_)

    def value_at(arrays):
        return float(f(*[constant(a) for a in arrays]).data)

    worst = 0.0
    for i, p in enumerate(point):
        flat = p.reshape(-1)
        gflat = gs[i].reshape(-1)
        for j in range(flat.size):
            bumped = [q.copy() for q in point]
            bumped[i].reshape(-1)[j] = flat[j] + step
            fp = value_at(bumped)
            bumped[i].reshape(-1)[j] = flat[j] - step
            fm = value_at(bumped)
            numeric = (fp - fm) / (2.0 * step)
            err = abs(gflat[j] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
