"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every :class:`Node` in creation order, which is
already a topological order of the computation graph.  Calling
:func:`backward` on a scalar root walks the tape in reverse and fills the
gradient slot of every node the root depends on.

Everything is float64.  The Monte-Carlo estimators built on top of this
engine (log of a mean of likelihoods raised to a power) lose precision
fast in 32-bit, so values are coerced on the way in.

Elementwise binary ops accept numpy-broadcastable operands; the backward
pass sums gradients over the broadcast axes.  ``matmul`` supports stacked
(batched) operands with the same rule, which is what lets a batch of K
weight samples run through the main network in one graph instead of K.
"""

from __future__ import annotations

import numpy as np

LOG2PI = float(np.log(2.0 * np.pi))


class AutodiffError(RuntimeError):
    """Base class for graph construction and backward-pass failures."""


class ShapeMismatch(AutodiffError):
    """Operand shapes do not conform to the op's semantics (caller bug)."""


class NonFiniteValue(AutodiffError):
    """An op produced a non-finite value from finite inputs (overflow)."""


class Node:
    """One value in the computation graph.

    ``value`` is immutable after construction.  The gradient slot is
    allocated lazily; reading :attr:`grad` before a backward pass returns
    zeros of the right shape.  Nodes whose ancestry contains no
    differentiable leaf (``needs_grad`` False, e.g. constants and anything
    computed purely from them) are skipped by the backward pass; their
    gradient reads as zero.
    """

    __slots__ = ("value", "op", "parents", "tape", "_vjps", "_grad", "needs_grad")

    def __init__(self, tape, value, op, parents=(), vjps=()):
        self.value = value
        self.op = op
        self.parents = parents
        self.tape = tape
        self._vjps = vjps
        self._grad = None
        if parents:
            self.needs_grad = any(p.needs_grad for p in parents)
        else:
            self.needs_grad = op != "const"

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self):
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def _accumulate(self, g):
        if self._grad is None:
            # Copy: vjp outputs may be views into a consumer's gradient.
            self._grad = np.array(g, dtype=np.float64)
        else:
            self._grad += g

    def item(self):
        return float(self.value.reshape(()))

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    # Operator sugar; python scalars are wrapped as constants on the tape.
    def __add__(self, other):
        return add(self, _wrap(self.tape, other))

    def __radd__(self, other):
        return add(_wrap(self.tape, other), self)

    def __sub__(self, other):
        return sub(self, _wrap(self.tape, other))

    def __rsub__(self, other):
        return sub(_wrap(self.tape, other), self)

    def __mul__(self, other):
        return mul(self, _wrap(self.tape, other))

    def __rmul__(self, other):
        return mul(_wrap(self.tape, other), self)

    def __truediv__(self, other):
        return div(self, _wrap(self.tape, other))

    def __rtruediv__(self, other):
        return div(_wrap(self.tape, other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Topologically ordered record of one forward computation."""

    def __init__(self):
        self.nodes = []
        self.root = None
        self._backward_done = False

    def leaf(self, value, op="leaf"):
        """Register an input array (parameter or data) on the tape."""
        value = np.asarray(value, dtype=np.float64)
        if not np.isfinite(value).all():
            raise NonFiniteValue(f"non-finite {op} input")
        node = Node(self, value, op)
        self.nodes.append(node)
        return node

    def constant(self, value):
        """Like :meth:`leaf` but tagged as a constant (no trainable role)."""
        return self.leaf(value, op="const")

    def reset_gradients(self):
        for node in self.nodes:
            node._grad = None
        self.root = None
        self._backward_done = False


def _wrap(tape, other):
    if isinstance(other, Node):
        return other
    return tape.constant(other)


def _record(tape, value, op, parents, vjps):
    if any(p.tape is not tape for p in parents):
        raise AutodiffError(f"{op}: operands live on different tapes")
    if not np.isfinite(value).all():
        raise NonFiniteValue(f"{op} produced a non-finite value from finite inputs")
    node = Node(tape, value, op, parents, vjps)
    tape.nodes.append(node)
    return node


# Overflow/invalid results are detected by _record and raised as
# NonFiniteValue; numpy's own warnings would only duplicate that signal.
def _quiet():
    return np.errstate(over="ignore", divide="ignore", invalid="ignore")


def backward(root):
    """Populate gradient slots of everything the scalar ``root`` depends on."""
    tape = root.tape
    if tape._backward_done:
        raise AutodiffError("backward called twice without reset_gradients")
    if root.value.size != 1:
        raise AutodiffError(f"backward root must be scalar, got shape {root.shape}")
    tape.root = root
    tape._backward_done = True
    root._accumulate(np.ones_like(root.value))
    for node in reversed(tape.nodes):
        if node._grad is None or not node.parents:
            continue
        g = node._grad
        for parent, vjp in zip(node.parents, node._vjps):
            if parent.needs_grad:
                parent._accumulate(vjp(g))


def _unbroadcast(g, shape):
    """Sum ``g`` over the axes numpy broadcasting introduced or stretched."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"{op}: {a.shape} vs {b.shape}") from exc


# ---------------------------------------------------------------------------
# Elementwise binary primitives
# ---------------------------------------------------------------------------

def add(a, b):
    _broadcast_check("add", a, b)
    return _record(
        a.tape, a.value + b.value, "add", (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def broadcast_add(matrix, row):
    """Bias-style add of a row vector onto every row of a matrix."""
    return add(matrix, row)


def sub(a, b):
    _broadcast_check("sub", a, b)
    return _record(
        a.tape, a.value - b.value, "sub", (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    _broadcast_check("mul", a, b)
    return _record(
        a.tape, a.value * b.value, "mul", (a, b),
        (
            lambda g: _unbroadcast(g * b.value, a.shape),
            lambda g: _unbroadcast(g * a.value, b.shape),
        ),
    )


def div(a, b):
    _broadcast_check("div", a, b)
    with _quiet():
        out = a.value / b.value
    return _record(
        a.tape, out, "div", (a, b),
        (
            lambda g: _unbroadcast(g / b.value, a.shape),
            lambda g: _unbroadcast(-g * out / b.value, b.shape),
        ),
    )


def matmul(a, b):
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeMismatch(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    return _record(
        a.tape, a.value @ b.value, "matmul", (a, b),
        (
            lambda g: _unbroadcast(g @ b.value.swapaxes(-1, -2), a.shape),
            lambda g: _unbroadcast(a.value.swapaxes(-1, -2) @ g, b.shape),
        ),
    )


# ---------------------------------------------------------------------------
# Elementwise unary primitives
# ---------------------------------------------------------------------------

def leaky_relu(x, slope=0.2):
    mask = np.where(x.value >= 0.0, 1.0, slope)
    return _record(x.tape, x.value * mask, "leaky-relu", (x,), (lambda g: g * mask,))


def exp(x):
    with _quiet():
        out = np.exp(x.value)
    return _record(x.tape, out, "exp", (x,), (lambda g: g * out,))


def log(x):
    with _quiet():
        out = np.log(x.value)
    return _record(x.tape, out, "log", (x,), (lambda g: g / x.value,))


def square(x):
    with _quiet():
        out = x.value ** 2
    return _record(x.tape, out, "square", (x,), (lambda g: 2.0 * x.value * g,))


def sqrt(x):
    out = np.sqrt(x.value)
    return _record(x.tape, out, "sqrt", (x,), (lambda g: g / (2.0 * out),))


def _sigmoid(x):
    # exp(-|x|) never overflows; both branches share it.
    t = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + t), t / (1.0 + t))


def sigmoid(x):
    out = _sigmoid(x.value)
    return _record(x.tape, out, "sigmoid", (x,), (lambda g: g * out * (1.0 - out),))


def softplus(x):
    """log(1 + exp(x)), the stable building block of log-sigmoid forms."""
    out = np.logaddexp(0.0, x.value)
    return _record(
        x.tape, out, "softplus", (x,), (lambda g: g * _sigmoid(x.value),)
    )


def scale(x, c):
    """Multiply by a python-float constant."""
    c = float(c)
    return _record(x.tape, x.value * c, "scalar-scale", (x,), (lambda g: g * c,))


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _restore_axis(g, x_shape, axis):
    if axis is None:
        return np.broadcast_to(g, x_shape)
    return np.broadcast_to(np.expand_dims(g, axis), x_shape)


def sum_(x, axis=None):
    out = np.sum(x.value, axis=axis)
    return _record(
        x.tape, np.asarray(out), "sum", (x,),
        (lambda g: _restore_axis(g, x.shape, axis).copy(),),
    )


def mean(x, axis=None):
    out = np.mean(x.value, axis=axis)
    n = x.value.size if axis is None else x.shape[axis]
    return _record(
        x.tape, np.asarray(out), "mean", (x,),
        (lambda g: _restore_axis(g, x.shape, axis) / n,),
    )


def logsumexp(x, axis):
    """Max-shifted log-sum-exp along one axis; finite for any finite input."""
    m = np.max(x.value, axis=axis, keepdims=True)
    out = np.squeeze(m, axis=axis) + np.log(
        np.sum(np.exp(x.value - m), axis=axis)
    )
    softmax = np.exp(x.value - np.expand_dims(out, axis))

    def vjp(g):
        return np.expand_dims(g, axis) * softmax

    return _record(x.tape, out, "logsumexp", (x,), (vjp,))


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def concat(nodes, axis=0):
    if not nodes:
        raise ShapeMismatch("concat of zero nodes")
    tape = nodes[0].tape
    out = np.concatenate([n.value for n in nodes], axis=axis)
    offsets = np.cumsum([0] + [n.shape[axis] for n in nodes])

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return _record(
        tape, out, "concat", tuple(nodes),
        tuple(make_vjp(i) for i in range(len(nodes))),
    )


def narrow(x, axis, start, length):
    """Contiguous slice of ``length`` entries along ``axis``."""
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeMismatch(
            f"slice [{start}:{start + length}] outside axis of size {x.shape[axis]}"
        )
    sl = [slice(None)] * x.value.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def vjp(g):
        full = np.zeros_like(x.value)
        full[sl] = g
        return full

    return _record(x.tape, x.value[sl].copy(), "slice", (x,), (vjp,))


def reshape(x, shape):
    return _record(
        x.tape, x.value.reshape(shape), "reshape", (x,),
        (lambda g: g.reshape(x.shape),),
    )


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def finite_difference_check(build, x, h=1e-5):
    """Max relative error between tape gradients and central differences.

    ``build(tape, node)`` must construct a scalar root from a leaf holding
    the parameter vector ``x``.  It is evaluated once for the analytic
    gradient and twice per coordinate for the numeric one, so it must be a
    deterministic function of its input (freeze any random draws outside).
    """
    x = np.asarray(x, dtype=np.float64)
    tape = Tape()
    xn = tape.leaf(x)
    root = build(tape, xn)
    backward(root)
    analytic = xn.grad.ravel()

    def value_at(v):
        t = Tape()
        out = float(build(t, t.leaf(v)).value.reshape(()))
        if not np.isfinite(out):
            raise NonFiniteValue("objective non-finite during finite differencing")
        return out

    worst = 0.0
    flat = x.ravel()
    for i in range(flat.size):
        shift = np.zeros_like(flat)
        shift[i] = h
        numeric = (value_at((flat + shift).reshape(x.shape))
                   - value_at((flat - shift).reshape(x.shape))) / (2.0 * h)
        err = abs(analytic[i] - numeric) / (abs(analytic[i]) + abs(numeric) + 1e-12)
        worst = max(worst, err)
    return worst
