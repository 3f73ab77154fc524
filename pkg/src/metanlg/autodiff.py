"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every forward operation is recorded as a graph node whose local derivative
rules are themselves expressed through graph operations. Because a backward
pass therefore builds ordinary nodes, the output of ``grad`` can be
differentiated again; that is exactly what ``grad_through_update`` needs to
push a gradient through a one-step gradient-descent update, Hessian-vector
term included.

Conventions:

* float64 everywhere -- second-order finite-difference checks are hopeless
  at 32-bit precision.
* every op verifies its output is finite and raises ``NonFiniteError``
  otherwise, so NaN/Inf never travel silently through a tape.
* dropout is plain multiplication by a caller-supplied mask; mask sampling
  is the model's business, which keeps gradient checks deterministic.
* a tape (a connected set of nodes) belongs to one logical thread; nodes
  are never mutated after construction.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Node",
    "NonFiniteError",
    "ShapeError",
    "TapeError",
    "ParameterVector",
    "GradientVector",
    "TapedParams",
    "leaf",
    "constant",
    "detach",
    "forward_op",
    "grad",
    "grad_node",
    "grad_through_update",
]


class ShapeError(ValueError):
    """Operand shapes are invalid for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class TapeError(RuntimeError):
    """The tape is used inconsistently (non-scalar loss, foreign leaf...)."""


_node_ids = itertools.count()


def _as_f64(value):
    arr = np.asarray(value, dtype=np.float64)
    return arr


def _check_finite(value, kind):
    # one C-level reduction; NaN/Inf in any entry poisons the sum
    if not math.isfinite(float(value.sum())):
        raise NonFiniteError(f"op '{kind}' produced non-finite values")


class Node:
    """One recorded operation: cached forward value plus local vjp closures.

    ``vjps`` holds one closure per parent; each maps the adjoint of this node
    (a Node) to the adjoint contribution for that parent (also a Node), so
    backward passes are themselves differentiable.
    """

    __slots__ = ("id", "kind", "value", "parents", "vjps", "requires_grad")

    def __init__(self, kind, value, parents=(), requires_grad=None):
        self.id = next(_node_ids)
        self.kind = kind
        self.value = value
        self.parents = parents
        self.vjps = ()
        if requires_grad is None:
            requires_grad = False
            for p in parents:
                if p.requires_grad:
                    requires_grad = True
                    break
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, kind={self.kind!r}, shape={self.shape})"

    # Small amount of operator sugar; the named functions below do the work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return negate(self)


def leaf(value):
    """Differentiable leaf (a parameter buffer)."""
    v = _as_f64(value)
    _check_finite(v, "leaf")
    return Node("leaf", v, requires_grad=True)


def constant(value):
    """Non-differentiable leaf (data, masks, literals)."""
    v = _as_f64(value)
    _check_finite(v, "constant")
    return Node("constant", v, requires_grad=False)


def detach(node):
    """The same value, cut off from the tape (gradient stops here)."""
    return constant(node.value)


def _unary(kind, x, value, make_vjp):
    out = Node(kind, value, (x,))
    if x.requires_grad:
        out.vjps = (make_vjp(out),)
    else:
        out.vjps = (None,)
    return out


def _binary(kind, a, b, value, vjp_a, vjp_b):
    out = Node(kind, value, (a, b))
    out.vjps = (vjp_a(out) if a.requires_grad else None,
                vjp_b(out) if b.requires_grad else None)
    return out


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    v = a.value + b.value
    return _binary("add", a, b, v,
                   lambda out: lambda g: g,
                   lambda out: lambda g: g)


def negate(x):
    v = -x.value
    return _unary("negate", x, v, lambda out: lambda g: negate(g))


def sub(a, b):
    return add(a, negate(b))


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    v = a.value * b.value
    return _binary("mul", a, b, v,
                   lambda out: lambda g: mul(g, b),
                   lambda out: lambda g: mul(g, a))


def scale(x, c):
    """Multiply by a python float constant."""
    c = float(c)
    v = x.value * c
    return _unary("scale", x, v, lambda out: lambda g: scale(g, c))


def smul(s, x):
    """Scalar node times tensor node, elementwise."""
    if s.shape != ():
        raise ShapeError(f"smul: scalar operand has shape {s.shape}")
    v = s.value * x.value
    return _binary("smul", s, x, v,
                   lambda out: lambda g: sum_(mul(g, x)),
                   lambda out: lambda g: smul(s, g))


def matmul(a, b):
    """Matrix product; either operand may be 1-D (vector) instead."""
    av, bv = a.value, b.value
    if av.shape[-1 if av.ndim > 1 else 0] != bv.shape[0]:
        raise ShapeError(f"matmul: {av.shape} @ {bv.shape}")
    if av.ndim == 2 and bv.ndim == 2:
        v = av @ bv
        _check_finite(v, "matmul")
        return _binary("matmul", a, b, v,
                       lambda out: lambda g: matmul(g, transpose(b)),
                       lambda out: lambda g: matmul(transpose(a), g))
    if av.ndim == 1 and bv.ndim == 2:
        v = av @ bv
        _check_finite(v, "matmul")
        k, n = bv.shape
        return _binary("matmul", a, b, v,
                       lambda out: lambda g: matmul(b, g),
                       lambda out: lambda g: matmul(reshape(a, (k, 1)),
                                                    reshape(g, (1, n))))
    if av.ndim == 2 and bv.ndim == 1:
        v = av @ bv
        _check_finite(v, "matmul")
        m, k = av.shape
        return _binary("matmul", a, b, v,
                       lambda out: lambda g: matmul(reshape(g, (m, 1)),
                                                    reshape(b, (1, k))),
                       lambda out: lambda g: matmul(transpose(a), g))
    raise ShapeError(f"matmul: unsupported ranks {av.ndim} and {bv.ndim}")


def transpose(x):
    if x.value.ndim != 2:
        raise ShapeError("transpose expects a 2-D operand")
    v = x.value.T  # view; node values are never mutated
    return _unary("transpose", x, v, lambda out: lambda g: transpose(g))


def _identity_vjp(out):
    return lambda g: g


def accumulate(parts):
    """Sum of same-shape nodes as a single n-ary node.

    Used by the backward pass to combine fan-out adjoint contributions
    without building a chain of binary adds.
    """
    if len(parts) == 1:
        return parts[0]
    first = parts[0].value
    v = first.copy()
    for p in parts[1:]:
        if p.value.shape != first.shape:
            raise ShapeError("accumulate: operand shapes differ")
        v += p.value
    out = Node("accumulate", v, tuple(parts))
    out.vjps = tuple(_identity_vjp(out) if p.requires_grad else None
                     for p in parts)
    return out


def sigmoid(x):
    v = 1.0 / (1.0 + np.exp(-x.value))
    _check_finite(v, "sigmoid")

    def make(out):
        def vjp(g):
            gy = mul(g, out)
            return sub(gy, mul(gy, out))
        return vjp

    return _unary("sigmoid", x, v, make)


def tanh(x):
    v = np.tanh(x.value)

    def make(out):
        def vjp(g):
            return sub(g, mul(g, mul(out, out)))
        return vjp

    return _unary("tanh", x, v, make)


def exp(x):
    with np.errstate(over="ignore"):
        v = np.exp(x.value)
    _check_finite(v, "exp")
    return _unary("exp", x, v, lambda out: lambda g: mul(g, out))


def log(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.log(x.value)
    _check_finite(v, "log")
    return _unary("log", x, v, lambda out: lambda g: mul(g, reciprocal(x)))


def reciprocal(x):
    with np.errstate(divide="ignore"):
        v = 1.0 / x.value
    _check_finite(v, "reciprocal")

    def make(out):
        def vjp(g):
            return negate(mul(g, mul(out, out)))
        return vjp

    return _unary("reciprocal", x, v, make)


def softmax(x):
    if x.value.ndim != 1:
        raise ShapeError("softmax expects a 1-D operand")
    shifted = x.value - np.max(x.value)
    e = np.exp(shifted)
    v = e / np.sum(e)
    _check_finite(v, "softmax")

    def make(out):
        def vjp(g):
            gy = mul(g, out)
            return sub(gy, smul(sum_(gy), out))
        return vjp

    return _unary("softmax", x, v, make)


def log_softmax(x):
    """Log-softmax over the last axis (1-D vector or 2-D rows)."""
    if x.value.ndim not in (1, 2):
        raise ShapeError("log_softmax expects a 1-D or 2-D operand")
    shifted = x.value - np.max(x.value, axis=-1, keepdims=True)
    v = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    _check_finite(v, "log_softmax")

    def make(out):
        def vjp(g):
            if g.value.ndim == 1:
                return sub(g, smul(sum_(g), exp(out)))
            return sub(g, scale_rows(exp(out), sum_last(g)))
        return vjp

    return _unary("log_softmax", x, v, make)


def sum_(x):
    """Sum over all entries, yielding a scalar (shape ()) node."""
    v = np.asarray(np.sum(x.value))
    _check_finite(v, "sum")
    shape = x.value.shape

    def make(out):
        def vjp(g):
            return smul(g, constant(np.ones(shape)))
        return vjp

    return _unary("sum", x, v, make)


def reshape(x, shape):
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.value.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    v = x.value.reshape(shape)
    old = x.value.shape
    return _unary("reshape", x, v, lambda out: lambda g: reshape(g, old))


def concat(parts):
    """Concatenate along the last axis (leading dims must agree)."""
    parts = tuple(parts)
    lead = parts[0].value.shape[:-1]
    for p in parts:
        if p.value.ndim < 1 or p.value.shape[:-1] != lead:
            raise ShapeError("concat operands have mismatched leading dims")
    v = np.concatenate([p.value for p in parts], axis=-1)
    out = Node("concat", v, parts)
    offsets = np.cumsum([0] + [p.value.shape[-1] for p in parts])

    def make(i):
        lo, hi = int(offsets[i]), int(offsets[i + 1])
        return lambda g: slice_(g, lo, hi)

    out.vjps = tuple(make(i) if p.requires_grad else None
                     for i, p in enumerate(parts))
    return out


def slice_(x, start, stop):
    """Contiguous slice x[..., start:stop] along the last axis."""
    if x.value.ndim < 1:
        raise ShapeError("slice expects at least one axis")
    n = x.value.shape[-1]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice [{start}:{stop}] out of range for length {n}")
    v = x.value[..., start:stop]
    shape = x.value.shape
    return _unary("slice", x, v,
                  lambda out: lambda g: pad_slice(g, start, shape))


def pad_slice(x, start, shape):
    """Embed a last-axis segment into zeros of the given full shape."""
    shape = tuple(shape)
    seg = x.value.shape[-1]
    if x.value.shape[:-1] != shape[:-1] or start + seg > shape[-1]:
        raise ShapeError(f"pad_slice: segment {x.shape} at {start} does not "
                         f"fit {shape}")
    v = np.zeros(shape)
    v[..., start:start + seg] = x.value
    return _unary("pad_slice", x, v,
                  lambda out: lambda g: slice_(g, start, start + seg))


def embedding(table, index):
    """Row lookup table[index] for a 2-D table."""
    if table.value.ndim != 2:
        raise ShapeError("embedding expects a 2-D table")
    index = int(index)
    rows = table.value.shape[0]
    if not 0 <= index < rows:
        raise ShapeError(f"embedding: row {index} out of range ({rows} rows)")
    v = table.value[index]
    return _unary("embedding", table, v,
                  lambda out: lambda g: scatter_row(g, index, rows))


def scatter_row(x, index, rows):
    """Place a 1-D row into an otherwise-zero (rows, len(x)) matrix."""
    if x.value.ndim != 1:
        raise ShapeError("scatter_row expects a 1-D operand")
    v = np.zeros((rows, x.value.shape[0]))
    v[index] = x.value
    return _unary("scatter_row", x, v,
                  lambda out: lambda g: embedding(g, index))


# --- batched variants: one tape node covers a whole minibatch row-block ---


def embedding_rows(table, indices):
    """Batched row lookup table[indices] -> (B, cols)."""
    if table.value.ndim != 2:
        raise ShapeError("embedding_rows expects a 2-D table")
    idx = np.asarray(indices, dtype=np.int64)
    rows = table.value.shape[0]
    if idx.ndim != 1 or (len(idx) and (idx.min() < 0 or idx.max() >= rows)):
        raise ShapeError("embedding_rows: bad index vector")
    v = table.value[idx]
    return _unary("embedding_rows", table, v,
                  lambda out: lambda g: scatter_rows(g, idx, rows))


def scatter_rows(x, indices, rows):
    """Sum (B, cols) rows into an otherwise-zero (rows, cols) matrix."""
    if x.value.ndim != 2:
        raise ShapeError("scatter_rows expects a 2-D operand")
    idx = np.asarray(indices, dtype=np.int64)
    v = np.zeros((rows, x.value.shape[1]))
    np.add.at(v, idx, x.value)
    return _unary("scatter_rows", x, v,
                  lambda out: lambda g: embedding_rows(g, idx))


def add_bias(x, bias):
    """(B, n) plus a broadcast (n,) bias."""
    if x.value.ndim != 2 or bias.value.ndim != 1 \
            or x.value.shape[1] != bias.value.shape[0]:
        raise ShapeError(f"add_bias: {x.shape} plus {bias.shape}")
    v = x.value + bias.value
    return _binary("add_bias", x, bias, v,
                   lambda out: lambda g: g,
                   lambda out: lambda g: sum_rows(g))


def sum_rows(x):
    """Sum over axis 0: (B, n) -> (n,)."""
    if x.value.ndim != 2:
        raise ShapeError("sum_rows expects a 2-D operand")
    v = np.sum(x.value, axis=0)
    b = x.value.shape[0]
    return _unary("sum_rows", x, v,
                  lambda out: lambda g: broadcast_rows(g, b))


def broadcast_rows(x, n_rows):
    """Repeat a (n,) vector into (n_rows, n)."""
    if x.value.ndim != 1:
        raise ShapeError("broadcast_rows expects a 1-D operand")
    v = np.broadcast_to(x.value, (n_rows, x.value.shape[0])).copy()
    return _unary("broadcast_rows", x, v,
                  lambda out: lambda g: sum_rows(g))


def sum_last(x):
    """Sum over the last axis: (B, n) -> (B,)."""
    if x.value.ndim != 2:
        raise ShapeError("sum_last expects a 2-D operand")
    v = np.sum(x.value, axis=-1)
    n = x.value.shape[1]

    def make(out):
        def vjp(g):
            return scale_rows(constant(np.ones((g.value.shape[0], n))), g)
        return vjp

    return _unary("sum_last", x, v, make)


def scale_rows(x, s):
    """Multiply each row of (B, n) by the matching entry of (B,)."""
    if x.value.ndim != 2 or s.value.ndim != 1 \
            or x.value.shape[0] != s.value.shape[0]:
        raise ShapeError(f"scale_rows: {x.shape} by {s.shape}")
    v = x.value * s.value[:, None]
    return _binary("scale_rows", x, s, v,
                   lambda out: lambda g: scale_rows(g, s),
                   lambda out: lambda g: sum_last(mul(g, x)))


def pick_last(x, indices):
    """Select one entry per row: (B, n), (B,) ids -> (B,)."""
    if x.value.ndim != 2:
        raise ShapeError("pick_last expects a 2-D operand")
    idx = np.asarray(indices, dtype=np.int64)
    b, n = x.value.shape
    if idx.shape != (b,) or (len(idx) and (idx.min() < 0 or idx.max() >= n)):
        raise ShapeError("pick_last: bad index vector")
    v = x.value[np.arange(b), idx]
    return _unary("pick_last", x, v,
                  lambda out: lambda g: put_last(g, idx, n))


def put_last(x, indices, n_cols):
    """Place (B,) values at per-row positions of a zero (B, n) matrix."""
    if x.value.ndim != 1:
        raise ShapeError("put_last expects a 1-D operand")
    idx = np.asarray(indices, dtype=np.int64)
    b = x.value.shape[0]
    v = np.zeros((b, n_cols))
    v[np.arange(b), idx] = x.value
    return _unary("put_last", x, v,
                  lambda out: lambda g: pick_last(g, idx))


def dropout(x, mask):
    """Multiply by a fixed, pre-scaled mask array (not a node)."""
    mask = _as_f64(mask)
    if mask.shape != x.shape:
        raise ShapeError(f"dropout: mask {mask.shape} vs value {x.shape}")
    v = x.value * mask
    return _unary("dropout", x, v, lambda out: lambda g: dropout(g, mask))


_OP_TABLE = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softmax": softmax,
    "log": log,
    "negate": negate,
    "sum": sum_,
    "concat": lambda *nodes: concat(nodes),
    "slice": slice_,
    "embedding": embedding,
    "dropout": dropout,
}


def forward_op(kind, *inputs, **attrs):
    """Apply a supported op by name; raises ShapeError/KeyError on misuse."""
    try:
        fn = _OP_TABLE[kind]
    except KeyError:
        raise ShapeError(f"unsupported op kind {kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# Parameter bookkeeping


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple
    offset: int

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=np.int64))


class ParameterVector:
    """Named, shaped segments over one flat float64 buffer.

    Segments are non-overlapping and cover the buffer exactly; two vectors
    with equal segment tables can be combined elementwise.
    """

    def __init__(self, segments, data):
        self.segments = tuple(segments)
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        off = 0
        for seg in self.segments:
            if seg.offset != off:
                raise ShapeError(f"segment {seg.name} at offset {seg.offset}, "
                                 f"expected {off}")
            off += seg.size
        if off != self.data.size:
            raise ShapeError(f"segments cover {off} values, buffer has "
                             f"{self.data.size}")
        self._by_name = {s.name: s for s in self.segments}

    @classmethod
    def build(cls, spec, init=None):
        """Create from [(name, shape), ...]; ``init`` fills the buffer."""
        segments = []
        off = 0
        for name, shape in spec:
            seg = Segment(name, tuple(shape), off)
            segments.append(seg)
            off += seg.size
        data = np.zeros(off) if init is None else _as_f64(init)
        return cls(segments, data)

    @property
    def size(self):
        return self.data.size

    def seg(self, name):
        """Read-only reshaped view of one segment."""
        s = self._by_name[name]
        return self.data[s.offset:s.offset + s.size].reshape(s.shape)

    def same_layout(self, other):
        return self.segments == other.segments

    def copy(self):
        return ParameterVector(self.segments, self.data.copy())

    def zeros_like(self):
        return ParameterVector(self.segments, np.zeros(self.size))

    def with_data(self, data):
        return ParameterVector(self.segments, data)

    def add_scaled(self, other, coeff):
        """self + coeff * other, as a new vector (layouts must match)."""
        if not self.same_layout(other):
            raise ShapeError("parameter layouts differ")
        return self.with_data(self.data + coeff * other.data)

    def norm(self):
        return float(np.linalg.norm(self.data))

    def __eq__(self, other):
        return (isinstance(other, ParameterVector)
                and self.segments == other.segments
                and np.array_equal(self.data, other.data))

    def __repr__(self):
        names = ", ".join(s.name for s in self.segments)
        return f"ParameterVector({self.size} values: {names})"


# A gradient has exactly the layout of the parameters it differentiates.
GradientVector = ParameterVector


class TapedParams:
    """A ParameterVector lifted onto a tape.

    ``flat`` is the underlying (P,) node; ``seg(name)`` gives reshaped
    segment nodes carved out of it. Loss builders receive one of these.
    """

    def __init__(self, origin, flat=None):
        self.origin = origin
        self.flat = leaf(origin.data) if flat is None else flat
        self._segs = {}

    def seg(self, name):
        node = self._segs.get(name)
        if node is None:
            s = self.origin._by_name[name]
            node = reshape(slice_(self.flat, s.offset, s.offset + s.size),
                           s.shape)
            self._segs[name] = node
        return node

    def gradient(self, values):
        return GradientVector(self.origin.segments, values)


# ---------------------------------------------------------------------------
# Backward pass


def _reachable(loss, wrt):
    """Gradient-relevant nodes reachable from ``loss``, checking leaves."""
    seen = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen[node.id] = node
        if node.requires_grad and not node.parents and node is not wrt:
            raise TapeError("loss depends on a parameter leaf that is not "
                            "the one being differentiated")
        for parent in node.parents:
            if parent.requires_grad and parent.id not in seen:
                stack.append(parent)
    return sorted(seen.values(), key=lambda n: n.id, reverse=True)


def grad_node(loss, wrt):
    """Adjoint of ``wrt`` as a Node (differentiable again)."""
    if loss.shape != ():
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return constant(np.zeros_like(wrt.value))
    order = _reachable(loss, wrt)
    contribs = {loss.id: [constant(np.ones(()))]}
    for node in order:
        parts = contribs.get(node.id)
        if parts is None or node is wrt:
            continue
        del contribs[node.id]
        g = accumulate(parts)
        for parent, vjp in zip(node.parents, node.vjps):
            if vjp is None:
                continue
            bucket = contribs.get(parent.id)
            if bucket is None:
                contribs[parent.id] = [vjp(g)]
            else:
                bucket.append(vjp(g))
    parts = contribs.get(wrt.id)
    if parts is None:
        return constant(np.zeros_like(wrt.value))
    return accumulate(parts)


def grad(loss, params):
    """Gradient of a scalar loss node w.r.t. a TapedParams' flat buffer.

    Segments that do not participate in the loss get zero gradient.
    """
    node = grad_node(loss, params.flat)
    return params.gradient(node.value.copy())


def grad_through_update(outer_loss_builder, inner_loss_builder, theta, alpha,
                        first_order=False, with_outer_loss=False):
    """Gradient of outer_loss(theta - alpha * grad(inner_loss)(theta)).

    Both builders must be pure functions from a TapedParams to a scalar
    node. With ``first_order=True`` the inner gradient is detached, which
    drops the curvature (Hessian-vector) term and leaves the plain gradient
    of the outer loss at the adapted point.
    """
    if not alpha >= 0:
        raise ValueError("alpha must be non-negative")
    tp = TapedParams(theta)
    inner = inner_loss_builder(tp)
    if inner.shape != ():
        raise TapeError("inner loss builder must produce a scalar")
    g_inner = grad_node(inner, tp.flat)
    if first_order:
        g_inner = detach(g_inner)
    theta_prime = sub(tp.flat, scale(g_inner, alpha))
    adapted = TapedParams(theta, flat=theta_prime)
    outer = outer_loss_builder(adapted)
    if outer.shape != ():
        raise TapeError("outer loss builder must produce a scalar")
    result = grad(outer, tp)
    if with_outer_loss:
        return result, float(outer.value)
    return result
