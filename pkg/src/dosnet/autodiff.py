"""Tape-based reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` records every primitive applied to its :class:`Node` values.
Leaves are created with :meth:`Tape.param` (trainable, named) or
:meth:`Tape.const`. :meth:`Tape.backward` walks the tape in reverse node-id
order, so gradient accumulation is deterministic.

Broadcasting is deliberately limited: elementwise ops accept equal shapes or
a 0-d operand; bias addition goes through :func:`add_row`.
"""
from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "Node", "Tape", "grad_check",
    "add", "sub", "mul", "div", "neg", "matmul", "add_row", "concat", "stack", "slice_",
    "reshape", "tanh", "sigmoid", "softplus", "exp", "log", "square", "sqrt", "power",
    "cos", "sin", "rotate", "gru_cell", "sum_", "mean", "masked_mean", "where", "add_scalar", "scale",
]


class Node:
    __slots__ = ("tape", "id", "value", "requires_grad", "parents", "vjp", "name", "op")

    def __init__(self, tape, nid, value, requires_grad, parents, vjp, name, op):
        self.tape = tape
        self.id = nid
        self.value = value
        self.requires_grad = requires_grad
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return slice_(self, idx)


class Tape:
    """Append-only record of primitives.

    ``check_finite`` raises :class:`NumericError` as soon as a primitive
    produces NaN or Inf, naming the offending node.
    """

    def __init__(self, check_finite=True):
        self.nodes: list[Node] = []
        self.check_finite = check_finite
        self._names: dict[str, Node] = {}

    def __len__(self):
        return len(self.nodes)

    def _new(self, value, parents=(), vjp=None, requires_grad=False, name=None, op="leaf"):
        value = np.asarray(value, dtype=np.float64)
        nid = len(self.nodes)
        if self.check_finite and not np.isfinite(value).all():
            raise NumericError(f"non-finite value produced by {op} at node {nid}", nid)
        node = Node(self, nid, value, requires_grad, parents, vjp, name, op)
        self.nodes.append(node)
        return node

    def param(self, name, value):
        if name in self._names:
            raise ValueError(f"duplicate parameter name {name!r}")
        node = self._new(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._names[name] = node
        return node

    def const(self, value):
        return self._new(np.array(value, dtype=np.float64))

    def op(self, op, value, parents, vjp):
        req = any(p.requires_grad for p in parents)
        return self._new(value, parents if req else (), vjp if req else None, req, op=op)

    def backward(self, out: Node):
        """Gradients of scalar ``out`` w.r.t. every trainable leaf, keyed by name."""
        if out.tape is not self:
            raise ValueError("output node belongs to another tape")
        if out.value.size != 1 or out.value.ndim != 0:
            raise ShapeError(f"backward needs a scalar output, got shape {out.shape}")
        grads: list = [None] * (out.id + 1)
        grads[out.id] = np.ones_like(out.value)
        for nid in range(out.id, -1, -1):
            g = grads[nid]
            node = self.nodes[nid]
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if not parent.requires_grad or pg is None:
                    continue
                if grads[parent.id] is None:
                    grads[parent.id] = pg
                else:
                    grads[parent.id] = grads[parent.id] + pg
        result = {}
        for name, leaf in self._names.items():
            g = grads[leaf.id] if leaf.id <= out.id else None
            result[name] = np.zeros_like(leaf.value) if g is None else np.asarray(g)
        return result


def _lift(tape, x):
    if isinstance(x, Node):
        return x
    return tape.const(x)


def _binary_shapes(a, b, opname):
    if a.shape == b.shape or a.value.ndim == 0 or b.value.ndim == 0:
        return
    raise ShapeError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b):
    tape = a.tape if isinstance(a, Node) else b.tape
    a, b = _lift(tape, a), _lift(tape, b)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return tape.op("add", a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    tape = a.tape if isinstance(a, Node) else b.tape
    a, b = _lift(tape, a), _lift(tape, b)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return tape.op("sub", a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    tape = a.tape if isinstance(a, Node) else b.tape
    if not isinstance(b, Node) and np.ndim(b) == 0:
        return scale(a, float(b))
    a, b = _lift(tape, a), _lift(tape, b)
    _binary_shapes(a, b, "mul")
    av, bv = a.value, b.value
    return tape.op("mul", av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    tape = a.tape if isinstance(a, Node) else b.tape
    if not isinstance(b, Node) and np.ndim(b) == 0:
        return scale(a, 1.0 / float(b))
    a, b = _lift(tape, a), _lift(tape, b)
    _binary_shapes(a, b, "div")
    av, bv = a.value, b.value
    out = av / bv
    return tape.op("div", out, (a, b),
                   lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def neg(a):
    return a.tape.op("neg", -a.value, (a,), lambda g: (-g,))


def scale(a, c):
    return a.tape.op("scale", a.value * c, (a,), lambda g: (g * c,))


def add_scalar(a, c):
    return a.tape.op("add_scalar", a.value + c, (a,), lambda g: (g,))


def matmul(a, b):
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return a.tape.op("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add_row(x, b):
    """``x`` of shape (n, m) plus row vector ``b`` of shape (m,)."""
    if x.value.ndim != 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"add_row: {x.shape} + {b.shape}")
    return x.tape.op("add_row", x.value + b.value, (x, b), lambda g: (g, g.sum(axis=0)))


def concat(nodes, axis=-1):
    nodes = list(nodes)
    tape = nodes[0].tape
    vals = [n.value for n in nodes]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    ax = axis % out.ndim
    splits = np.cumsum([v.shape[ax] for v in vals])[:-1]
    return tape.op("concat", out, tuple(nodes), lambda g: tuple(np.split(g, splits, axis=ax)))


def stack(nodes, axis=0):
    nodes = list(nodes)
    tape = nodes[0].tape
    try:
        out = np.stack([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from None
    ax = axis % out.ndim
    k = len(nodes)
    return tape.op("stack", out, tuple(nodes),
                   lambda g: tuple(np.take(g, i, axis=ax) for i in range(k)))


def slice_(a, idx):
    shape = a.shape
    out = a.value[idx]

    def vjp(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return a.tape.op("slice", np.array(out), (a,), vjp)


def reshape(a, shape):
    old = a.shape
    return a.tape.op("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def tanh(a):
    out = np.tanh(a.value)
    return a.tape.op("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def sigmoid(a):
    out = _sigmoid(a.value)
    return a.tape.op("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    x = a.value
    return a.tape.op("softplus", np.logaddexp(0.0, x), (a,), lambda g: (g * _sigmoid(x),))


def exp(a):
    out = np.exp(a.value)
    return a.tape.op("exp", out, (a,), lambda g: (g * out,))


def log(a):
    x = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return a.tape.op("log", out, (a,), lambda g: (g / x,))


def square(a):
    x = a.value
    return a.tape.op("square", x * x, (a,), lambda g: (2.0 * g * x,))


def sqrt(a):
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.value)
    return a.tape.op("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def power(a, p):
    """``a ** p`` for a float exponent; the base must be positive unless p is an integer."""
    x = a.value
    p = float(p)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.power(x, p)
    return a.tape.op("power", out, (a,), lambda g: (g * p * np.power(x, p - 1.0),))


def cos(a):
    x = a.value
    return a.tape.op("cos", np.cos(x), (a,), lambda g: (-g * np.sin(x),))


def sin(a):
    x = a.value
    return a.tape.op("sin", np.sin(x), (a,), lambda g: (g * np.cos(x),))


def rotate(theta, dx, dy):
    """Coordinates of (dx, dy) in a frame rotated by ``theta`` (i.e. R(-theta) v)."""
    c, s = cos(theta), sin(theta)
    return c * dx + s * dy, c * dy - s * dx


def sum_(a, axis=None):
    x = a.value
    if axis is None:
        return a.tape.op("sum", np.array(x.sum()), (a,), lambda g: (np.full(x.shape, g),))
    ax = axis % x.ndim
    return a.tape.op("sum", x.sum(axis=ax), (a,),
                     lambda g: (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),))


def mean(a):
    x = a.value
    n = x.size
    return a.tape.op("mean", np.array(x.mean()), (a,), lambda g: (np.full(x.shape, g / n),))


def masked_mean(values, mask):
    """Mean of ``values`` over entries where ``mask`` is nonzero.

    Masked-out entries are never read (they may hold NaN in the caller's
    raw data, but the node value here must already be finite). An all-zero
    mask yields 0 with zero gradient.
    """
    m = np.asarray(mask.value if isinstance(mask, Node) else mask, dtype=np.float64)
    if m.shape != values.shape:
        raise ShapeError(f"masked_mean: mask {m.shape} vs values {values.shape}")
    sel = m != 0
    count = float(sel.sum())
    if count == 0:
        return values.tape.op("masked_mean", np.array(0.0), (values,),
                              lambda g: (np.zeros(values.shape),))
    x = values.value
    total = np.where(sel, x, 0.0).sum()
    return values.tape.op("masked_mean", np.array(total / count), (values,),
                          lambda g: (np.where(sel, g / count, 0.0),))


def where(cond, a, b):
    """Select ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    cond = np.asarray(cond, dtype=bool)
    tape = a.tape if isinstance(a, Node) else b.tape
    a, b = _lift(tape, a), _lift(tape, b)
    if not (a.shape == b.shape == cond.shape):
        raise ShapeError(f"where: shapes {cond.shape}, {a.shape}, {b.shape}")
    return tape.op("where", np.where(cond, a.value, b.value), (a, b),
                   lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)))


def gru_cell(gx, h, wh, bh):
    """Fused GRU update (reset, update, candidate gate order).

    ``gx`` is the input projection (B, 3H) including its bias, ``h`` the
    state (B, H), ``wh`` (H, 3H) and ``bh`` (3H,) the recurrent weights.
    Equivalent to the composition of primitives in
    :func:`dosnet.models.gru_cell_composed`.
    """
    n_h = h.shape[1]
    if gx.shape != (h.shape[0], 3 * n_h) or wh.shape != (n_h, 3 * n_h) or bh.shape != (3 * n_h,):
        raise ShapeError(f"gru_cell: gx {gx.shape}, h {h.shape}, wh {wh.shape}, bh {bh.shape}")
    hv, whv = h.value, wh.value
    gxv = gx.value
    gh = hv @ whv + bh.value
    r = _sigmoid(gxv[:, :n_h] + gh[:, :n_h])
    z = _sigmoid(gxv[:, n_h:2 * n_h] + gh[:, n_h:2 * n_h])
    ghn = gh[:, 2 * n_h:]
    n = np.tanh(gxv[:, 2 * n_h:] + r * ghn)
    out = n + z * (hv - n)

    def vjp(g):
        dn_pre = g * (1.0 - z) * (1.0 - n * n)
        dz_pre = g * (hv - n) * z * (1.0 - z)
        dr_pre = dn_pre * ghn * r * (1.0 - r)
        dgx = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
        dgh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
        return dgx, g * z + dgh @ whv.T, hv.T @ dgh, dgh.sum(axis=0)

    return h.tape.op("gru_cell", out, (gx, h, wh, bh), vjp)


def grad_check(fn, point, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``fn(tape, leaves)`` must return a scalar node, where ``leaves`` maps the
    keys of ``point`` (a dict of arrays, or a single array under key ``"x"``)
    to trainable nodes. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not isinstance(point, dict):
        point = {"x": point}
    point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}

    def evaluate(values):
        tape = Tape()
        leaves = {k: tape.param(k, v) for k, v in values.items()}
        return tape, fn(tape, leaves)

    tape, out = evaluate(point)
    analytic = tape.backward(out)
    worst = 0.0
    for key, base in point.items():
        flat = base.ravel()
        for i in range(flat.size):
            plus = {k: v.copy() for k, v in point.items()}
            minus = {k: v.copy() for k, v in point.items()}
            plus[key].ravel()[i] += h
            minus[key].ravel()[i] -= h
            fp = float(evaluate(plus)[1].value)
            fm = float(evaluate(minus)[1].value)
            num = (fp - fm) / (2.0 * h)
            ana = float(analytic[key].ravel()[i])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
