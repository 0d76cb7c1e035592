"""Reverse-mode differentiation over dense float64 arrays.

Every op records a vector-Jacobian product (numpy level, used by ``backward``)
and a Jacobian-vector product expressed with graph ops (used by
``time_tangent``). Because tangents are ordinary graph nodes, ``backward`` on a
quantity built from a tangent yields mixed second derivatives.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Node:
    __slots__ = ("value", "parents", "op", "vjp", "jvp", "grad", "requires_grad", "name")

    def __init__(self, value, parents=(), op="leaf", vjp=None, jvp=None,
                 requires_grad=False, name=None):
        self.value = value
        self.parents = tuple(parents)
        self.op = op
        self.vjp = vjp
        self.jvp = jvp
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return not self.parents

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return affine(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _lift(x):
    return x if isinstance(x, Node) else constant(x)


def constant(value, name=None):
    return Node(np.array(value, dtype=DTYPE), name=name)


def parameter(value, name=None):
    return Node(np.array(value, dtype=DTYPE), requires_grad=True, name=name)


def variable(value, name=None):
    """A leaf that is not trained but may be used as a tangent seed."""
    return Node(np.array(value, dtype=DTYPE), name=name)


# ---------------------------------------------------------------- op helpers

def _check_same(opname, a, b):
    if a.shape != b.shape and a.value.ndim != 0 and b.value.ndim != 0:
        raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g, shape):
    # only scalar-vs-tensor broadcasting is permitted
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _tsum(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return add(a, b)


def _bcast(t, shape):
    # tangent of a scalar operand that was broadcast against a tensor
    if t is None or t.shape == shape:
        return t
    return mul(t, constant(np.ones(shape)))


def add(a, b):
    _check_same("add", a, b)
    out_val = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    def jvp(ta, tb):
        if ta is not None and tb is not None:
            return _bcast(add(ta, tb), out_val.shape)
        return _bcast(ta if ta is not None else tb, out_val.shape)

    return Node(out_val, (a, b), "add", vjp, jvp)


def add_row(x, row):
    """x (n, k) plus a (1, k) row added to every row of x."""
    if x.value.ndim != 2 or row.shape != (1, x.shape[1]):
        raise ShapeError(f"add_row: cannot add row {row.shape} to {x.shape}")

    def vjp(g):
        return g, g.sum(axis=0, keepdims=True)

    def jvp(tx, trow):
        if trow is None:
            return tx
        if tx is None:
            return repeat_rows(trow, x.shape[0])
        return add_row(tx, trow)

    return Node(x.value + row.value, (x, row), "add_row", vjp, jvp)


def sub(a, b):
    _check_same("sub", a, b)
    out_val = a.value - b.value

    def vjp(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    def jvp(ta, tb):
        if tb is None:
            return _bcast(ta, out_val.shape)
        ntb = affine(tb, -1.0)
        if ta is None:
            return _bcast(ntb, out_val.shape)
        return _bcast(add(ta, ntb), out_val.shape)

    return Node(out_val, (a, b), "sub", vjp, jvp)


def mul(a, b):
    _check_same("mul", a, b)

    def vjp(g):
        return (_unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.value, b.shape) if b.requires_grad else None)

    def jvp(ta, tb):
        return _tsum(None if ta is None else mul(ta, b),
                     None if tb is None else mul(a, tb))

    return Node(a.value * b.value, (a, b), "mul", vjp, jvp)


def div(a, b):
    _check_same("div", a, b)
    out_val = a.value / b.value

    def vjp(g):
        ga = g / b.value
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out_val, b.shape)

    def jvp(ta, tb):
        first = None if ta is None else div(ta, b)
        second = None if tb is None else affine(div(mul(out, tb), b), -1.0)
        return _tsum(first, second)

    out = Node(out_val, (a, b), "div", vjp, jvp)
    return out


def matmul(a, b):
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def vjp(g):
        return (g @ b.value.T if a.requires_grad else None,
                a.value.T @ g if b.requires_grad else None)

    def jvp(ta, tb):
        return _tsum(None if ta is None else matmul(ta, b),
                     None if tb is None else matmul(a, tb))

    return Node(a.value @ b.value, (a, b), "matmul", vjp, jvp)


def affine(x, scale=1.0, shift=0.0):
    """scale * x + shift with python scalars."""
    scale = float(scale)

    def vjp(g):
        return (g * scale,)

    def jvp(tx):
        return affine(tx, scale)

    return Node(x.value * scale + shift, (x,), "affine", vjp, jvp)


def tanh(x):
    y = np.tanh(x.value)

    def vjp(g):
        return (g * (1.0 - y * y),)

    def jvp(tx):
        return mul(one_minus_square(out), tx)

    out = Node(y, (x,), "tanh", vjp, jvp)
    return out


def one_minus_square(x):
    v = x.value

    def vjp(g):
        return (-2.0 * v * g,)

    def jvp(tx):
        return mul(affine(x, -2.0), tx)

    return Node(1.0 - v * v, (x,), "one_minus_square", vjp, jvp)


_sigmoid = expit


def sigmoid(x):
    y = _sigmoid(x.value)

    def vjp(g):
        return (g * y * (1.0 - y),)

    def jvp(tx):
        return mul(mul(out, affine(out, -1.0, 1.0)), tx)

    out = Node(y, (x,), "sigmoid", vjp, jvp)
    return out


def softplus(x):
    v = x.value
    y = np.logaddexp(0.0, v)

    def vjp(g):
        return (g * _sigmoid(v),)

    def jvp(tx):
        return mul(sigmoid(x), tx)

    return Node(y, (x,), "softplus", vjp, jvp)


def exp(x):
    y = np.exp(x.value)

    def vjp(g):
        return (g * y,)

    def jvp(tx):
        return mul(out, tx)

    out = Node(y, (x,), "exp", vjp, jvp)
    return out


def log(x):
    v = x.value

    def vjp(g):
        return (g / v,)

    def jvp(tx):
        return div(tx, x)

    return Node(np.log(v), (x,), "log", vjp, jvp)


def clamp_min(x, floor):
    """max(x, floor); gradient is passed only where x > floor."""
    keep = x.value > floor

    def vjp(g):
        return (g * keep,)

    def jvp(tx):
        return mul(tx, constant(keep.astype(DTYPE)))

    return Node(np.where(keep, x.value, floor), (x,), "clamp_min", vjp, jvp)


def absolute(x):
    sgn = np.sign(x.value)

    def vjp(g):
        return (g * sgn,)

    def jvp(tx):
        return mul(tx, constant(sgn))

    return Node(np.abs(x.value), (x,), "abs", vjp, jvp)


def concat(xs, axis=-1):
    xs = list(xs)
    vals = [x.value for x in xs]
    try:
        out_val = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[v.shape for v in vals]}") from exc
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    def jvp(*ts):
        if all(t is None for t in ts):
            return None
        parts = [constant(np.zeros(x.shape)) if t is None else t for x, t in zip(xs, ts)]
        return concat(parts, axis=axis)

    return Node(out_val, xs, "concat", vjp, jvp)


def reduce_sum(x, axis=None, keepdims=False):
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    def jvp(tx):
        return reduce_sum(tx, axis, keepdims)

    return Node(np.sum(x.value, axis=axis, keepdims=keepdims), (x,), "sum", vjp, jvp)


def mean(x, axis=None, keepdims=False):
    n = x.value.size if axis is None else x.shape[axis]
    return affine(reduce_sum(x, axis, keepdims), 1.0 / n)


def getitem(x, idx):
    """Basic slicing (no fancy indexing; see ``take_rows``)."""
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[idx] = g
        return (full,)

    def jvp(tx):
        return getitem(tx, idx)

    return Node(x.value[idx], (x,), "slice", vjp, jvp)


def take_rows(x, rows):
    """Gather rows of a 2-d node; ``rows`` is an integer array."""
    rows = np.asarray(rows, dtype=np.intp)
    if x.value.ndim != 2:
        raise ShapeError(f"take_rows: expected 2-d input, got {x.shape}")
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, rows, g)
        return (full,)

    def jvp(tx):
        return take_rows(tx, rows)

    return Node(x.value[rows], (x,), "take_rows", vjp, jvp)


def repeat_rows(x, n):
    """Tile a (1, k) row into (n, k)."""
    if x.value.ndim != 2 or x.shape[0] != 1:
        raise ShapeError(f"repeat_rows: expected a (1, k) row, got {x.shape}")
    return take_rows(x, np.zeros(n, dtype=np.intp))


def reshape(x, shape):
    old = x.shape

    def vjp(g):
        return (g.reshape(old),)

    def jvp(tx):
        return reshape(tx, shape)

    return Node(x.value.reshape(shape), (x,), "reshape", vjp, jvp)


# ---------------------------------------------------------------- traversal

def _toposort(output):
    order, seen = [], set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def backward(output):
    """Populate ``.grad`` on every node that requires it.

    Grads accumulate on leaves across calls; use ``zero_grad`` between steps.
    """
    if output.value.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    order = _toposort(output)
    grads = {id(output): np.ones_like(output.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(nodes):
    for n in nodes:
        n.grad = None


def time_tangent(output, t_input, rowwise=False):
    """d(output)/dt as a new graph node.

    ``t_input`` must be a leaf. With ``rowwise=True`` it may be a column of
    independent times; the tangent is seeded with ones, which equals the
    per-row derivative whenever row i of ``output`` depends only on row i of
    ``t_input``.
    """
    if not t_input.is_leaf:
        raise ValueError("time_tangent: t_input must be a leaf node")
    if t_input.value.size != 1 and not rowwise:
        raise ShapeError(f"time_tangent: t_input must be scalar, got shape {t_input.shape}")
    tangents = {id(t_input): constant(np.ones(t_input.shape))}
    for node in _toposort(output):
        if node.is_leaf:
            continue
        pts = [tangents.get(id(p)) for p in node.parents]
        if all(t is None for t in pts):
            continue
        tangents[id(node)] = node.jvp(*pts)
    result = tangents.get(id(output))
    if result is None:
        return constant(np.zeros(output.shape))
    return result


# ---------------------------------------------------------------- parameters

def glorot_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class ParamStore:
    """Named trainable leaves; insertion order is the canonical order."""

    def __init__(self):
        self._nodes: dict[str, Node] = {}

    def add(self, name, value):
        if name in self._nodes:
            raise KeyError(f"duplicate parameter name {name!r}")
        node = parameter(value, name=name)
        self._nodes[name] = node
        return node

    def __getitem__(self, name):
        return self._nodes[name]

    def __contains__(self, name):
        return name in self._nodes

    def __iter__(self):
        return iter(self._nodes)

    def __len__(self):
        return len(self._nodes)

    def items(self):
        return self._nodes.items()

    def nodes(self):
        return list(self._nodes.values())

    def zero_grad(self):
        zero_grad(self._nodes.values())

    def grads(self):
        return {k: (np.zeros_like(n.value) if n.grad is None else n.grad)
                for k, n in self._nodes.items()}

    def state(self):
        return {k: n.value.copy() for k, n in self._nodes.items()}

    def load_state(self, state):
        if set(state) != set(self._nodes):
            missing = set(self._nodes) ^ set(state)
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, v in state.items():
            v = np.asarray(v, dtype=DTYPE)
            if v.shape != self._nodes[k].value.shape:
                raise ShapeError(f"{k}: shape {v.shape} != {self._nodes[k].value.shape}")
            self._nodes[k].value = v.copy()

    def num_values(self):
        return int(sum(n.value.size for n in self._nodes.values()))
