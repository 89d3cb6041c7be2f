"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records primitive operations in execution order.  Values are
numpy arrays; leading axes act as batch axes and elementwise primitives
broadcast with numpy rules, so one tape can carry a whole minibatch.

The module-level functions (``tanh``, ``matmul``, ``transpose`` ...) accept
either :class:`Var` objects or plain arrays.  With plain arrays they return
plain arrays and nothing is recorded, which lets the same model code serve
both fast inference and gradient evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when the inputs of a primitive have incompatible shapes."""


# --------------------------------------------------------------------------
# primitive registry
# --------------------------------------------------------------------------

ForwardFn = Callable[[list, Any], list]
VjpFn = Callable[[list, list, list, Any], list]


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: ForwardFn
    vjp: VjpFn
    check: Callable[[list, Any], None] | None = None


PRIMITIVES: dict[str, Primitive] = {}


def register(name, forward, vjp, check=None):
    PRIMITIVES[name] = Primitive(name, forward, vjp, check)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _swap(a):
    return np.swapaxes(a, -1, -2)


def _check_broadcast(name):
    def check(vals, payload):
        try:
            np.broadcast_shapes(*(v.shape for v in vals))
        except ValueError:
            shapes = ", ".join(str(v.shape) for v in vals)
            raise ShapeError(f"{name}: cannot broadcast shapes {shapes}") from None

    return check


def _check_matmul(vals, payload):
    a, b = vals
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch shapes {a.shape} and {b.shape} differ") from None


def _check_square(name):
    def check(vals, payload):
        a = vals[0]
        if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
            raise ShapeError(f"{name}: expected square matrices, got {a.shape}")

    return check


def _check_ndim2(name):
    def check(vals, payload):
        if vals[0].ndim < 2:
            raise ShapeError(f"{name}: expected at least 2 axes, got {vals[0].shape}")

    return check


register(
    "add",
    lambda v, p: [v[0] + v[1]],
    lambda v, o, g, p: [_unbroadcast(g[0], v[0].shape), _unbroadcast(g[0], v[1].shape)],
    _check_broadcast("add"),
)
register(
    "sub",
    lambda v, p: [v[0] - v[1]],
    lambda v, o, g, p: [_unbroadcast(g[0], v[0].shape), _unbroadcast(-g[0], v[1].shape)],
    _check_broadcast("sub"),
)
register(
    "mul",
    lambda v, p: [v[0] * v[1]],
    lambda v, o, g, p: [
        _unbroadcast(g[0] * v[1], v[0].shape),
        _unbroadcast(g[0] * v[0], v[1].shape),
    ],
    _check_broadcast("mul"),
)
register(
    "div",
    lambda v, p: [v[0] / v[1]],
    lambda v, o, g, p: [
        _unbroadcast(g[0] / v[1], v[0].shape),
        _unbroadcast(-g[0] * o[0] / v[1], v[1].shape),
    ],
    _check_broadcast("div"),
)
register("scale", lambda v, p: [p * v[0]], lambda v, o, g, p: [p * g[0]])
register("neg", lambda v, p: [-v[0]], lambda v, o, g, p: [-g[0]])
register(
    "matmul",
    lambda v, p: [np.matmul(v[0], v[1])],
    lambda v, o, g, p: [
        _unbroadcast(np.matmul(g[0], _swap(v[1])), v[0].shape),
        _unbroadcast(np.matmul(_swap(v[0]), g[0]), v[1].shape),
    ],
    _check_matmul,
)
register(
    "transpose",
    lambda v, p: [_swap(v[0])],
    lambda v, o, g, p: [_swap(g[0])],
    _check_ndim2("transpose"),
)
register("tanh", lambda v, p: [np.tanh(v[0])], lambda v, o, g, p: [g[0] * (1.0 - o[0] ** 2)])


def _sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_array(x):
    return _sigmoid(np.asarray(x, dtype=np.float64))


register("sigmoid", lambda v, p: [_sigmoid(v[0])], lambda v, o, g, p: [g[0] * o[0] * (1.0 - o[0])])
register("exp", lambda v, p: [np.exp(v[0])], lambda v, o, g, p: [g[0] * o[0]])
register("log", lambda v, p: [np.log(v[0])], lambda v, o, g, p: [g[0] / v[0]])
register("sqrt", lambda v, p: [np.sqrt(v[0])], lambda v, o, g, p: [0.5 * g[0] / o[0]])
register("abs", lambda v, p: [np.abs(v[0])], lambda v, o, g, p: [g[0] * np.sign(v[0])])


def _vec(a):
    # column-major stacking of the trailing matrix: (..., m, n) -> (..., m*n, 1)
    m, n = a.shape[-2:]
    return _swap(a).reshape(a.shape[:-2] + (m * n, 1))


def _vec_vjp(v, o, g, p):
    m, n = v[0].shape[-2:]
    return [_swap(g[0].reshape(v[0].shape[:-2] + (n, m)))]


register("vec", lambda v, p: [_vec(v[0])], _vec_vjp, _check_ndim2("vec"))


def _check_reshape(vals, payload):
    if int(np.prod(payload)) != vals[0].size:
        raise ShapeError(f"reshape: cannot reshape {vals[0].shape} to {tuple(payload)}")


register(
    "reshape",
    lambda v, p: [v[0].reshape(p)],
    lambda v, o, g, p: [g[0].reshape(v[0].shape)],
    _check_reshape,
)


def _sum_fwd(v, p):
    axis, keepdims = p
    if axis is None:
        return [np.sum(v[0]).reshape(1, 1)]
    return [np.sum(v[0], axis=axis, keepdims=keepdims)]


def _sum_vjp(v, o, g, p):
    axis, keepdims = p
    shape = v[0].shape
    if axis is None:
        return [np.broadcast_to(g[0].reshape(()), shape).copy()]
    gg = g[0]
    if not keepdims:
        gg = np.expand_dims(gg, axis)
    return [np.broadcast_to(gg, shape).copy()]


register("sum", _sum_fwd, _sum_vjp)


def _trace_fwd(v, p):
    a = v[0]
    return [np.trace(a, axis1=-2, axis2=-1)[..., None, None]]


def _trace_vjp(v, o, g, p):
    n = v[0].shape[-1]
    return [g[0] * np.eye(n)]


register("trace", _trace_fwd, _trace_vjp, _check_square("trace"))


def _slice_vjp(v, o, g, p):
    out = np.zeros_like(v[0])
    if _has_fancy(p):
        np.add.at(out, p, g[0])
    else:
        out[p] = g[0]
    return [out]


def _has_fancy(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


register("slice", lambda v, p: [v[0][p]], _slice_vjp)


def _concat_vjp(v, o, g, p):
    sizes = [x.shape[p] for x in v]
    cuts = np.cumsum(sizes)[:-1]
    return list(np.split(g[0], cuts, axis=p))


def _check_concat(vals, payload):
    ref = list(vals[0].shape)
    for x in vals[1:]:
        other = list(x.shape)
        if len(other) != len(ref):
            raise ShapeError(f"concat: rank mismatch {vals[0].shape} vs {x.shape}")
        ax = payload % len(ref)
        if other[:ax] + other[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat: shapes {vals[0].shape} and {x.shape} differ off axis {payload}")


register("concat", lambda v, p: [np.concatenate(v, axis=p)], _concat_vjp, _check_concat)


def _inv_vjp(v, o, g, p):
    inv_t = _swap(o[0])
    return [-np.matmul(np.matmul(inv_t, g[0]), inv_t)]


register("inv", lambda v, p: [np.linalg.inv(v[0])], _inv_vjp, _check_square("inv"))


def _eigvalsh_fwd(v, p):
    w, q = np.linalg.eigh(v[0])
    return [w, q]


def _eigvalsh_vjp(v, o, g, p):
    # only the eigenvalue output is differentiable; the eigenvectors are an
    # auxiliary output and their adjoint is ignored
    q = o[1]
    return [np.matmul(q * g[0][..., None, :], _swap(q))]


register("eigh", _eigvalsh_fwd, _eigvalsh_vjp, _check_square("eigvalsh"))


# --------------------------------------------------------------------------
# tape and variables
# --------------------------------------------------------------------------


@dataclass
class Node:
    kind: str
    inputs: tuple
    payload: Any
    values: list
    outputs: list = field(default_factory=list)


class Var:
    """A handle to one output of one node on a tape."""

    __slots__ = ("tape", "node", "index")
    __array_ufunc__ = None  # make ``ndarray op Var`` defer to Var

    def __init__(self, tape: "Tape", node: int, index: int = 0):
        self.tape = tape
        self.node = node
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.node].values[self.index]

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Var(node={self.node}, shape={self.shape})"

    def __hash__(self):
        return hash((id(self.tape), self.node, self.index))

    def __eq__(self, other):
        return (
            isinstance(other, Var)
            and other.tape is self.tape
            and other.node == self.node
            and other.index == self.index
        )

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
        return self.tape.record("neg", [self])

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return self.tape.record("slice", [self], index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as operations execute, so the list is topologically
    sorted by construction.  Leaves hold the values gradients are taken
    with respect to; constants hold values that never receive gradients.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _append(self, kind, inputs, payload, values):
        self.nodes.append(Node(kind, tuple(inputs), payload, values))
        idx = len(self.nodes) - 1
        outs = [Var(self, idx, i) for i in range(len(values))]
        self.nodes[idx].outputs = outs
        return outs

    def leaf(self, value) -> Var:
        value = np.array(value, dtype=np.float64)
        return self._append("leaf", [], None, [value])[0]

    def constant(self, value) -> Var:
        value = np.asarray(value, dtype=np.float64)
        return self._append("const", [], None, [value])[0]

    def leaves(self) -> list[Var]:
        return [n.outputs[0] for n in self.nodes if n.kind == "leaf"]

    def _as_input(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("cannot mix variables from different tapes")
            return x
        return self.constant(x)

    def record(self, kind: str, inputs: Sequence, payload=None):
        """Apply primitive ``kind`` and append it to the tape.

        Returns a single :class:`Var` for single-output primitives and a
        tuple otherwise.
        """
        prim = PRIMITIVES.get(kind)
        if prim is None:
            raise KeyError(f"unknown primitive {kind!r}")
        ins = [self._as_input(x) for x in inputs]
        vals = [v.value for v in ins]
        if prim.check is not None:
            prim.check(vals, payload)
        outs = self._append(kind, ins, payload, prim.forward(vals, payload))
        return outs[0] if len(outs) == 1 else tuple(outs)

    def replay(self) -> list[list[np.ndarray]]:
        """Recompute every node from the leaf and constant values."""
        computed: list[list[np.ndarray]] = []
        for node in self.nodes:
            if node.kind in ("leaf", "const"):
                computed.append([v.copy() for v in node.values])
                continue
            vals = [computed[v.node][v.index] for v in node.inputs]
            computed.append(PRIMITIVES[node.kind].forward(vals, node.payload))
        return computed


def backward(output: Var, wrt: Sequence[Var] | None = None) -> dict[Var, np.ndarray]:
    """Gradient of a scalar ``output`` with respect to every leaf of its tape.

    Leaves that ``output`` does not depend on map to zero arrays.  When
    ``wrt`` is given only those variables are returned (they may be interior
    nodes as well as leaves).
    """
    if not isinstance(output, Var):
        raise TypeError("backward expects a Var")
    if output.value.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    tape = output.tape
    nodes = tape.nodes

    # ancestors of the output; other nodes are skipped entirely
    needed = np.zeros(len(nodes), dtype=bool)
    needed[output.node] = True
    for i in range(output.node, -1, -1):
        if needed[i]:
            for v in nodes[i].inputs:
                needed[v.node] = True

    grads: dict[tuple[int, int], np.ndarray] = {
        (output.node, output.index): np.ones_like(output.value)
    }
    wanted = {(v.node, v.index) for v in wrt} if wrt is not None else set()
    keep: dict[tuple[int, int], np.ndarray] = {}
    for i in range(output.node, -1, -1):
        if not needed[i]:
            continue
        node = nodes[i]
        outs = [grads.pop((i, j), None) for j in range(len(node.values))]
        for j, g in enumerate(outs):
            if g is not None and ((i, j) in wanted or node.kind == "leaf"):
                keep[(i, j)] = g
        if node.kind in ("leaf", "const") or all(g is None for g in outs):
            continue
        outs = [np.zeros_like(val) if g is None else g for g, val in zip(outs, node.values)]
        in_vals = [v.value for v in node.inputs]
        in_grads = PRIMITIVES[node.kind].vjp(in_vals, node.values, outs, node.payload)
        for v, g in zip(node.inputs, in_grads):
            if g is None or nodes[v.node].kind == "const":
                continue
            key = (v.node, v.index)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g

    if wrt is not None:
        return {v: keep.get((v.node, v.index), np.zeros_like(v.value)) for v in wrt}
    return {
        leaf: keep.get((leaf.node, 0), np.zeros_like(leaf.value)) for leaf in tape.leaves()
    }


# --------------------------------------------------------------------------
# dispatching helpers
# --------------------------------------------------------------------------


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def is_var(x) -> bool:
    return isinstance(x, Var)


def value(x):
    """The numeric value of a Var, or ``x`` itself."""
    return x.value if isinstance(x, Var) else x


def add(a, b):
    tape = _tape_of(a, b)
    return a + b if tape is None else tape.record("add", [a, b])


def sub(a, b):
    tape = _tape_of(a, b)
    return a - b if tape is None else tape.record("sub", [a, b])


def mul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return a * b
    if np.isscalar(a):
        return tape.record("scale", [b], float(a))
    if np.isscalar(b):
        return tape.record("scale", [a], float(b))
    return tape.record("mul", [a, b])


def div(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return a / b
    if np.isscalar(b):
        return tape.record("scale", [a], 1.0 / float(b))
    return tape.record("div", [a, b])


def matmul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.matmul(a, b)
    return tape.record("matmul", [a, b])


def _unary(kind, fn):
    def op(x):
        if isinstance(x, Var):
            return x.tape.record(kind, [x])
        return fn(x)

    op.__name__ = kind
    return op


tanh = _unary("tanh", np.tanh)
sigmoid = _unary("sigmoid", sigmoid_array)
exp = _unary("exp", np.exp)
log = _unary("log", np.log)
sqrt = _unary("sqrt", np.sqrt)
abs_ = _unary("abs", np.abs)
transpose = _unary("transpose", _swap)
vec = _unary("vec", _vec)
inv = _unary("inv", np.linalg.inv)
trace = _unary("trace", lambda a: np.trace(a, axis1=-2, axis2=-1)[..., None, None])


def eigvalsh(x):
    """Eigenvalues (ascending) of symmetric matrices along the last two axes."""
    if isinstance(x, Var):
        return x.tape.record("eigh", [x])[0]
    return np.linalg.eigvalsh(x)


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if isinstance(x, Var):
        return x.tape.record("reshape", [x], shape)
    return np.reshape(x, shape)


def unvec(x, rows: int, cols: int):
    """Inverse of :func:`vec`: (..., rows*cols, 1) -> (..., rows, cols)."""
    lead = value(x).shape[:-2]
    return transpose(reshape(x, lead + (cols, rows)))


def sum_(x, axis=None, keepdims=False):
    if isinstance(x, Var):
        if axis is not None and not isinstance(axis, int):
            axis = tuple(axis)
        return x.tape.record("sum", [x], (axis, keepdims))
    if axis is None:
        return np.sum(x).reshape(1, 1)
    return np.sum(x, axis=axis, keepdims=keepdims)


def concat(xs, axis=-1):
    tape = _tape_of(*xs)
    if tape is None:
        return np.concatenate(xs, axis=axis)
    return tape.record("concat", list(xs), axis)


def take(x, index):
    """Basic or fancy indexing, recorded as a slice primitive."""
    if isinstance(x, Var):
        return x.tape.record("slice", [x], index)
    return x[index]
