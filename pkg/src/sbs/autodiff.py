"""Minimal define-by-run reverse-mode differentiation over float64 numpy arrays.

A :class:`Var` wraps an immutable ``float64`` array and remembers how it was
produced.  Calling :func:`backward` on a scalar ``Var`` walks the recorded graph
in reverse topological order and accumulates vector-Jacobian products.

Broadcasting is deliberately limited to scalar-with-tensor and equal shapes;
anything else raises :class:`ShapeError` naming the op.  Row-wise bias addition
has its own op (:func:`add_rowwise`).

Custom backward rules (straight-through estimators) are registered with
:func:`register_custom_grad`.
"""
from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Var", "ShapeError", "GradArityError", "as_var", "constant", "parameter",
    "backward", "grad", "register_custom_grad", "forward_graph",
    "add", "sub", "mul", "div", "neg", "square", "matmul", "add_rowwise",
    "sum", "mean", "abs", "exp", "log", "sigmoid", "relu", "tanh", "clip",
    "reshape", "transpose", "sqrt", "getitem", "concat", "stack", "where", "softmax", "log_softmax",
    "cross_entropy", "maximum", "numerical_grad",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the named op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(map(str, shapes))}")


class GradArityError(ValueError):
    pass


def _freeze(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)  # always a private copy
    arr.flags.writeable = False
    return arr


class Var:
    """A node in the computation graph.

    ``parents`` holds the input nodes and ``vjp`` maps the upstream gradient to
    one gradient per parent (``None`` for "no contribution").
    """

    __slots__ = ("value", "parents", "vjp", "requires_grad", "name", "op")

    def __init__(self, value, parents: Sequence[Var] = (), vjp=None,
                 requires_grad: bool = False, name: str | None = None, op: str = "leaf"):
        self.value = value if isinstance(value, np.ndarray) and not value.flags.writeable \
            and value.dtype == np.float64 else _freeze(value)
        self.parents = tuple(parents)
        self.vjp = vjp
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else \
            float(self.value.item())

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, idx): return getitem(self, idx)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def constant(x, name: str | None = None) -> Var:
    return Var(x, name=name)


def parameter(x, name: str | None = None) -> Var:
    return Var(x, requires_grad=True, name=name)


def _node(value, parents, vjp, op) -> Var:
    return Var(value, parents, vjp if any(p.requires_grad for p in parents) else None, op=op)


def _is_scalar(a: np.ndarray) -> bool:
    return a.size == 1 and a.ndim <= 1


def _unbroadcast(g: np.ndarray, like: np.ndarray) -> np.ndarray:
    if g.shape == like.shape:
        return g
    return np.asarray(g.sum(), dtype=np.float64).reshape(like.shape)


def _check_elementwise(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(op, a.shape, b.shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _check_elementwise("add", a.value, b.value)
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.value), _unbroadcast(g, b.value)), "add")


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _check_elementwise("sub", a.value, b.value)
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.value), _unbroadcast(-g, b.value)), "sub")


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _check_elementwise("mul", a.value, b.value)
    return _node(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.value),
                            _unbroadcast(g * a.value, b.value)), "mul")


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _check_elementwise("div", a.value, b.value)
    out = a.value / b.value
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.value),
                            _unbroadcast(-g * out / b.value, b.value)), "div")


def neg(a) -> Var:
    a = as_var(a)
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def square(a) -> Var:
    a = as_var(a)
    return _node(a.value * a.value, (a,), lambda g: (2.0 * a.value * g,), "square")


def abs(a) -> Var:
    a = as_var(a)
    return _node(np.abs(a.value), (a,), lambda g: (np.sign(a.value) * g,), "abs")


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Var:
    a = as_var(a)
    return _node(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def sigmoid(a) -> Var:
    a = as_var(a)
    out = _sigmoid(a.value)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Var:
    a = as_var(a)
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Var:
    a = as_var(a)
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def maximum(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _check_elementwise("maximum", a.value, b.value)
    pick_a = a.value >= b.value
    return _node(np.maximum(a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.value),
                            _unbroadcast(g * ~pick_a, b.value)), "maximum")


def clip(a, lo: float, hi: float) -> Var:
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""
    a = as_var(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _node(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,), "clip")


def where(mask, a, b) -> Var:
    a, b = as_var(a), as_var(b)
    mask = np.asarray(mask, dtype=bool)
    _check_elementwise("where", a.value, b.value)
    return _node(np.where(mask, a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(g * mask, a.value),
                            _unbroadcast(g * ~mask, b.value)), "where")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# linear algebra, reductions and shape ops


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _node(a.value @ b.value, (a, b),
                 lambda g: (g @ b.value.T, a.value.T @ g), "matmul")


def add_rowwise(x, bias) -> Var:
    """``x[i, :] + bias`` for a 2-D ``x`` and a 1-D ``bias``."""
    x, bias = as_var(x), as_var(bias)
    if x.value.ndim != 2 or bias.value.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ShapeError("add_rowwise", x.shape, bias.shape)
    return _node(x.value + bias.value, (x, bias), lambda g: (g, g.sum(axis=0)), "add_rowwise")


def sum(a, axis: int | None = None) -> Var:
    a = as_var(a)
    if axis is None:
        return _node(a.value.sum(), (a,), lambda g: (np.full(a.shape, float(g)),), "sum")
    out = a.value.sum(axis=axis)
    return _node(out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),),
                 "sum")


def mean(a, axis: int | None = None) -> Var:
    a = as_var(a)
    n = a.size if axis is None else a.shape[axis]
    return div(sum(a, axis), float(n)) if axis is None else mul(sum(a, axis), 1.0 / n)


def transpose(a) -> Var:
    a = as_var(a)
    if a.value.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _node(a.value.T, (a,), lambda g: (g.T,), "transpose")


def sqrt(a) -> Var:
    a = as_var(a)
    out = np.sqrt(a.value)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def reshape(a, shape) -> Var:
    a = as_var(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(np.atleast_1d(shape))) from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a, idx) -> Var:
    a = as_var(a)
    out = a.value[idx]

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _node(out, (a,), vjp, "getitem")


def concat(parts: Sequence, axis: int = 0) -> Var:
    parts = [as_var(p) for p in parts]
    try:
        out = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[p.shape for p in parts]) from None
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def vjp(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _node(out, parts, vjp, "concat")


def stack(parts: Sequence) -> Var:
    parts = [as_var(p) for p in parts]
    shapes = {p.shape for p in parts}
    if len(shapes) != 1:
        raise ShapeError("stack", *[p.shape for p in parts])
    out = np.stack([p.value for p in parts])
    return _node(out, parts, lambda g: tuple(g[i] for i in range(len(parts))), "stack")


def softmax(a) -> Var:
    """Softmax over the last axis."""
    a = as_var(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (a,), vjp, "softmax")


def log_softmax(a) -> Var:
    a = as_var(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _node(out, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


def cross_entropy(logits, labels) -> Var:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = as_var(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.value.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    n = logits.shape[0]
    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(n), labels]))

    def vjp(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        return (p * (float(g) / n),)

    return _node(loss, (logits,), vjp, "cross_entropy")


# ---------------------------------------------------------------------------
# custom gradients


class CustomOp:
    """Handle returned by :func:`register_custom_grad`."""

    def __init__(self, forward: Callable, backward: Callable, name: str):
        self.forward = forward
        self.backward = backward
        self.name = name
        self._checked: set[int] = set()

    def __call__(self, *inputs) -> Var:
        nodes = [as_var(x) for x in inputs]
        values = [n.value for n in nodes]
        out = np.asarray(self.forward(*values), dtype=np.float64)
        if len(nodes) not in self._checked:
            probe = self.backward(values, np.zeros_like(out))
            if not isinstance(probe, (tuple, list)) or len(probe) != len(nodes):
                got = len(probe) if isinstance(probe, (tuple, list)) else 1
                raise GradArityError(
                    f"{self.name}: backward returned {got} gradients for {len(nodes)} inputs")
            self._checked.add(len(nodes))

        def vjp(g):
            grads = self.backward(values, g)
            if len(grads) != len(nodes):
                raise GradArityError(
                    f"{self.name}: backward returned {len(grads)} gradients for {len(nodes)} inputs")
            return tuple(None if gr is None else _unbroadcast(np.asarray(gr, dtype=np.float64), v)
                         for gr, v in zip(grads, values))

        return _node(out, nodes, vjp, self.name)

    def __repr__(self):
        return f"CustomOp({self.name})"


def register_custom_grad(forward: Callable, backward: Callable, name: str | None = None) -> CustomOp:
    """Create an op whose backward is ``backward(input_values, upstream)``.

    ``backward`` must return one gradient (or ``None``) per input; the arity is
    verified the first time the op is applied with a given number of inputs.
    """
    return CustomOp(forward, backward, name or getattr(forward, "__name__", "custom"))


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(root: Var) -> list[Var]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Var, wrt: Iterable[Var] | None = None) -> dict[Var, np.ndarray]:
    """Gradients of the scalar ``root`` for every ``requires_grad`` leaf it reaches.

    Leaves listed in ``wrt`` but not reachable from ``root`` get zero gradients.
    """
    root = as_var(root)
    if root.size != 1:
        raise ShapeError("backward (root must be scalar)", root.shape)
    grads: dict[int, np.ndarray] = {}
    leaves: dict[Var, np.ndarray] = {}
    if root.requires_grad:
        grads[id(root)] = np.ones(root.shape)
        for node in reversed(_topo_order(root)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                leaves[node] = g
                continue
            if node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=np.float64)
                if pg.shape != parent.shape:
                    pg = pg.reshape(parent.shape)
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    if wrt is not None:
        return {v: leaves.get(v, np.zeros(v.shape)) for v in wrt}
    return leaves


def grad(root: Var, params: Sequence[Var]) -> list[np.ndarray]:
    g = backward(root, params)
    return [g[p] for p in params]


def forward_graph(inputs: Sequence, program: Callable[..., Var],
                  requires_grad: bool = True) -> tuple[Var, list[Var]]:
    """Run ``program`` on fresh leaves built from ``inputs``.

    Returns ``(output, leaves)``; the output carries the recorded graph.
    """
    leaves = [Var(x, requires_grad=requires_grad, name=f"in{i}") for i, x in enumerate(inputs)]
    for leaf in leaves:
        if not np.all(np.isfinite(leaf.value)):
            raise ValueError(f"forward_graph: input {leaf.name} is not finite")
    out = as_var(program(*leaves))
    return out, leaves


def numerical_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x.copy())
        flat[i] = orig - eps
        lo = f(x.copy())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g
