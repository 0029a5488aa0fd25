"""Dense float64 tensors with reverse-mode automatic differentiation.

Values are plain C-contiguous ``numpy`` arrays of ``float64`` (row-major flat
storage). A :class:`Node` wraps one value and optionally participates in a
differentiation graph; calling :func:`backward` on a scalar node populates
``.grad`` on every ancestor, visiting each node exactly once in reverse
topological order, so repeated backward passes over the same graph are
bitwise deterministic.

Shape discipline is strict: there is no implicit broadcasting except
scalar-times-tensor. Ops that align a vector against the rows or columns of
a matrix exist as explicitly named primitives (``add_bias``, ``scale_rows``,
...) with hand-written backward rules.

Known non-differentiable points (relu at 0, elementwise min/max ties) take a
one-sided subgradient; gradient checks must jitter inputs away from them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


def tensor(data) -> np.ndarray:
    """Coerce ``data`` to a C-contiguous float64 array (0-d stays 0-d)."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


def _require_shape(name: str, arr: np.ndarray, ndim: int | None = None) -> None:
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name}: expected {ndim}-d tensor, got shape {arr.shape}")


class Node:
    """One value in a differentiation graph.

    ``grad`` is populated by :func:`backward` and always matches the value's
    shape. Leaf nodes (constants, parameters) have no parents. A graph must
    stay confined to one thread from construction through backward.
    """

    __slots__ = ("value", "grad", "parents", "requires_grad", "_backward")

    def __init__(self, value, parents=(), backward=None, requires_grad=False):
        self.value = tensor(value)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Node, ...] = parents
        self.requires_grad = requires_grad
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar for the common same-shape / scalar cases
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Node):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value) -> Node:
    """Leaf node that never receives a gradient."""
    return Node(value)


class Parameter:
    """Named trainable leaf.

    Names are dotted paths unique within a model (``spatial.encoder.0...``);
    they key checkpoints, optimizer groups, and gradient-check reports.
    """

    __slots__ = ("node", "name", "trainable")

    def __init__(self, name: str, value, trainable: bool = True):
        self.node = Node(value, requires_grad=True)
        self.name = name
        self.trainable = trainable

    @property
    def value(self) -> np.ndarray:
        return self.node.value

    @value.setter
    def value(self, new) -> None:
        arr = tensor(new)
        if arr.shape != self.node.value.shape:
            raise ShapeError(
                f"parameter {self.name}: cannot assign shape {arr.shape} "
                f"over {self.node.value.shape}"
            )
        self.node.value = arr

    @property
    def grad(self) -> np.ndarray | None:
        return self.node.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.node.value.shape})"


def _make(value, parents, backward) -> Node:
    """Create an op output; folds to a constant when no parent needs grads."""
    if any(p.requires_grad for p in parents):
        return Node(value, parents=tuple(parents), backward=backward, requires_grad=True)
    return Node(value)


def _acc(node: Node, g: np.ndarray) -> None:
    """Accumulate a gradient the caller owns (freshly allocated)."""
    if node.grad is None:
        node.grad = g
    else:
        node.grad += g


def _acc_copy(node: Node, g: np.ndarray) -> None:
    """Accumulate a borrowed gradient (a view or an array shared with other
    accumulations); copied on first store so later += cannot alias."""
    if node.grad is None:
        node.grad = g.copy()
    else:
        node.grad += g


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: shapes {a.value.shape} and {b.value.shape} differ")

    def bw(g):
        if a.requires_grad:
            _acc_copy(a, g)
        if b.requires_grad:
            _acc_copy(b, g)

    return _make(a.value + b.value, (a, b), bw)


def sub(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"sub: shapes {a.value.shape} and {b.value.shape} differ")

    def bw(g):
        if a.requires_grad:
            _acc_copy(a, g)
        if b.requires_grad:
            _acc(b, -g)

    return _make(a.value - b.value, (a, b), bw)


def mul(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mul: shapes {a.value.shape} and {b.value.shape} differ")

    def bw(g):
        if a.requires_grad:
            _acc(a, g * b.value)
        if b.requires_grad:
            _acc(b, g * a.value)

    return _make(a.value * b.value, (a, b), bw)


def div(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"div: shapes {a.value.shape} and {b.value.shape} differ")
    out = a.value / b.value

    def bw(g):
        if a.requires_grad:
            _acc(a, g / b.value)
        if b.requires_grad:
            _acc(b, -g * out / b.value)

    return _make(out, (a, b), bw)


def scale(a: Node, c: float) -> Node:
    c = float(c)

    def bw(g):
        if a.requires_grad:
            _acc(a, c * g)

    return _make(a.value * c, (a,), bw)


def add_scalar(a: Node, c: float) -> Node:
    c = float(c)

    def bw(g):
        if a.requires_grad:
            _acc_copy(a, g)

    return _make(a.value + c, (a,), bw)


def matmul(a: Node, b: Node) -> Node:
    _require_shape("matmul lhs", a.value, 2)
    _require_shape("matmul rhs", b.value, 2)
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions disagree, {a.value.shape} x {b.value.shape}"
        )

    def bw(g):
        if a.requires_grad:
            _acc(a, g @ b.value.T)
        if b.requires_grad:
            _acc(b, a.value.T @ g)

    return _make(a.value @ b.value, (a, b), bw)


def transpose(a: Node) -> Node:
    _require_shape("transpose", a.value, 2)

    def bw(g):
        if a.requires_grad:
            _acc(a, np.ascontiguousarray(g.T))

    return _make(np.ascontiguousarray(a.value.T), (a,), bw)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def relu(a: Node) -> Node:
    mask = a.value > 0.0

    def bw(g):
        if a.requires_grad:
            _acc(a, g * mask)

    return _make(np.where(mask, a.value, 0.0), (a,), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Node) -> Node:
    s = _sigmoid(a.value)

    def bw(g):
        if a.requires_grad:
            _acc(a, g * s * (1.0 - s))

    return _make(s, (a,), bw)


def log_sigmoid(a: Node) -> Node:
    """Numerically stable log(sigmoid(x)); safe for very negative inputs."""
    x = a.value
    out = np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))), x - np.log1p(np.exp(-np.abs(x))))

    def bw(g):
        if a.requires_grad:
            _acc(a, g * _sigmoid(-x))

    return _make(out, (a,), bw)


def exp(a: Node) -> Node:
    out = np.exp(a.value)

    def bw(g):
        if a.requires_grad:
            _acc(a, g * out)

    return _make(out, (a,), bw)


def log(a: Node) -> Node:
    def bw(g):
        if a.requires_grad:
            _acc(a, g / a.value)

    return _make(np.log(a.value), (a,), bw)


def absolute(a: Node) -> Node:
    def bw(g):
        if a.requires_grad:
            _acc(a, g * np.sign(a.value))

    return _make(np.abs(a.value), (a,), bw)


def minimum(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"minimum: shapes {a.value.shape} and {b.value.shape} differ")
    take_a = a.value <= b.value  # ties route to a; kink documented

    def bw(g):
        if a.requires_grad:
            _acc(a, g * take_a)
        if b.requires_grad:
            _acc(b, g * ~take_a)

    return _make(np.where(take_a, a.value, b.value), (a, b), bw)


def maximum(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"maximum: shapes {a.value.shape} and {b.value.shape} differ")
    take_a = a.value >= b.value

    def bw(g):
        if a.requires_grad:
            _acc(a, g * take_a)
        if b.requires_grad:
            _acc(b, g * ~take_a)

    return _make(np.where(take_a, a.value, b.value), (a, b), bw)


# ---------------------------------------------------------------------------
# normalization


def softmax(a: Node, axis: int) -> Node:
    """Overflow-safe softmax along ``axis``; output rows sum to 1."""
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if a.requires_grad:
            if s.ndim == 2 and axis in (1, -1):
                inner = np.einsum("nd,nd->n", g, s)[:, None]
            else:
                inner = (g * s).sum(axis=axis, keepdims=True)
            _acc(a, s * (g - inner))

    return _make(s, (a,), bw)


def row_normalize(a: Node, eps: float = 1e-5) -> Node:
    """Zero-mean, unit-variance normalization of each row of a 2-d tensor."""
    _require_shape("row_normalize", a.value, 2)
    x = a.value
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv

    def bw(g):
        if a.requires_grad:
            d = x.shape[1]
            gm = g.sum(axis=1, keepdims=True) / d
            gx = np.einsum("nd,nd->n", g, xhat)[:, None] / d
            _acc(a, inv * (g - gm - xhat * gx))

    return _make(xhat, (a,), bw)


def layer_norm(a: Node, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
    """Per-row layer norm of ``a`` [N, D] with per-column gain and bias [D]."""
    _require_shape("layer_norm input", a.value, 2)
    if gain.value.shape != (a.value.shape[1],) or bias.value.shape != (a.value.shape[1],):
        raise ShapeError(
            f"layer_norm: gain {gain.value.shape} / bias {bias.value.shape} "
            f"do not match width of {a.value.shape}"
        )
    return add_bias(scale_cols(row_normalize(a, eps), gain), bias)


# ---------------------------------------------------------------------------
# explicit row/column alignment (the only sanctioned "broadcasting")


def add_bias(x: Node, b: Node) -> Node:
    """x [N, D] + b [D], added to every row."""
    _require_shape("add_bias input", x.value, 2)
    if b.value.shape != (x.value.shape[1],):
        raise ShapeError(f"add_bias: bias {b.value.shape} vs input {x.value.shape}")

    def bw(g):
        if x.requires_grad:
            _acc_copy(x, g)
        if b.requires_grad:
            _acc(b, g.sum(axis=0))

    return _make(x.value + b.value[None, :], (x, b), bw)


def scale_cols(x: Node, s: Node) -> Node:
    """x [N, D] with column j multiplied by s[j]."""
    _require_shape("scale_cols input", x.value, 2)
    if s.value.shape != (x.value.shape[1],):
        raise ShapeError(f"scale_cols: scale {s.value.shape} vs input {x.value.shape}")

    def bw(g):
        if x.requires_grad:
            _acc(x, g * s.value[None, :])
        if s.requires_grad:
            _acc(s, np.einsum("nd,nd->d", g, x.value))

    return _make(x.value * s.value[None, :], (x, s), bw)


def scale_rows(x: Node, s: Node) -> Node:
    """x [N, D] with row i multiplied by s[i]."""
    _require_shape("scale_rows input", x.value, 2)
    if s.value.shape != (x.value.shape[0],):
        raise ShapeError(f"scale_rows: scale {s.value.shape} vs input {x.value.shape}")

    def bw(g):
        if x.requires_grad:
            _acc(x, g * s.value[:, None])
        if s.requires_grad:
            _acc(s, np.einsum("nd,nd->n", g, x.value))

    return _make(x.value * s.value[:, None], (x, s), bw)


def shift_rows(x: Node, b: Node) -> Node:
    """x [N, D] with b[i] added to every element of row i."""
    _require_shape("shift_rows input", x.value, 2)
    if b.value.shape != (x.value.shape[0],):
        raise ShapeError(f"shift_rows: shift {b.value.shape} vs input {x.value.shape}")

    def bw(g):
        if x.requires_grad:
            _acc_copy(x, g)
        if b.requires_grad:
            _acc(b, g.sum(axis=1))

    return _make(x.value + b.value[:, None], (x, b), bw)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Node, shape) -> Node:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.value.size:
        raise ShapeError(f"reshape: cannot view {a.value.shape} as {shape}")

    def bw(g):
        if a.requires_grad:
            _acc_copy(a, g.reshape(a.value.shape))

    return _make(a.value.reshape(shape), (a,), bw)


def permute(a: Node, axes) -> Node:
    axes = tuple(int(x) for x in axes)
    inverse = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))

    def bw(g):
        if a.requires_grad:
            _acc(a, np.ascontiguousarray(np.transpose(g, inverse)))

    return _make(np.ascontiguousarray(np.transpose(a.value, axes)), (a,), bw)


def concat(nodes, axis: int = 0) -> Node:
    nodes = list(nodes)
    if not nodes:
        raise ShapeError("concat: no tensors given")
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for n, start, stop in zip(nodes, offsets[:-1], offsets[1:]):
            if n.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, stop)
                _acc_copy(n, g[tuple(idx)])

    return _make(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes), bw)


def narrow(a: Node, axis: int, start: int, length: int) -> Node:
    """Slice ``length`` entries from ``start`` along ``axis``."""
    if start < 0 or start + length > a.value.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}:{start + length}) out of range for shape "
            f"{a.value.shape} on axis {axis}"
        )
    idx = [slice(None)] * a.value.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        if a.requires_grad:
            buf = np.zeros_like(a.value)
            buf[idx] = g
            _acc(a, buf)

    return _make(np.ascontiguousarray(a.value[idx]), (a,), bw)


def gather_rows(a: Node, indices) -> Node:
    """Select rows of a 2-d tensor; duplicate indices accumulate gradients."""
    _require_shape("gather_rows", a.value, 2)
    idx = np.asarray(indices, dtype=np.intp)

    def bw(g):
        if a.requires_grad:
            buf = np.zeros_like(a.value)
            np.add.at(buf, idx, g)
            _acc(a, buf)

    return _make(a.value[idx], (a,), bw)


def gather_flat(a: Node, indices: np.ndarray) -> Node:
    """Index the flattened tensor with an arbitrary-shape index array."""
    idx = np.asarray(indices, dtype=np.intp)
    flat = a.value.reshape(-1)

    def bw(g):
        if a.requires_grad:
            buf = np.bincount(
                idx.reshape(-1), weights=g.reshape(-1), minlength=a.value.size
            )
            _acc(a, buf.reshape(a.value.shape))

    return _make(flat[idx], (a,), bw)


def repeat_rows(a: Node, times: int) -> Node:
    """Repeat each row of a 2-d tensor ``times`` times consecutively."""
    _require_shape("repeat_rows", a.value, 2)
    n, d = a.value.shape

    def bw(g):
        if a.requires_grad:
            _acc(a, g.reshape(n, times, d).sum(axis=1))

    return _make(np.repeat(a.value, times, axis=0), (a,), bw)


def pad2d(a: Node, pad: int) -> Node:
    """Zero-pad the two trailing axes of a [C, H, W] tensor."""
    _require_shape("pad2d", a.value, 3)

    def bw(g):
        if a.requires_grad:
            _acc_copy(a, g[:, pad:-pad or None, pad:-pad or None])

    out = np.pad(a.value, ((0, 0), (pad, pad), (pad, pad)))
    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Node) -> Node:
    def bw(g):
        if a.requires_grad:
            _acc(a, np.full_like(a.value, float(g)))

    return _make(a.value.sum(), (a,), bw)


def sum_axis(a: Node, axis: int) -> Node:
    def bw(g):
        if a.requires_grad:
            _acc(a, np.ascontiguousarray(
                np.broadcast_to(np.expand_dims(g, axis), a.value.shape)))

    return _make(a.value.sum(axis=axis), (a,), bw)


def mean_all(a: Node) -> Node:
    return scale(sum_all(a), 1.0 / a.value.size)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
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


def backward(loss: Node) -> None:
    """Populate ``grad`` on every ancestor of a scalar ``loss``.

    Grads of all reachable nodes are reset first, so calling backward twice
    on the same graph yields bitwise-identical gradients.
    """
    if loss.value.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.value.shape}")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients against central differences."""

    tol: float
    max_error: float = 0.0
    worst_param: str = ""
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def __str__(self) -> str:
        lines = [
            f"{'PASS' if self.passed else 'FAIL'}  max rel error "
            f"{self.max_error:.3e} (tol {self.tol:.1e}), worst: {self.worst_param}"
        ]
        for name, err in self.per_param.items():
            lines.append(f"  {err:.3e}  {name}")
        return "\n".join(lines)


def grad_check(
    f,
    params,
    h: float = 1e-6,
    tol: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` rebuilds a scalar loss from the current parameter values on every
    call; it must be twice-differentiable at the checked point (callers keep
    inputs away from relu zeros, bilinear lattice lines, and top-k ties).
    ``max_entries`` caps the number of coordinates perturbed per parameter
    (a deterministic seeded subsample) to keep large composites affordable.

    The error reported per coordinate is |analytic - numeric| divided by
    max(1, |analytic|, |numeric|), so near-zero gradients are compared
    absolutely and large ones relatively.
    """
    params = list(params)
    for p in params:
        p.node.grad = None
    loss = f()
    backward(loss)
    # a parameter outside the graph legitimately has zero gradient
    analytic = [
        np.zeros_like(p.value) if p.grad is None else np.array(p.grad, copy=True)
        for p in params
    ]

    if rng is None:
        rng = np.random.default_rng(0)
    report = GradCheckReport(tol=tol)
    for p, ana in zip(params, analytic):
        flat_value = p.node.value.reshape(-1)
        flat_ana = ana.reshape(-1)
        n = flat_value.size
        if max_entries is not None and n > max_entries:
            coords = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            coords = np.arange(n)
        worst = 0.0
        for i in coords:
            orig = flat_value[i]
            flat_value[i] = orig + h
            up = float(f().value)
            flat_value[i] = orig - h
            down = float(f().value)
            flat_value[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = float(flat_ana[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > worst:
                worst = err
        report.per_param[p.name] = worst
        if worst > report.max_error:
            report.max_error = worst
            report.worst_param = p.name
    return report
