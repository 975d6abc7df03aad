"""Reverse-mode automatic differentiation over small dense float64 tensors.

Values live in numpy arrays; the computation graph is a DAG of ``Node``
objects linked through parent references. Every backward rule is itself
written in terms of the public primitives, so the nodes produced while
back-propagating form a new differentiable graph. That is what makes
``grad(..., create_graph=True)`` work: differentiating the result of a
gradient simply runs the same machinery over the larger graph, which the
one-step-lookahead meta objective relies on.

Conventions:
  * everything is float64 (meta gradients compound rounding error),
  * matrices are 2-D, scalars have shape ``()``,
  * no broadcasting beyond the explicit ``tile_*`` / ``broadcast_scalar``
    primitives,
  * node values are never mutated after construction, so a graph can be
    traversed repeatedly (e.g. for a second-order pass).

Nodes are confined to a single worker; distinct graphs may run on distinct
workers, and the underlying arrays are safe to share read-only.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import InvalidDistribution, InvalidValue, NotScalar, ShapeError

Array = np.ndarray

#: probabilities below this are clamped before taking logs, which keeps the
#: cross entropy finite on the closed simplex
PROB_CLAMP = 1e-12


class Node:
    """One value in the computation graph.

    ``requires_grad`` is true iff the node depends on a trainable leaf;
    constant subgraphs drop their parents entirely so backward passes never
    visit them.
    """

    __slots__ = ("value", "parents", "op", "requires_grad", "_vjp")

    def __init__(
        self,
        value: Array,
        parents: tuple["Node", ...] = (),
        op: str = "const",
        requires_grad: bool = False,
        vjp: Callable[["Node"], tuple["Node", ...]] | None = None,
    ):
        self.value = value
        self.parents = parents
        self.op = op
        self.requires_grad = requires_grad
        self._vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise NotScalar(f"item() on node of shape {self.shape}")
        return float(self.value.reshape(()))

    def detach(self) -> "Node":
        """Constant node sharing this node's value array."""
        return Node(self.value, op="const")

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"

    # Operator sugar; the named functions below are the primary API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(float(other), self)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(-1.0, self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_f64(values) -> Array:
    return np.asarray(values, dtype=np.float64)


def leaf(values, trainable: bool = False) -> Node:
    """Graph leaf. Trainable leaves accumulate gradients in ``grad``."""
    arr = _as_f64(values)
    if not np.all(np.isfinite(arr)):
        raise InvalidValue("leaf values must be finite")
    return Node(arr, op="leaf", requires_grad=trainable)


def constant(values) -> Node:
    """Non-trainable leaf; gradients never flow into it."""
    return leaf(values, trainable=False)


def _make(op: str, value: Array, parents: tuple[Node, ...]) -> Node:
    rg = any(p.requires_grad for p in parents)
    if not rg:
        return Node(value, op=op)
    return Node(value, parents=parents, op=op, requires_grad=True)


def _check_2d(a: Node, op: str) -> None:
    if a.value.ndim != 2:
        raise ShapeError(f"{op} expects a matrix, got shape {a.shape}")


def _check_same_shape(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# --- elementwise primitives -------------------------------------------------


def add(a: Node, b: Node) -> Node:
    _check_same_shape(a, b, "add")
    out = _make("add", a.value + b.value, (a, b))
    if out.requires_grad:
        out._vjp = lambda g: (g, g)
    return out


def sub(a: Node, b: Node) -> Node:
    _check_same_shape(a, b, "sub")
    out = _make("sub", a.value - b.value, (a, b))
    if out.requires_grad:
        out._vjp = lambda g: (g, scalar_mul(-1.0, g))
    return out


def mul(a: Node, b: Node) -> Node:
    _check_same_shape(a, b, "mul")
    out = _make("mul", a.value * b.value, (a, b))
    if out.requires_grad:
        out._vjp = lambda g: (mul(g, b), mul(g, a))
    return out


def scalar_mul(c: float, a: Node) -> Node:
    c = float(c)
    out = _make("scalar_mul", c * a.value, (a,))
    if out.requires_grad:
        out._vjp = lambda g: (scalar_mul(c, g),)
    return out


def tanh(a: Node) -> Node:
    out = _make("tanh", np.tanh(a.value), (a,))
    if out.requires_grad:
        one = Node(np.ones_like(out.value))
        out._vjp = lambda g: (mul(g, sub(one, mul(out, out))),)
    return out


def exp(a: Node) -> Node:
    out = _make("exp", np.exp(a.value), (a,))
    if out.requires_grad:
        out._vjp = lambda g: (mul(g, out),)
    return out


def log(a: Node) -> Node:
    if np.any(a.value <= 0.0):
        raise InvalidValue("log requires strictly positive values")
    out = _make("log", np.log(a.value), (a,))
    if out.requires_grad:
        out._vjp = lambda g: (mul(g, reciprocal(a)),)
    return out


def reciprocal(a: Node) -> Node:
    if np.any(a.value == 0.0):
        raise InvalidValue("reciprocal of zero")
    out = _make("reciprocal", 1.0 / a.value, (a,))
    if out.requires_grad:
        out._vjp = lambda g: (scalar_mul(-1.0, mul(g, mul(out, out))),)
    return out


def clamp_min(a: Node, floor: float) -> Node:
    """Elementwise max(a, floor); clamped entries get zero gradient."""
    out = _make("clamp_min", np.maximum(a.value, floor), (a,))
    if out.requires_grad:
        mask = Node((a.value > floor).astype(np.float64))
        out._vjp = lambda g: (mul(g, mask),)
    return out


# --- matrix / structural primitives ------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    _check_2d(a, "matmul")
    _check_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape}")
    out = _make("matmul", a.value @ b.value, (a, b))
    if out.requires_grad:
        out._vjp = lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g))
    return out


def transpose(a: Node) -> Node:
    _check_2d(a, "transpose")
    out = _make("transpose", a.value.T.copy(), (a,))
    if out.requires_grad:
        out._vjp = lambda g: (transpose(g),)
    return out


def concat(nodes: Sequence[Node], axis: int) -> Node:
    """Concatenate matrices along rows (axis 0) or columns (axis 1)."""
    if axis not in (0, 1):
        raise ShapeError(f"concat axis must be 0 or 1, got {axis}")
    if not nodes:
        raise ShapeError("concat of an empty sequence")
    other = 1 - axis
    for n in nodes:
        _check_2d(n, "concat")
        if n.shape[other] != nodes[0].shape[other]:
            raise ShapeError("concat: mismatched cross dimension")
    out = _make("concat", np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes))
    if out.requires_grad:
        sizes = [n.shape[axis] for n in nodes]
        offsets = np.concatenate([[0], np.cumsum(sizes)])

        def vjp(g: Node):
            return tuple(
                narrow(g, axis, int(offsets[i]), sizes[i]) for i in range(len(sizes))
            )

        out._vjp = vjp
    return out


def narrow(a: Node, axis: int, start: int, length: int) -> Node:
    """Contiguous slice of ``length`` rows/columns starting at ``start``."""
    _check_2d(a, "narrow")
    if axis not in (0, 1):
        raise ShapeError(f"narrow axis must be 0 or 1, got {axis}")
    total = a.shape[axis]
    if start < 0 or length < 1 or start + length > total:
        raise ShapeError(f"narrow [{start}:{start + length}] out of {total}")
    if axis == 0:
        val = a.value[start : start + length].copy()
    else:
        val = a.value[:, start : start + length].copy()
    out = _make("narrow", val, (a,))
    if out.requires_grad:
        before, after = start, total - start - length
        cross = a.shape[1 - axis]

        def vjp(g: Node):
            pieces = []
            if before:
                z = (before, cross) if axis == 0 else (cross, before)
                pieces.append(Node(np.zeros(z)))
            pieces.append(g)
            if after:
                z = (after, cross) if axis == 0 else (cross, after)
                pieces.append(Node(np.zeros(z)))
            return (concat(pieces, axis) if len(pieces) > 1 else g,)

        out._vjp = vjp
    return out


def index_select_row(a: Node, index: int) -> Node:
    """Row ``index`` of a matrix as a 1×n node (embedding lookup)."""
    _check_2d(a, "index_select_row")
    rows = a.shape[0]
    if not 0 <= index < rows:
        raise ShapeError(f"row index {index} out of {rows}")
    out = _make("index_select_row", a.value[index : index + 1].copy(), (a,))
    if out.requires_grad:
        onehot = np.zeros((1, rows))
        onehot[0, index] = 1.0
        selector = Node(onehot)
        out._vjp = lambda g: (matmul(transpose(selector), g),)
    return out


# --- reductions and their broadcast duals ------------------------------------


def sum_rows(a: Node) -> Node:
    """Row sums: [B, n] -> [B, 1]."""
    _check_2d(a, "sum_rows")
    out = _make("sum_rows", a.value.sum(axis=1, keepdims=True), (a,))
    if out.requires_grad:
        n = a.shape[1]
        out._vjp = lambda g: (tile_cols(g, n),)
    return out


def tile_cols(a: Node, n: int) -> Node:
    """Repeat a [B, 1] column n times: [B, 1] -> [B, n]."""
    _check_2d(a, "tile_cols")
    if a.shape[1] != 1:
        raise ShapeError(f"tile_cols expects one column, got {a.shape}")
    out = _make("tile_cols", np.repeat(a.value, n, axis=1), (a,))
    if out.requires_grad:
        out._vjp = lambda g: (sum_rows(g),)
    return out


def sum_cols(a: Node) -> Node:
    """Column sums: [B, n] -> [1, n]."""
    _check_2d(a, "sum_cols")
    out = _make("sum_cols", a.value.sum(axis=0, keepdims=True), (a,))
    if out.requires_grad:
        b = a.shape[0]
        out._vjp = lambda g: (tile_rows(g, b),)
    return out


def tile_rows(a: Node, n: int) -> Node:
    """Repeat a [1, n] row n times: [1, n] -> [n_rows, n_cols]."""
    _check_2d(a, "tile_rows")
    if a.shape[0] != 1:
        raise ShapeError(f"tile_rows expects one row, got {a.shape}")
    out = _make("tile_rows", np.repeat(a.value, n, axis=0), (a,))
    if out.requires_grad:
        out._vjp = lambda g: (sum_cols(g),)
    return out


def sum_all(a: Node) -> Node:
    """Sum of all entries as a scalar node (shape ``()``)."""
    out = _make("sum_all", np.asarray(a.value.sum()), (a,))
    if out.requires_grad:
        shape = a.shape
        out._vjp = lambda g: (broadcast_scalar(g, shape),)
    return out


def broadcast_scalar(s: Node, shape: tuple[int, ...]) -> Node:
    """Fill ``shape`` with a scalar node's value."""
    if s.value.size != 1:
        raise ShapeError(f"broadcast_scalar expects a scalar, got {s.shape}")
    out = _make("broadcast_scalar", np.full(shape, s.value.reshape(())), (s,))
    if out.requires_grad:
        out._vjp = lambda g: (sum_all(g),)
    return out


def mean(a: Node) -> Node:
    """Mean over all entries as a scalar node."""
    return scalar_mul(1.0 / a.value.size, sum_all(a))


def weighted_sum(values: Node, weights: Node | Array) -> Node:
    """Scalar sum of elementwise products, typically over a [B, 1] column.

    ``weights`` may be a node (differentiable coefficients) or a plain array
    (frozen coefficients).
    """
    w = weights if isinstance(weights, Node) else constant(weights)
    return sum_all(mul(values, w))


# --- softmax and cross entropy ------------------------------------------------


def softmax_rows(a: Node) -> Node:
    """Row-wise softmax of a [B, K] matrix.

    The per-row max shift is treated as a constant, which is exact to all
    orders because softmax (and every derivative of it) is invariant under
    per-row shifts.
    """
    _check_2d(a, "softmax_rows")
    shift = Node(np.repeat(a.value.max(axis=1, keepdims=True), a.shape[1], axis=1))
    e = exp(sub(a, shift))
    return mul(e, tile_cols(reciprocal(sum_rows(e)), a.shape[1]))


def _check_one_hot(targets: Array, k: int) -> None:
    if targets.ndim != 2 or targets.shape[1] != k:
        raise ShapeError(f"targets shape {targets.shape} does not match K={k}")
    ones = targets == 1.0
    if not (np.all((targets == 0.0) | ones) and np.all(ones.sum(axis=1) == 1)):
        raise InvalidDistribution("each target row must be one-hot")


def nll_rows(probs: Node, targets: Array) -> Node:
    """Per-row negative log probability at the target index: [B, K] -> [B, 1].

    Probabilities are clamped at ``PROB_CLAMP`` before the log.
    """
    _check_2d(probs, "nll_rows")
    targets = _as_f64(targets)
    _check_one_hot(targets, probs.shape[1])
    picked = sum_rows(mul(probs, Node(targets)))
    return scalar_mul(-1.0, log(clamp_min(picked, PROB_CLAMP)))


def cross_entropy(probs: Node, targets: Array | Node) -> Node:
    """Mean over rows of -log(probability at the target class).

    ``probs`` rows must sum to 1 within 1e-6 and ``targets`` must be exact
    one-hot rows.
    """
    t = targets.value if isinstance(targets, Node) else _as_f64(targets)
    _check_2d(probs, "cross_entropy")
    row_sums = probs.value.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6) or np.any(probs.value < -1e-6):
        raise InvalidDistribution("probability rows must sum to 1")
    return scalar_mul(1.0 / probs.shape[0], sum_all(nll_rows(probs, t)))


# --- reverse pass --------------------------------------------------------------


def _toposort(root: Node) -> list[Node]:
    """Ancestors of ``root`` that require grad, parents before children."""
    order: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def grad(objective: Node, wrt: Sequence[Node], create_graph: bool = False) -> list[Node]:
    """Gradients of a scalar objective with respect to leaf nodes.

    Returns one node per ``wrt`` entry, shaped like the leaf. Leaves the
    objective does not reach get an exact zero tensor. With
    ``create_graph=True`` the returned nodes stay connected to every upstream
    leaf and can be differentiated again; otherwise they are detached
    constants.
    """
    if objective.value.size != 1:
        raise NotScalar(f"objective has shape {objective.shape}")

    grads: dict[int, Node] = {}
    if objective.requires_grad:
        grads[id(objective)] = Node(np.ones_like(objective.value))
        for node in reversed(_toposort(objective)):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, part in zip(node.parents, node._vjp(g)):
                if not parent.requires_grad or part is None:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = part if acc is None else add(acc, part)

    results = []
    for w in wrt:
        gw = grads.get(id(w))
        if gw is None:
            gw = Node(np.zeros_like(w.value))
        elif not create_graph:
            gw = gw.detach()
        results.append(gw)
    return results
