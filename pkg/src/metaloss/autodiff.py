"""Reverse-mode automatic differentiation on append-only computation graphs.

Every value is a dense 2-D float64 block (scalars are 1x1). A backward pass
is emitted as ordinary graph operations rather than raw numbers, so a
gradient node can itself be differentiated. That property is what allows
differentiating through a gradient-descent step that was built inside the
graph.
"""
from __future__ import annotations

from typing import Iterable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "DomainError",
    "GraphError",
    "NodeRef",
    "GradientMap",
    "Graph",
    "PUBLIC_OPS",
    "concat_cols",
]


class AutodiffError(Exception):
    """Base class for graph construction and differentiation errors."""


class ShapeError(AutodiffError):
    """Operand shapes violate an operation's shape rule."""


class DomainError(AutodiffError):
    """Operand values lie outside an operation's numeric domain."""


class GraphError(AutodiffError):
    """A node handle does not belong to the graph, or the op is unknown."""


class NodeRef(NamedTuple):
    """Handle to one node: position in the graph plus its (rows, cols)."""

    index: int
    shape: tuple


class _Node:
    __slots__ = ("op", "parents", "value", "aux")

    def __init__(self, op, parents, value, aux=None):
        self.op = op
        self.parents = parents
        self.value = value
        self.aux = aux


class GradientMap:
    """Per-input gradient nodes, living in the same graph as the output.

    Entries are keyed by the exact NodeRef passed to ``Graph.grad``; each
    gradient has the shape of its input.
    """

    def __init__(self, entries):
        self._entries = dict(entries)

    def __getitem__(self, ref: NodeRef) -> NodeRef:
        return self._entries[ref]

    def __contains__(self, ref) -> bool:
        return ref in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()


def _as_block(values, shape=None) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, arr.shape[0])
    elif arr.ndim != 2:
        raise ShapeError(f"blocks are rank <= 2, got rank {arr.ndim}")
    if shape is not None:
        rows, cols = int(shape[0]), int(shape[1])
        if arr.size != rows * cols:
            raise ShapeError(
                f"value of length {arr.size} cannot fill shape ({rows}, {cols})"
            )
        arr = arr.reshape(rows, cols)
    return arr


# Operations callable through the generic apply_primitive door.
PUBLIC_OPS = (
    "add",
    "sub",
    "mul_elementwise",
    "scalar_mul",
    "matmul",
    "concat_rows",
    "relu",
    "tanh",
    "square",
    "exp",
    "log",
    "sum",
    "mean",
    "softmax_cross_entropy",
)


class Graph:
    """Append-only computation graph over 2-D float64 blocks.

    Values are computed eagerly at node creation and frozen (read-only).
    Parents always precede children, so a single reverse sweep visits nodes
    in a valid order. A graph is single-threaded by construction; distinct
    graphs are independent.
    """

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    # ------------------------------------------------------------------ #
    # node plumbing
    # ------------------------------------------------------------------ #

    def _append(self, op, parents, value, aux=None) -> NodeRef:
        value.setflags(write=False)
        self._nodes.append(_Node(op, parents, value, aux))
        return NodeRef(len(self._nodes) - 1, value.shape)

    def _own_const(self, arr: np.ndarray) -> NodeRef:
        # Internal: wrap a freshly allocated array without copying.
        return self._append("const", (), arr)

    def _check(self, ref: NodeRef) -> _Node:
        if not isinstance(ref, NodeRef):
            raise GraphError(f"expected a NodeRef, got {type(ref).__name__}")
        if ref.index >= len(self._nodes) or ref.index < 0:
            raise GraphError(f"node {ref.index} is not in this graph")
        node = self._nodes[ref.index]
        if node.value.shape != ref.shape:
            raise GraphError(
                f"stale ref: node {ref.index} has shape {node.value.shape}, "
                f"ref says {ref.shape}"
            )
        return node

    def _ref(self, index: int) -> NodeRef:
        return NodeRef(index, self._nodes[index].value.shape)

    def value(self, ref: NodeRef) -> np.ndarray:
        """The node's value block (read-only view)."""
        return self._check(ref).value

    def scalar(self, ref: NodeRef) -> float:
        """The value of a 1x1 node as a float."""
        node = self._check(ref)
        if node.value.shape != (1, 1):
            raise ShapeError(f"scalar() needs a 1x1 node, got {node.value.shape}")
        return float(node.value[0, 0])

    # ------------------------------------------------------------------ #
    # leaves
    # ------------------------------------------------------------------ #

    def variable(self, values, shape=None) -> NodeRef:
        """Enter a differentiable leaf. The value block is a private copy."""
        return self._append("var", (), np.array(_as_block(values, shape)))

    def constant(self, values, shape=None) -> NodeRef:
        """Enter a non-differentiable leaf (gradient is defined as zero)."""
        return self._append("const", (), np.array(_as_block(values, shape)))

    def zeros(self, rows: int, cols: int) -> NodeRef:
        return self._own_const(np.zeros((rows, cols)))

    def ones(self, rows: int, cols: int) -> NodeRef:
        return self._own_const(np.ones((rows, cols)))

    # ------------------------------------------------------------------ #
    # primitives
    # ------------------------------------------------------------------ #

    def _ew_shapes(self, op, a, b):
        na, nb = self._check(a), self._check(b)
        if a.shape != b.shape and a.shape != (1, 1) and b.shape != (1, 1):
            raise ShapeError(
                f"{op}: shapes {a.shape} and {b.shape} are neither equal "
                "nor scalar-with-matrix"
            )
        return na, nb

    def add(self, a: NodeRef, b: NodeRef) -> NodeRef:
        na, nb = self._ew_shapes("add", a, b)
        return self._append("add", (a.index, b.index), na.value + nb.value)

    def sub(self, a: NodeRef, b: NodeRef) -> NodeRef:
        na, nb = self._ew_shapes("sub", a, b)
        return self._append("sub", (a.index, b.index), na.value - nb.value)

    def mul(self, a: NodeRef, b: NodeRef) -> NodeRef:
        """Elementwise product; shapes must match exactly."""
        na, nb = self._check(a), self._check(b)
        if a.shape != b.shape:
            raise ShapeError(
                f"mul_elementwise: shapes {a.shape} and {b.shape} differ "
                "(use scalar_mul to scale by a scalar)"
            )
        return self._append("mul", (a.index, b.index), na.value * nb.value)

    def scalar_mul(self, x: NodeRef, s) -> NodeRef:
        """Scale a block by a scalar (float or 1x1 node)."""
        if not isinstance(s, NodeRef):
            s = self._own_const(np.array([[float(s)]]))
        nx, ns = self._check(x), self._check(s)
        if s.shape != (1, 1):
            raise ShapeError(f"scalar_mul: scalar operand has shape {s.shape}")
        return self._append("scalar_mul", (x.index, s.index), nx.value * ns.value)

    def matmul(self, a: NodeRef, b: NodeRef) -> NodeRef:
        na, nb = self._check(a), self._check(b)
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
        return self._append("matmul", (a.index, b.index), na.value @ nb.value)

    def concat_rows(self, a: NodeRef, b: NodeRef) -> NodeRef:
        na, nb = self._check(a), self._check(b)
        if a.shape[1] != b.shape[1]:
            raise ShapeError(
                f"concat_rows: column counts differ, {a.shape} vs {b.shape}"
            )
        return self._append(
            "concat_rows", (a.index, b.index), np.concatenate([na.value, nb.value])
        )

    def relu(self, a: NodeRef) -> NodeRef:
        na = self._check(a)
        return self._append("relu", (a.index,), np.maximum(na.value, 0.0))

    def tanh(self, a: NodeRef) -> NodeRef:
        na = self._check(a)
        return self._append("tanh", (a.index,), np.tanh(na.value))

    def square(self, a: NodeRef) -> NodeRef:
        na = self._check(a)
        return self._append("square", (a.index,), na.value * na.value)

    def exp(self, a: NodeRef) -> NodeRef:
        na = self._check(a)
        return self._append("exp", (a.index,), np.exp(na.value))

    def log(self, a: NodeRef) -> NodeRef:
        na = self._check(a)
        if np.any(na.value <= 0.0):
            raise DomainError("log: inputs must be strictly positive")
        return self._append("log", (a.index,), np.log(na.value))

    def sum(self, a: NodeRef) -> NodeRef:
        na = self._check(a)
        return self._append("sum", (a.index,), na.value.sum().reshape(1, 1))

    def mean(self, a: NodeRef) -> NodeRef:
        na = self._check(a)
        return self._append("mean", (a.index,), na.value.mean().reshape(1, 1))

    def softmax_cross_entropy(self, logits: NodeRef, targets: NodeRef) -> NodeRef:
        """Per-row cross entropy between softmax(logits) and target rows.

        Targets must be probability rows (entries in [0, 1], each row summing
        to 1); returns an M x 1 block of per-row losses.
        """
        nz, ny = self._check(logits), self._check(targets)
        if logits.shape != targets.shape:
            raise ShapeError(
                f"softmax_cross_entropy: logits {logits.shape} vs "
                f"targets {targets.shape}"
            )
        z, y = nz.value, ny.value
        if not np.all(np.isfinite(z)):
            raise DomainError("softmax_cross_entropy: logits must be finite")
        if np.any(y < -1e-12) or np.any(y > 1.0 + 1e-12):
            raise DomainError("softmax_cross_entropy: targets outside [0, 1]")
        if np.any(np.abs(y.sum(axis=1) - 1.0) > 1e-9):
            raise DomainError("softmax_cross_entropy: target rows must sum to 1")
        shift = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shift).sum(axis=1, keepdims=True))
        out = (y * (lse - shift)).sum(axis=1, keepdims=True)
        # Row max is captured as a constant shift; softmax is shift invariant,
        # so derivatives computed against the shifted logits are exact.
        return self._append(
            "softmax_cross_entropy",
            (logits.index, targets.index),
            out,
            aux=z.max(axis=1, keepdims=True),
        )

    # extended ops: not part of the public primitive door, but full graph
    # citizens with their own backward rules

    def transpose(self, a: NodeRef) -> NodeRef:
        na = self._check(a)
        # A view suffices: downstream matmuls take transposed operands
        # directly, and stored values are read-only either way.
        return self._append("transpose", (a.index,), na.value.T)

    def gather_rows(self, a: NodeRef, idx) -> NodeRef:
        """Pick rows of ``a`` by index; repeats allowed."""
        na = self._check(a)
        idx = np.asarray(idx, dtype=np.intp).ravel()
        if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
            raise ShapeError(
                f"gather_rows: index out of range for {a.shape[0]} rows"
            )
        order = None if _is_sorted(idx) else np.argsort(idx, kind="stable")
        return self._append(
            "gather_rows", (a.index,), na.value[idx], aux=(idx, order, a.shape[0])
        )

    def scatter_rows(self, b: NodeRef, idx, rows: int, order=None) -> NodeRef:
        """Sum rows of ``b`` into a zero block of ``rows`` rows, per index."""
        nb = self._check(b)
        idx = np.asarray(idx, dtype=np.intp).ravel()
        if idx.size != b.shape[0]:
            raise ShapeError(
                f"scatter_rows: {idx.size} indices for {b.shape[0]} rows"
            )
        if idx.size and (idx.min() < 0 or idx.max() >= rows):
            raise ShapeError(f"scatter_rows: index out of range for {rows} rows")
        if order is None and not _is_sorted(idx):
            order = np.argsort(idx, kind="stable")
        value = _segment_sum(nb.value, idx, rows, order)
        return self._append("scatter_rows", (b.index,), value, aux=(idx, order, rows))

    # ------------------------------------------------------------------ #
    # generic door
    # ------------------------------------------------------------------ #

    def apply_primitive(self, op: str, inputs: Sequence[NodeRef]) -> NodeRef:
        """Apply one of the named public primitives to the given nodes."""
        try:
            method, arity = _PUBLIC_TABLE[op]
        except KeyError:
            raise GraphError(f"unknown primitive {op!r}") from None
        if len(inputs) != arity:
            raise GraphError(f"{op} takes {arity} input(s), got {len(inputs)}")
        return method(self, *inputs)

    # ------------------------------------------------------------------ #
    # differentiation
    # ------------------------------------------------------------------ #

    def grad(
        self,
        output: NodeRef,
        wrt: Iterable[NodeRef],
        create_graph: bool = False,
    ) -> GradientMap:
        """Gradients of a scalar output with respect to each ``wrt`` node.

        With ``create_graph`` set, the returned gradients are live graph
        nodes and can be differentiated again. Without it they are detached
        into constants (further differentiation yields zero). Inputs that do
        not influence the output get zero gradients. Contributions from
        multiple paths are summed in descending node-index order, which makes
        repeated runs bitwise identical.
        """
        out_node = self._check(output)
        if out_node.value.shape != (1, 1):
            raise ShapeError(
                f"grad needs a scalar (1x1) output, got {out_node.value.shape}"
            )
        wrt = list(wrt)
        for w in wrt:
            self._check(w)

        nodes = self._nodes
        out_i = output.index

        # Restrict the sweep to nodes that lie on some wrt -> output path.
        ancestors = set()
        stack = [out_i]
        while stack:
            i = stack.pop()
            if i in ancestors:
                continue
            ancestors.add(i)
            stack.extend(nodes[i].parents)
        wrt_set = {w.index for w in wrt}
        needed = set()
        for i in sorted(ancestors):
            if i in wrt_set or any(p in needed for p in nodes[i].parents):
                needed.add(i)

        adjoint: dict[int, NodeRef] = {}
        if out_i in needed:
            adjoint[out_i] = self._own_const(np.ones((1, 1)))
        for i in sorted(needed, reverse=True):
            g = adjoint.get(i)
            if g is None:
                continue
            node = nodes[i]
            if not node.parents:
                continue
            for p, contrib in _VJP_RULES[node.op](self, i, node, g, needed):
                prev = adjoint.get(p)
                adjoint[p] = contrib if prev is None else self.add(prev, contrib)

        entries = {}
        for w in wrt:
            ref = adjoint.get(w.index)
            if ref is None:
                ref = self._own_const(np.zeros(w.shape))
            elif not create_graph:
                ref = self._own_const(nodes[ref.index].value.copy())
            entries[w] = ref
        return GradientMap(entries)


def _is_sorted(idx: np.ndarray) -> bool:
    return idx.size < 2 or bool(np.all(idx[1:] >= idx[:-1]))


def _segment_sum(values, idx, rows, order) -> np.ndarray:
    out = np.zeros((rows, values.shape[1]))
    if idx.size == 0:
        return out
    if order is not None:
        idx = idx[order]
        values = values[order]
    starts = np.flatnonzero(np.r_[True, idx[1:] != idx[:-1]])
    out[idx[starts]] = np.add.reduceat(values, starts, axis=0)
    return out


# ---------------------------------------------------------------------- #
# backward rules, one per op; each emits graph operations so the produced
# gradients stay differentiable
# ---------------------------------------------------------------------- #


def _pref(g: Graph, i: int) -> NodeRef:
    return NodeRef(i, g._nodes[i].value.shape)


def _shrink(g: Graph, grad: NodeRef, parent: NodeRef) -> NodeRef:
    # Undo scalar-with-matrix broadcasting: a 1x1 operand collects the sum.
    if parent.shape == grad.shape:
        return grad
    return g.sum(grad)


def _vjp_add(g, i, node, grad, needed):
    pa, pb = node.parents
    out = []
    if pa in needed:
        out.append((pa, _shrink(g, grad, _pref(g, pa))))
    if pb in needed:
        out.append((pb, _shrink(g, grad, _pref(g, pb))))
    return out


def _vjp_sub(g, i, node, grad, needed):
    pa, pb = node.parents
    out = []
    if pa in needed:
        out.append((pa, _shrink(g, grad, _pref(g, pa))))
    if pb in needed:
        out.append((pb, g.scalar_mul(_shrink(g, grad, _pref(g, pb)), -1.0)))
    return out


def _vjp_mul(g, i, node, grad, needed):
    pa, pb = node.parents
    out = []
    if pa in needed:
        out.append((pa, g.mul(grad, _pref(g, pb))))
    if pb in needed:
        out.append((pb, g.mul(grad, _pref(g, pa))))
    return out


def _vjp_scalar_mul(g, i, node, grad, needed):
    px, ps = node.parents
    out = []
    if px in needed:
        out.append((px, g.scalar_mul(grad, _pref(g, ps))))
    if ps in needed:
        out.append((ps, g.sum(g.mul(grad, _pref(g, px)))))
    return out


def _vjp_matmul(g, i, node, grad, needed):
    pa, pb = node.parents
    out = []
    if pa in needed:
        out.append((pa, g.matmul(grad, g.transpose(_pref(g, pb)))))
    if pb in needed:
        out.append((pb, g.matmul(g.transpose(_pref(g, pa)), grad)))
    return out


def _vjp_concat_rows(g, i, node, grad, needed):
    pa, pb = node.parents
    ra = g._nodes[pa].value.shape[0]
    rb = g._nodes[pb].value.shape[0]
    out = []
    if pa in needed:
        out.append((pa, g.gather_rows(grad, np.arange(ra))))
    if pb in needed:
        out.append((pb, g.gather_rows(grad, np.arange(ra, ra + rb))))
    return out


def _vjp_relu(g, i, node, grad, needed):
    (pa,) = node.parents
    if pa not in needed:
        return []
    # The active-set mask is piecewise constant, so capturing it as a
    # constant keeps higher-order derivatives exact (they are zero).
    mask = g._own_const((g._nodes[pa].value > 0.0).astype(np.float64))
    return [(pa, g.mul(grad, mask))]


def _vjp_tanh(g, i, node, grad, needed):
    (pa,) = node.parents
    if pa not in needed:
        return []
    one = g._own_const(np.ones((1, 1)))
    return [(pa, g.mul(grad, g.sub(one, g.square(_pref(g, i)))))]


def _vjp_square(g, i, node, grad, needed):
    (pa,) = node.parents
    if pa not in needed:
        return []
    return [(pa, g.mul(grad, g.scalar_mul(_pref(g, pa), 2.0)))]


def _vjp_exp(g, i, node, grad, needed):
    (pa,) = node.parents
    if pa not in needed:
        return []
    return [(pa, g.mul(grad, _pref(g, i)))]


def _vjp_log(g, i, node, grad, needed):
    (pa,) = node.parents
    if pa not in needed:
        return []
    # 1/x written as exp(-log x); the log node is already in the graph.
    recip = g.exp(g.scalar_mul(_pref(g, i), -1.0))
    return [(pa, g.mul(grad, recip))]


def _vjp_sum(g, i, node, grad, needed):
    (pa,) = node.parents
    if pa not in needed:
        return []
    shape = g._nodes[pa].value.shape
    return [(pa, g.scalar_mul(g._own_const(np.ones(shape)), grad))]


def _vjp_mean(g, i, node, grad, needed):
    (pa,) = node.parents
    if pa not in needed:
        return []
    shape = g._nodes[pa].value.shape
    scaled = g.scalar_mul(grad, 1.0 / (shape[0] * shape[1]))
    return [(pa, g.scalar_mul(g._own_const(np.ones(shape)), scaled))]


def _vjp_softmax_cross_entropy(g, i, node, grad, needed):
    pz, py = node.parents
    if pz not in needed and py not in needed:
        return []
    z = _pref(g, pz)
    y = _pref(g, py)
    cols = z.shape[1]
    shifted = g.sub(z, g._own_const(np.repeat(node.aux, cols, axis=1)))
    expz = g.exp(shifted)
    rowsum = g.matmul(expz, g._own_const(np.ones((cols, 1))))
    tile = g._own_const(np.ones((1, cols)))
    grad_cols = g.matmul(grad, tile)
    out = []
    if pz in needed:
        inv = g.exp(g.scalar_mul(g.log(rowsum), -1.0))
        softmax = g.mul(expz, g.matmul(inv, tile))
        out.append((pz, g.mul(g.sub(softmax, y), grad_cols)))
    if py in needed:
        # d/dy of the per-row loss is -log softmax, written without log(0).
        neg_logsm = g.sub(g.matmul(g.log(rowsum), tile), shifted)
        out.append((py, g.mul(neg_logsm, grad_cols)))
    return out


def _vjp_transpose(g, i, node, grad, needed):
    (pa,) = node.parents
    if pa not in needed:
        return []
    return [(pa, g.transpose(grad))]


def _vjp_gather_rows(g, i, node, grad, needed):
    (pa,) = node.parents
    if pa not in needed:
        return []
    idx, order, rows = node.aux
    return [(pa, g.scatter_rows(grad, idx, rows, order=order))]


def _vjp_scatter_rows(g, i, node, grad, needed):
    (pa,) = node.parents
    if pa not in needed:
        return []
    idx, _, _ = node.aux
    return [(pa, g.gather_rows(grad, idx))]


_VJP_RULES = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "scalar_mul": _vjp_scalar_mul,
    "matmul": _vjp_matmul,
    "concat_rows": _vjp_concat_rows,
    "relu": _vjp_relu,
    "tanh": _vjp_tanh,
    "square": _vjp_square,
    "exp": _vjp_exp,
    "log": _vjp_log,
    "sum": _vjp_sum,
    "mean": _vjp_mean,
    "softmax_cross_entropy": _vjp_softmax_cross_entropy,
    "transpose": _vjp_transpose,
    "gather_rows": _vjp_gather_rows,
    "scatter_rows": _vjp_scatter_rows,
}

_PUBLIC_TABLE = {
    "add": (Graph.add, 2),
    "sub": (Graph.sub, 2),
    "mul_elementwise": (Graph.mul, 2),
    "scalar_mul": (Graph.scalar_mul, 2),
    "matmul": (Graph.matmul, 2),
    "concat_rows": (Graph.concat_rows, 2),
    "relu": (Graph.relu, 1),
    "tanh": (Graph.tanh, 1),
    "square": (Graph.square, 1),
    "exp": (Graph.exp, 1),
    "log": (Graph.log, 1),
    "sum": (Graph.sum, 1),
    "mean": (Graph.mean, 1),
    "softmax_cross_entropy": (Graph.softmax_cross_entropy, 2),
}


def concat_cols(g: Graph, parts: Sequence[NodeRef]) -> NodeRef:
    """Concatenate blocks left to right (all parts need equal row counts)."""
    if not parts:
        raise ShapeError("concat_cols: need at least one part")
    if len(parts) == 1:
        return parts[0]
    rows = parts[0].shape[0]
    for p in parts:
        if p.shape[0] != rows:
            raise ShapeError(
                f"concat_cols: row counts differ, {p.shape[0]} vs {rows}"
            )
    acc = g.transpose(parts[0])
    for p in parts[1:]:
        acc = g.concat_rows(acc, g.transpose(p))
    return g.transpose(acc)
