"""Computation-graph core: typed nodes, shape inference, reverse-mode autodiff.

A graph is a flat, append-only table of primitive nodes.  Node inputs
always refer to earlier ids, so graphs are acyclic by construction and
ascending id order is a valid topological order.  Every tensor is 64-bit
float; shapes are tuples of `Dim` (a semantic kind plus an extent).

Elementwise primitives broadcast extent-1 axes against any extent at the
same position (equal ranks required, no rank promotion).  Row reductions
collapse the trailing axis to extent 1.  A small set of structural
primitives (batched matmuls, sequence slice/pad, shape-directed sum)
exists so attention patterns and their adjoints can live in the same
node table; they are not part of the user-facing expression vocabulary.

`backward` extends a copy of the graph with adjoint nodes and freezes
the result.  Adjoint contributions at fan-out points are summed in
ascending consumer-id order so gradient floating point is reproducible.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum

from .errors import GraphError, ShapeError


class DimKind(Enum):
    BATCH = "batch"
    HEADS = "heads"
    SEQ_Q = "seq_q"
    SEQ_K = "seq_k"
    DIM_QK = "dim_qk"
    DIM_V = "dim_v"
    ONE = "one"


@dataclass(frozen=True, slots=True)
class Dim:
    kind: DimKind
    extent: int

    def __post_init__(self):
        if self.extent < 1:
            raise ShapeError("dim extent must be >= 1", kind=self.kind.value, extent=self.extent)
        if self.kind is DimKind.ONE and self.extent != 1:
            raise ShapeError("ONE dims have extent 1", extent=self.extent)

    def __repr__(self) -> str:
        return f"{self.kind.value}:{self.extent}"


ONE = Dim(DimKind.ONE, 1)

Shape = tuple[Dim, ...]


def extents(shape: Shape) -> tuple[int, ...]:
    return tuple(d.extent for d in shape)


def one_shape(rank: int) -> Shape:
    return (ONE,) * rank


class Prim(Enum):
    # elementwise vocabulary
    ADD = "Add"
    SUB = "Sub"
    MUL = "Mul"
    DIV = "Div"
    NEG = "Neg"
    EXP = "Exp"
    EXP2 = "Exp2"
    LOG = "Log"
    ABS = "Abs"
    TANH = "Tanh"
    SIGMOID = "Sigmoid"
    MAX = "Max"
    MIN = "Min"
    CLAMP = "Clamp"
    WHERE = "Where"
    CONST = "Const"
    BROADCAST = "Broadcast"
    # row reductions over the trailing axis
    REDUCE_SUM = "ReduceSum"
    REDUCE_MAX = "ReduceMax"
    REDUCE_ABSSUM = "ReduceAbssum"
    # comparisons: 0/1-valued, legal only as Where conditions
    CMP_EQ = "CmpEq"
    CMP_NE = "CmpNe"
    CMP_LT = "CmpLt"
    CMP_LE = "CmpLe"
    CMP_GT = "CmpGt"
    CMP_GE = "CmpGe"
    # structural ops for pattern assembly and adjoints
    MATMUL_NN = "MatmulNN"  # A @ B          contracts A[-1] with B[-2]
    MATMUL_NT = "MatmulNT"  # A @ B^T        contracts A[-1] with B[-1]
    MATMUL_TN = "MatmulTN"  # A^T @ B        contracts A[-2] with B[-2]
    SLICE_SEQ = "SliceSeq"  # pick one index on axis -2
    PAD_SEQ = "PadSeq"      # embed an extent-1 axis -2 into zeros
    SUM_TO = "SumTo"        # sum down to a broadcast-compatible shape
    FIRST_MAX_MASK = "FirstMaxMask"  # 1 at the first row maximum, else 0


ELEMENTWISE = frozenset({
    Prim.ADD, Prim.SUB, Prim.MUL, Prim.DIV, Prim.NEG, Prim.EXP, Prim.EXP2,
    Prim.LOG, Prim.ABS, Prim.TANH, Prim.SIGMOID, Prim.MAX, Prim.MIN,
    Prim.CLAMP, Prim.WHERE, Prim.CONST, Prim.BROADCAST,
})

ROWREDUCE = frozenset({Prim.REDUCE_SUM, Prim.REDUCE_MAX, Prim.REDUCE_ABSSUM})

COMPARE = frozenset({
    Prim.CMP_EQ, Prim.CMP_NE, Prim.CMP_LT, Prim.CMP_LE, Prim.CMP_GT, Prim.CMP_GE,
})

STRUCTURAL = frozenset({
    Prim.MATMUL_NN, Prim.MATMUL_NT, Prim.MATMUL_TN,
    Prim.SLICE_SEQ, Prim.PAD_SEQ, Prim.SUM_TO, Prim.FIRST_MAX_MASK,
})

MATMULS = frozenset({Prim.MATMUL_NN, Prim.MATMUL_NT, Prim.MATMUL_TN})


def category(op: Prim) -> str:
    """Classify a primitive; every member lands in exactly one bucket."""
    if op in ELEMENTWISE:
        return "elementwise"
    if op in ROWREDUCE:
        return "rowreduce"
    if op in COMPARE:
        return "compare"
    return "structural"


_ARITY = {
    Prim.CONST: 0,
    Prim.WHERE: 3,
    Prim.ADD: 2, Prim.SUB: 2, Prim.MUL: 2, Prim.DIV: 2,
    Prim.MAX: 2, Prim.MIN: 2,
    Prim.CMP_EQ: 2, Prim.CMP_NE: 2, Prim.CMP_LT: 2,
    Prim.CMP_LE: 2, Prim.CMP_GT: 2, Prim.CMP_GE: 2,
    Prim.MATMUL_NN: 2, Prim.MATMUL_NT: 2, Prim.MATMUL_TN: 2,
}
# everything else is unary


def arity(op: Prim) -> int:
    return _ARITY.get(op, 1)


@dataclass(frozen=True, slots=True)
class TensorAttr:
    shape: Shape
    role: str = "intermediate"  # placeholder | intermediate | output


@dataclass(slots=True)
class Node:
    id: int
    op: Prim
    inputs: tuple[int, ...]
    attr: TensorAttr
    params: tuple = ()
    grad: int | None = None

    @property
    def shape(self) -> Shape:
        return self.attr.shape


# ──────────────────────────── shape inference ────────────────────────────


def broadcast_join(shapes: list[Shape]) -> Shape:
    """Join equal-rank shapes; extent-1 axes stretch, anything else must agree."""
    ranks = {len(s) for s in shapes}
    if len(ranks) != 1:
        raise ShapeError("elementwise operands must have equal rank",
                         shapes=[extents(s) for s in shapes])
    out: list[Dim] = []
    for axis, dims in enumerate(zip(*shapes)):
        wide = [d for d in dims if d.extent != 1]
        if not wide:
            out.append(dims[0])
            continue
        lead = wide[0]
        for d in wide[1:]:
            if d.extent != lead.extent:
                raise ShapeError("extent mismatch on axis",
                                 axis=axis, shapes=[extents(s) for s in shapes])
        out.append(lead)
    return tuple(out)


def _matmul_shape(op: Prim, a: Shape, b: Shape) -> Shape:
    if len(a) != len(b) or len(a) < 2:
        raise ShapeError("matmul operands must share a rank of at least 2",
                         lhs=extents(a), rhs=extents(b))
    for axis, (da, db) in enumerate(zip(a[:-2], b[:-2])):
        if da.extent != db.extent:
            raise ShapeError("matmul leading dims must match",
                             axis=axis, lhs=extents(a), rhs=extents(b))
    if op is Prim.MATMUL_NN:
        ka, kb = a[-1], b[-2]
        rows, cols = a[-2], b[-1]
    elif op is Prim.MATMUL_NT:
        ka, kb = a[-1], b[-1]
        rows, cols = a[-2], b[-2]
    else:  # MATMUL_TN
        ka, kb = a[-2], b[-2]
        rows, cols = a[-1], b[-1]
    if ka.extent != kb.extent:
        raise ShapeError("matmul contraction extents differ",
                         op=op.value, lhs=extents(a), rhs=extents(b))
    return a[:-2] + (rows, cols)


def infer_shape(op: Prim, input_shapes: list[Shape], params: tuple) -> Shape:
    cat = category(op)
    if op is Prim.CONST:
        if len(params) != 2 or not isinstance(params[1], int):
            raise GraphError("Const params are (value, rank)")
        return one_shape(params[1])
    if op is Prim.BROADCAST:
        (src,) = input_shapes
        target = params[0]
        if len(target) != len(src):
            raise ShapeError("broadcast target rank differs", src=extents(src),
                             target=extents(target))
        for axis, (s, t) in enumerate(zip(src, target)):
            if s.extent not in (1, t.extent):
                raise ShapeError("broadcast source axis must be 1 or match target",
                                 axis=axis, src=extents(src), target=extents(target))
        return target
    if op is Prim.SUM_TO:
        (src,) = input_shapes
        target = params[0]
        if len(target) != len(src):
            raise ShapeError("sum target rank differs", src=extents(src),
                             target=extents(target))
        for axis, (s, t) in enumerate(zip(src, target)):
            if t.extent not in (1, s.extent):
                raise ShapeError("sum target axis must be 1 or match source",
                                 axis=axis, src=extents(src), target=extents(target))
        return target
    if op is Prim.CLAMP:
        lo, hi = params
        if not (lo <= hi):
            raise GraphError("clamp bounds are inverted", lo=lo, hi=hi)
        return input_shapes[0]
    if cat in ("elementwise", "compare"):
        return broadcast_join(input_shapes)
    if cat == "rowreduce":
        (src,) = input_shapes
        if len(src) < 1:
            raise ShapeError("row reduction needs rank >= 1")
        return src[:-1] + (ONE,)
    if op in MATMULS:
        return _matmul_shape(op, *input_shapes)
    if op is Prim.SLICE_SEQ:
        (src,) = input_shapes
        (index,) = params
        if len(src) < 2:
            raise ShapeError("slice needs rank >= 2")
        if not (0 <= index < src[-2].extent):
            raise GraphError("slice index out of range", index=index,
                             extent=src[-2].extent)
        return src[:-2] + (ONE, src[-1])
    if op is Prim.PAD_SEQ:
        (src,) = input_shapes
        index, extent, kind = params
        if len(src) < 2 or src[-2].extent != 1:
            raise ShapeError("pad source must have extent 1 on axis -2",
                             src=extents(src))
        if not (0 <= index < extent):
            raise GraphError("pad index out of range", index=index, extent=extent)
        return src[:-2] + (Dim(kind, extent), src[-1])
    if op is Prim.FIRST_MAX_MASK:
        return input_shapes[0]
    raise GraphError("unhandled primitive", op=op.value)


# ──────────────────────────────── graph ────────────────────────────────


class Graph:
    """Append-only node table with named placeholders and marked outputs."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.placeholders: dict[str, int] = {}
        self.outputs: list[int] = []
        self.frozen = False

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, nid: int) -> Node:
        return self.nodes[nid]

    def shape(self, nid: int) -> Shape:
        return self.nodes[nid].attr.shape

    def _append(self, op: Prim, inputs: tuple[int, ...], attr: TensorAttr,
                params: tuple) -> int:
        if self.frozen:
            raise GraphError("graph is frozen")
        nid = len(self.nodes)
        self.nodes.append(Node(nid, op, inputs, attr, params))
        return nid

    def placeholder(self, name: str, shape: Shape) -> int:
        """Add a named input node.  Names are unique per graph."""
        if name in self.placeholders:
            raise GraphError("duplicate placeholder", name=name)
        nid = self._append(Prim.CONST, (), TensorAttr(tuple(shape), "placeholder"),
                           (0.0, len(shape)))
        # Placeholders reuse the Const kind but are fed externally; the
        # params value is never read for them.
        self.placeholders[name] = nid
        return nid

    def const(self, value: float, rank: int = 4) -> int:
        return self._append(Prim.CONST, (), TensorAttr(one_shape(rank)),
                            (float(value), rank))

    def add(self, op: Prim, *inputs: int, params: tuple = ()) -> int:
        """Append a node, inferring and checking its shape."""
        if op is Prim.CONST:
            raise GraphError("use const()/placeholder() for Const nodes")
        if len(inputs) != arity(op):
            raise GraphError("wrong operand count", op=op.value,
                             got=len(inputs), want=arity(op))
        for i in inputs:
            if not (0 <= i < len(self.nodes)):
                raise GraphError("input id out of range", input=i)
        shapes = [self.nodes[i].attr.shape for i in inputs]
        out = infer_shape(op, shapes, params)
        return self._append(op, tuple(inputs), TensorAttr(out), params)

    def mark_output(self, nid: int) -> None:
        if self.frozen:
            raise GraphError("graph is frozen")
        node = self.nodes[nid]
        self.nodes[nid] = Node(node.id, node.op, node.inputs,
                               TensorAttr(node.attr.shape, "output"),
                               node.params, node.grad)
        self.outputs.append(nid)

    def placeholder_name(self, nid: int) -> str | None:
        for name, pid in self.placeholders.items():
            if pid == nid:
                return name
        return None

    def copy(self) -> "Graph":
        g = Graph()
        g.nodes = [Node(n.id, n.op, n.inputs, n.attr, n.params, n.grad)
                   for n in self.nodes]
        g.placeholders = dict(self.placeholders)
        g.outputs = list(self.outputs)
        return g


# ─────────────────────────── order and liveness ───────────────────────────


def topo_sort(graph: Graph) -> list[int]:
    """Topological order with ties broken by ascending node id.

    Graphs are acyclic by construction (inputs precede their node), so
    this always succeeds; with the ascending-id tie break the result is
    the same no matter how independent nodes interleave.
    """
    n = len(graph.nodes)
    indegree = [0] * n
    consumers: list[list[int]] = [[] for _ in range(n)]
    for node in graph.nodes:
        indegree[node.id] = len(node.inputs)
        for i in node.inputs:
            consumers[i].append(node.id)
    ready = [i for i in range(n) if indegree[i] == 0]
    heapq.heapify(ready)
    order: list[int] = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for c in consumers[nid]:
            indegree[c] -= 1
            if indegree[c] == 0:
                heapq.heappush(ready, c)
    if len(order) != n:
        raise GraphError("cycle detected")  # unreachable for appended graphs
    return order


def use_def(graph: Graph, order: list[int]) -> dict[int, int]:
    """Last-use position per node: the largest order position of any
    consumer, or the node's own position if nothing consumes it.

    `order` may cover a subset of the graph; nodes outside it are
    ignored as consumers.
    """
    pos = {nid: p for p, nid in enumerate(order)}
    last = dict(pos)
    for node in graph.nodes:
        p = pos.get(node.id)
        if p is None:
            continue
        for i in node.inputs:
            if p > last[i]:
                last[i] = p
    return last


# ────────────────────────────── autodiff ──────────────────────────────


def _sum_to_fit(g: Graph, adj: int, target: Shape) -> int:
    if g.shape(adj) == target:
        return adj
    return g.add(Prim.SUM_TO, adj, params=(target,))


def _sign_of(g: Graph, x: int) -> int:
    zero = g.const(0.0, rank=len(g.shape(x)))
    one = g.const(1.0, rank=len(g.shape(x)))
    neg_one = g.const(-1.0, rank=len(g.shape(x)))
    ge = g.add(Prim.CMP_GE, x, zero)
    return g.add(Prim.WHERE, ge, one, neg_one)


def backward(graph: Graph, output: int | None = None,
             wrt: list[int] | None = None) -> tuple[Graph, dict[int, int]]:
    """Extend a copy of `graph` with adjoint nodes for one output.

    The adjoint is seeded with ones of the output shape, i.e. gradients
    are of loss = sum(output).  Returns the extended (frozen) graph and
    a map from requested node id to its gradient node id.  Nodes with no
    path to the output (masks, conditions, constants) get a zero
    gradient rather than an error.
    """
    if output is None:
        if not graph.outputs:
            raise GraphError("graph has no outputs")
        output = graph.outputs[0]
    wrt = list(wrt) if wrt is not None else []

    g = graph.copy()
    order = topo_sort(g)
    forward_len = len(g.nodes)

    out_shape = g.shape(output)
    seed = g.const(1.0, rank=len(out_shape))
    seed = g.add(Prim.BROADCAST, seed, params=(out_shape,))

    # target node id -> [(consumer id, adjoint node id)]
    pending: dict[int, list[tuple[int, int]]] = {output: [(-1, seed)]}

    def push(target: int, consumer: int, adj: int) -> None:
        pending.setdefault(target, []).append((consumer, adj))

    for nid in reversed(order):
        if nid >= forward_len or nid not in pending:
            continue
        entries = sorted(pending[nid], key=lambda e: e[0])
        total = entries[0][1]
        for _, adj in entries[1:]:
            total = g.add(Prim.ADD, total, adj)
        node = g.nodes[nid]
        node.grad = total
        gb = total
        op = node.op
        ins = node.inputs

        if op is Prim.CONST or op in COMPARE or op is Prim.FIRST_MAX_MASK:
            continue
        elif op is Prim.ADD:
            for i in ins:
                push(i, nid, _sum_to_fit(g, gb, g.shape(i)))
        elif op is Prim.SUB:
            push(ins[0], nid, _sum_to_fit(g, gb, g.shape(ins[0])))
            push(ins[1], nid, _sum_to_fit(g, g.add(Prim.NEG, gb), g.shape(ins[1])))
        elif op is Prim.MUL:
            a, b = ins
            push(a, nid, _sum_to_fit(g, g.add(Prim.MUL, gb, b), g.shape(a)))
            push(b, nid, _sum_to_fit(g, g.add(Prim.MUL, gb, a), g.shape(b)))
        elif op is Prim.DIV:
            a, b = ins
            da = g.add(Prim.DIV, gb, b)
            # d/db (a/b) = -(a/b)/b; reuse the forward quotient node
            db = g.add(Prim.NEG, g.add(Prim.DIV, g.add(Prim.MUL, gb, nid), b))
            push(a, nid, _sum_to_fit(g, da, g.shape(a)))
            push(b, nid, _sum_to_fit(g, db, g.shape(b)))
        elif op is Prim.NEG:
            push(ins[0], nid, g.add(Prim.NEG, gb))
        elif op is Prim.EXP:
            push(ins[0], nid, g.add(Prim.MUL, gb, nid))
        elif op is Prim.EXP2:
            ln2 = g.const(0.6931471805599453, rank=len(g.shape(nid)))
            push(ins[0], nid, g.add(Prim.MUL, g.add(Prim.MUL, gb, nid), ln2))
        elif op is Prim.LOG:
            push(ins[0], nid, g.add(Prim.DIV, gb, ins[0]))
        elif op is Prim.ABS:
            push(ins[0], nid, g.add(Prim.MUL, gb, _sign_of(g, ins[0])))
        elif op is Prim.TANH:
            one = g.const(1.0, rank=len(g.shape(nid)))
            t2 = g.add(Prim.MUL, nid, nid)
            push(ins[0], nid, g.add(Prim.MUL, gb, g.add(Prim.SUB, one, t2)))
        elif op is Prim.SIGMOID:
            one = g.const(1.0, rank=len(g.shape(nid)))
            push(ins[0], nid, g.add(
                Prim.MUL, gb, g.add(Prim.MUL, nid, g.add(Prim.SUB, one, nid))))
        elif op in (Prim.MAX, Prim.MIN):
            a, b = ins
            # Ties route to the first operand.
            if op is Prim.MAX:
                ma = g.add(Prim.CMP_GE, a, b)
                mb = g.add(Prim.CMP_LT, a, b)
            else:
                ma = g.add(Prim.CMP_LE, a, b)
                mb = g.add(Prim.CMP_GT, a, b)
            push(a, nid, _sum_to_fit(g, g.add(Prim.MUL, gb, ma), g.shape(a)))
            push(b, nid, _sum_to_fit(g, g.add(Prim.MUL, gb, mb), g.shape(b)))
        elif op is Prim.CLAMP:
            lo, hi = node.params
            x = ins[0]
            rank = len(g.shape(x))
            inside = g.add(Prim.MUL,
                           g.add(Prim.CMP_GE, x, g.const(lo, rank)),
                           g.add(Prim.CMP_LE, x, g.const(hi, rank)))
            push(x, nid, g.add(Prim.MUL, gb, inside))
        elif op is Prim.WHERE:
            c, a, b = ins
            one = g.const(1.0, rank=len(g.shape(nid)))
            cb = g.add(Prim.BROADCAST, c, params=(g.shape(nid),)) \
                if g.shape(c) != g.shape(nid) else c
            push(a, nid, _sum_to_fit(g, g.add(Prim.MUL, gb, cb), g.shape(a)))
            push(b, nid, _sum_to_fit(
                g, g.add(Prim.MUL, gb, g.add(Prim.SUB, one, cb)), g.shape(b)))
        elif op is Prim.BROADCAST:
            push(ins[0], nid, g.add(Prim.SUM_TO, gb, params=(g.shape(ins[0]),)))
        elif op is Prim.SUM_TO:
            push(ins[0], nid, g.add(Prim.BROADCAST, gb, params=(g.shape(ins[0]),)))
        elif op is Prim.REDUCE_SUM:
            push(ins[0], nid, g.add(Prim.BROADCAST, gb, params=(g.shape(ins[0]),)))
        elif op is Prim.REDUCE_MAX:
            x = ins[0]
            gbx = g.add(Prim.BROADCAST, gb, params=(g.shape(x),))
            push(x, nid, g.add(Prim.MUL, gbx, g.add(Prim.FIRST_MAX_MASK, x)))
        elif op is Prim.REDUCE_ABSSUM:
            x = ins[0]
            gbx = g.add(Prim.BROADCAST, gb, params=(g.shape(x),))
            push(x, nid, g.add(Prim.MUL, gbx, _sign_of(g, x)))
        elif op is Prim.MATMUL_NN:
            a, b = ins
            push(a, nid, g.add(Prim.MATMUL_NT, gb, b))
            push(b, nid, g.add(Prim.MATMUL_TN, a, gb))
        elif op is Prim.MATMUL_NT:
            a, b = ins
            push(a, nid, g.add(Prim.MATMUL_NN, gb, b))
            push(b, nid, g.add(Prim.MATMUL_TN, gb, a))
        elif op is Prim.MATMUL_TN:
            a, b = ins
            push(a, nid, g.add(Prim.MATMUL_NT, b, gb))
            push(b, nid, g.add(Prim.MATMUL_NN, a, gb))
        elif op is Prim.SLICE_SEQ:
            x = ins[0]
            (index,) = node.params
            src = g.shape(x)
            push(x, nid, g.add(Prim.PAD_SEQ, gb,
                               params=(index, src[-2].extent, src[-2].kind)))
        elif op is Prim.PAD_SEQ:
            x = ins[0]
            index = node.params[0]
            push(x, nid, g.add(Prim.SLICE_SEQ, gb, params=(index,)))
        else:  # pragma: no cover - enum is closed
            raise GraphError("no adjoint rule", op=op.value)

    grads: dict[int, int] = {}
    for nid in wrt:
        node = g.nodes[nid]
        if node.grad is None:
            zero = g.const(0.0, rank=len(node.attr.shape))
            node.grad = g.add(Prim.BROADCAST, zero, params=(node.attr.shape,))
        grads[nid] = node.grad
    g.frozen = True
    return g, grads
