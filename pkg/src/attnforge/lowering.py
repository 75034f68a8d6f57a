"""Two-stage lowering: graphs to linear statement sequences, then
statement sequences to portable kernel text or to a bindable executor.

Stage one (`expression_generation`) walks a computation graph in
topological order and emits one statement per node, allocating scratch
slots first-fit over expired live ranges.  Stage two (`code_generation`)
renders the assembled template as deterministic text in the kernel
dialect documented in docs/kernel-dialect.md; `bind_executable` instead
interprets the same statements tile-by-tile with the engine's numeric
helpers, which is what makes every emitted kernel testable against the
dense oracles without hardware.

Templates: ParallelOnline wraps the score/normalize/accumulate dataflow
in a query-block grid with a key-block loop; RecurrentChunked wraps the
chunked recurrence with a carried state buffer and a per-chunk decay
table.  The decay table (running products of the per-step scale) is
template plumbing rendered by fixed text, not a statement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import exprlang
from .attention import (AttentionSpec, DirectRowNorm, OnlineRowNorm,
                        Pattern, diagonal_scale)
from .engine import (_block_view, _blocks, mm_nn, mm_nt, mm_tn, row_abssum,
                     row_max, row_sum, _check_output, _sigmoid)
from .errors import GraphError, InputError, UnsupportedError
from .graph import Dim, DimKind, Graph, Prim, Shape, topo_sort, use_def
from .scheduling import (Candidate, DeviceConfig, ExecutionPlan,
                         IntermediateTensor, MemoryLocation, SchedulingTask,
                         TileShape)


class TemplateKind(Enum):
    PARALLEL_ONLINE = "parallel_online"
    RECURRENT_CHUNKED = "recurrent_chunked"


# ─────────────────────────────── statements ───────────────────────────────


@dataclass(frozen=True, slots=True)
class Declare:
    slot: str
    extents: tuple
    pinned: bool


@dataclass(frozen=True, slots=True)
class CopyIn:
    tensor: str
    slot: str


@dataclass(frozen=True, slots=True)
class Compute:
    slot: str
    op: str
    operands: tuple
    params: tuple = ()


@dataclass(frozen=True, slots=True)
class RowReduce:
    slot: str
    kind: str  # sum | max | abssum
    operand: str


@dataclass(frozen=True, slots=True)
class Rescale:
    acc: str
    factor: str


@dataclass(frozen=True, slots=True)
class CopyOut:
    slot: str
    tensor: str


Stmt = Declare | CopyIn | Compute | RowReduce | Rescale | CopyOut


@dataclass
class SlotInfo:
    extents: tuple
    pinned: bool
    # half-open [start, end) statement-index ranges, one per reuse
    intervals: list = field(default_factory=list)


@dataclass
class ExprSeq:
    """A linear statement sequence plus its slot table."""

    stmts: list = field(default_factory=list)
    slots: dict = field(default_factory=dict)
    _fresh: int = 0

    # -- building ------------------------------------------------------
    def declare(self, name: str, extents: tuple, pinned: bool) -> str:
        if name in self.slots:
            raise GraphError("slot declared twice", slot=name)
        self.slots[name] = SlotInfo(tuple(extents), pinned)
        self.stmts.append(Declare(name, tuple(extents), pinned))
        return name

    def fresh(self, extents: tuple) -> str:
        name = f"t{self._fresh}"
        self._fresh += 1
        return self.declare(name, extents, pinned=False)

    def external(self, name: str) -> None:
        """Register a buffer that lives in another section of the same
        kernel so statements here may reference it without a Declare."""
        if name not in self.slots:
            self.slots[name] = SlotInfo((), pinned=True)

    def touch(self, name: str, write: bool) -> None:
        info = self.slots.get(name)
        if info is None:
            # cross-section buffer (acc, state, loaded tiles, ...)
            self.external(name)
            info = self.slots[name]
        pos = len(self.stmts)
        if write and not info.pinned:
            # scratch slots are single-assignment per reuse
            info.intervals.append([pos, pos + 1])
        elif not info.intervals:
            info.intervals.append([pos, pos + 1])
        else:
            info.intervals[-1][1] = pos + 1

    def emit(self, stmt: Stmt) -> None:
        reads: tuple
        writes: tuple
        if isinstance(stmt, CopyIn):
            reads, writes = (), (stmt.slot,)
        elif isinstance(stmt, Compute):
            reads, writes = stmt.operands, (stmt.slot,)
        elif isinstance(stmt, RowReduce):
            reads, writes = (stmt.operand,), (stmt.slot,)
        elif isinstance(stmt, Rescale):
            reads, writes = (stmt.factor, stmt.acc), (stmt.acc,)
        elif isinstance(stmt, CopyOut):
            reads, writes = (stmt.slot,), ()
        else:
            raise GraphError("cannot emit statement", stmt=type(stmt).__name__)
        for r in reads:
            self.touch(r, write=False)
        for w in writes:
            self.touch(w, write=True)
        self.stmts.append(stmt)

    # -- checking ------------------------------------------------------
    def check_slot_safety(self) -> None:
        """Scratch slots must have pairwise disjoint live intervals."""
        for name, info in self.slots.items():
            if info.pinned:
                continue
            spans = sorted((s, e) for s, e in info.intervals if e is not None)
            for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
                if s2 < e1:
                    raise GraphError("overlapping live ranges", slot=name,
                                     first=(s1, e1), second=(s2, e2))

    def compute_order(self) -> list:
        return [s for s in self.stmts if isinstance(s, (Compute, RowReduce))]


_REDUCE_KIND = {Prim.REDUCE_SUM: "sum", Prim.REDUCE_MAX: "max",
                Prim.REDUCE_ABSSUM: "abssum"}


def expression_generation(graph: Graph, bound: dict | None = None,
                          pin: dict | None = None,
                          copy_out: dict | None = None,
                          protect: set | None = None,
                          seq: ExprSeq | None = None) -> tuple[ExprSeq, dict]:
    """One statement per graph node in topological order.

    bound: node id -> pre-existing buffer name (no CopyIn emitted).
    pin: node id -> buffer name its result must land in.
    copy_out: node id -> global tensor name (CopyOut appended).
    protect: node ids whose slots must survive the whole sequence, for
    callers that append statements reading them afterwards.
    Unpinned intermediate results take scratch slots reused first-fit
    once the previous holder's last use has passed.

    Returns the sequence and the node-to-slot assignment.
    """
    bound = bound or {}
    pin = pin or {}
    copy_out = copy_out or {}
    protect = protect or set()
    seq = seq if seq is not None else ExprSeq()
    order = topo_sort(graph)
    # drop nodes with no path to an output, a pinned slot, or a copy-out;
    # placeholders stay so every declared input is loaded exactly once
    live = set(graph.outputs) | set(pin) | set(copy_out)
    stack = list(live)
    while stack:
        nid = stack.pop()
        for src in graph.nodes[nid].inputs:
            if src not in live:
                live.add(src)
                stack.append(src)
    live.update(graph.placeholders.values())
    order = [nid for nid in order if nid in live]
    last = use_def(graph, order)
    slot_of: dict[int, str] = {}
    free: list[tuple[tuple, str]] = []
    held: list[tuple[int, str]] = []  # (expiry order-pos, scratch slot)
    names = {nid: nm for nm, nid in graph.placeholders.items()}

    def alloc(nid: int) -> str:
        extents = tuple(d.extent for d in graph.nodes[nid].shape)
        if nid in pin:
            name = pin[nid]
            if name not in seq.slots:
                seq.declare(name, extents, pinned=True)
            return name
        for i, (ext, nm) in enumerate(free):
            if ext == extents:
                free.pop(i)
                return nm
        return seq.fresh(extents)

    for pos, nid in enumerate(order):
        # release scratch slots whose holder is fully consumed
        still = []
        for expiry, nm in held:
            if expiry < pos:
                free.append((seq.slots[nm].extents, nm))
            else:
                still.append((expiry, nm))
        held[:] = still

        node = graph.nodes[nid]
        if nid in bound:
            slot_of[nid] = bound[nid]
            continue
        if nid in names:
            slot = alloc(nid)
            seq.emit(CopyIn(names[nid], slot))
        elif node.op in _REDUCE_KIND:
            slot = alloc(nid)
            seq.emit(RowReduce(slot, _REDUCE_KIND[node.op],
                               slot_of[node.inputs[0]]))
        else:
            slot = alloc(nid)
            seq.emit(Compute(slot, node.op.name.lower(),
                             tuple(slot_of[i] for i in node.inputs),
                             tuple(node.params)))
        slot_of[nid] = slot
        if nid not in pin and nid not in protect:
            held.append((last[nid], slot))
        if nid in copy_out:
            seq.emit(CopyOut(slot, copy_out[nid]))
    return seq, slot_of


# ─────────────────────────── buffer census ───────────────────────────

ONE = Dim(DimKind.ONE, 1)


@dataclass(frozen=True)
class BufferSpec:
    """One named per-tile buffer: its tile shape as a function of the
    tile config, and how often a block reloads it."""

    name: str
    shape_fn: object  # Callable[[TileShape], Shape]
    visit_class: str  # per_query | per_key | per_chunk


def _tilify(shape: Shape, tile: TileShape) -> Shape:
    out = []
    for d in shape:
        if d.kind is DimKind.BATCH or d.kind is DimKind.HEADS:
            out.append(ONE)
        elif d.kind is DimKind.SEQ_Q and d.extent > 1:
            out.append(Dim(DimKind.SEQ_Q, tile.m))
        elif d.kind is DimKind.SEQ_K and d.extent > 1:
            out.append(Dim(DimKind.SEQ_K, tile.n))
        else:
            out.append(d)
    return tuple(out)


def kernel_buffers(spec: AttentionSpec) -> list[BufferSpec]:
    """The pinned per-tile buffers of the variant's template, in
    declaration order.  Scheduling metas and kernel assembly both read
    this census so plans and kernels always name the same tensors."""
    dims = spec.dims
    descs = {d.name: d for d in spec.input_descriptors()}
    out: list[BufferSpec] = []

    def add(name, fn, visit):
        out.append(BufferSpec(name, fn, visit))

    if spec.pattern is Pattern.PARALLEL:
        add("q_tile", lambda t: _tilify(descs["q"].resolve_shape(dims), t),
            "per_query")
        add("k_tile", lambda t: _tilify(descs["k"].resolve_shape(dims), t),
            "per_key")
        add("v_tile", lambda t: _tilify(descs["v"].resolve_shape(dims), t),
            "per_key")
        for e in spec.input_descriptors():
            if e.name in ("q", "k", "v"):
                continue
            shape = e.resolve_shape(dims)
            keyed = any(d.kind is DimKind.SEQ_K and d.extent > 1
                        for d in shape)
            add(f"{e.name}_tile",
                lambda t, shape=shape: _tilify(shape, t),
                "per_key" if keyed else "per_query")
        add("scores", lambda t: (ONE, ONE, Dim(DimKind.SEQ_Q, t.m),
                                 Dim(DimKind.SEQ_K, t.n)), "per_key")
        if isinstance(spec.rownorm, OnlineRowNorm):
            for rs in spec.rownorm.rowscales:
                add(rs, lambda t: (ONE, ONE, Dim(DimKind.SEQ_Q, t.m), ONE),
                    "per_query")
        add("acc", lambda t: (ONE, ONE, Dim(DimKind.SEQ_Q, t.m),
                              Dim(DimKind.DIM_V, dims.d_v)), "per_query")
        add("out_tile", lambda t: (ONE, ONE, Dim(DimKind.SEQ_Q, t.m),
                                   Dim(DimKind.DIM_V, dims.d_v)), "per_query")
    else:
        add("q_tile", lambda t: _tilify(descs["q"].resolve_shape(dims), t),
            "per_chunk")
        add("k_tile", lambda t: _tilify(descs["k"].resolve_shape(dims), t),
            "per_chunk")
        add("v_tile", lambda t: _tilify(descs["v"].resolve_shape(dims), t),
            "per_chunk")
        for e in spec.extra_inputs:
            add(f"{e.name}_tile",
                lambda t, e=e: _tilify(e.resolve_shape(dims), t), "per_chunk")
        add("scale", lambda t: (ONE, ONE, Dim(DimKind.SEQ_K, t.m), ONE),
            "per_chunk")
        add("dmat", lambda t: (ONE, ONE, Dim(DimKind.SEQ_Q, t.m),
                               Dim(DimKind.SEQ_K, t.m)), "per_chunk")
        add("cp", lambda t: (ONE, ONE, Dim(DimKind.SEQ_Q, t.m), ONE),
            "per_chunk")
        add("wvec", lambda t: (ONE, ONE, Dim(DimKind.SEQ_K, t.m), ONE),
            "per_chunk")
        add("cp_last", lambda t: (ONE, ONE, ONE, ONE), "per_chunk")
        add("state", lambda t: (ONE, ONE, Dim(DimKind.DIM_QK, dims.d_qk),
                                Dim(DimKind.DIM_V, dims.d_v)), "per_chunk")
        add("out_tile", lambda t: (ONE, ONE, Dim(DimKind.SEQ_Q, t.m),
                                   Dim(DimKind.DIM_V, dims.d_v)), "per_chunk")
    return out


def make_scheduling_task(spec: AttentionSpec,
                         measure=None) -> SchedulingTask:
    """Tensor metas, visit counts, and a flop estimate for the search.

    Tile bytes are per threadblock; visit counts scale with the grid
    (batch x heads x blocks), so the traffic terms see total data moved.
    Transient expression temporaries live in registers and are not
    scheduled.
    """
    dims = spec.dims
    bh = dims.batch * dims.heads
    recurrent = spec.pattern is Pattern.RECURRENT

    def visits_for(cls):
        def visits(tile: TileShape) -> int:
            if recurrent:
                return bh * math.ceil(dims.seq_q / tile.m)
            n_q = math.ceil(dims.seq_q / tile.m)
            n_k = math.ceil(dims.seq_k / tile.n)
            return bh * (n_q if cls == "per_query" else n_q * n_k)
        return visits

    tensors = []
    for buf in kernel_buffers(spec):
        def nbytes(tile: TileShape, fn=buf.shape_fn) -> int:
            ext = tuple(d.extent for d in fn(tile))
            prod = 1
            for e in ext:
                prod *= e
            return prod * 8
        tensors.append(IntermediateTensor(buf.name, nbytes,
                                          visits_for(buf.visit_class)))

    if recurrent:
        def flops(tile: TileShape) -> float:
            return float(bh * dims.seq_q
                         * (2 * tile.m * (dims.d_qk + dims.d_v)
                            + 4 * dims.d_qk * dims.d_v))
    else:
        def flops(tile: TileShape) -> float:
            return float(2 * bh * dims.seq_q * dims.seq_k
                         * (dims.d_qk + dims.d_v))

    direct_only = isinstance(spec.rownorm, DirectRowNorm)
    return SchedulingTask(name=spec.name, tensors=tensors, seq_q=dims.seq_q,
                          seq_k=dims.seq_k, square=recurrent, flops=flops,
                          measure=measure, full_n=direct_only)


# ─────────────────────────── template assembly ───────────────────────────


@dataclass
class KernelIR:
    kind: TemplateKind
    spec: AttentionSpec
    tile: TileShape
    prologue: list  # [(section name, ExprSeq)]
    body: list
    epilogue: list
    buffers: list  # [(name, extents tuple)]
    buffer_shapes: dict = field(default_factory=dict)  # name -> Shape
    has_decay_table: bool = False

    def all_sections(self):
        return list(self.prologue) + list(self.body) + list(self.epilogue)


def _section_graph(spec: AttentionSpec):
    g = Graph()
    consts = {name: g.const(v) for name, v in spec.dims.const_env().items()}
    return g, consts


def _tile_ph(g: Graph, spec: AttentionSpec, name: str, tile: TileShape,
             descs) -> int:
    return g.placeholder(name, _tilify(descs[name].resolve_shape(spec.dims),
                                       tile))


def _load_section(spec, tile, descs, tensor: str, buffer: str,
                  fn) -> tuple[str, ExprSeq]:
    g, consts = _section_graph(spec)
    ph = _tile_ph(g, spec, tensor, tile, descs)
    bound = {}
    env = {tensor: ph, **consts}
    if fn is not None:
        for extra in sorted(fn.free_names() - {tensor} - set(consts)):
            env[extra] = _tile_ph(g, spec, extra, tile, descs)
        out = fn.lower_into(g, env)
    else:
        out = ph
    g.mark_output(out)
    seq, _ = expression_generation(g, bound=bound, pin={out: buffer})
    return f"load_{tensor}", seq


def assemble_kernel(spec: AttentionSpec, tile: TileShape) -> KernelIR:
    """Build the full statement-level kernel for one tile config."""
    spec.validate()
    if spec.pattern is Pattern.PARALLEL:
        ir = _assemble_parallel(spec, tile)
    else:
        ir = _assemble_recurrent(spec, tile)
    for _, seq in ir.all_sections():
        seq.check_slot_safety()
    return ir


def _assemble_parallel(spec: AttentionSpec, tile: TileShape) -> KernelIR:
    dims = spec.dims
    descs = {d.name: d for d in spec.input_descriptors()}
    rn = spec.rownorm
    online = rn if isinstance(rn, OnlineRowNorm) else None
    direct = rn if isinstance(rn, DirectRowNorm) else None
    if direct is not None and tile.n < dims.seq_k:
        raise UnsupportedError(
            "normalization without an online form needs whole key rows; "
            "use a tile with n >= seq_k or declare an online form",
            tile_n=tile.n, seq_k=dims.seq_k)
    extras = [n for n in descs if n not in ("q", "k", "v")]

    prologue: list = []
    body: list = []
    epilogue: list = []

    prologue.append(_load_section(spec, tile, descs, "q", "q_tile",
                                  spec.q_mod))

    # rowscale and accumulator initialization
    g, consts = _section_graph(spec)
    pin = {}
    if online:
        for name, fn in online.prologue:
            nid = fn.lower_into(g, dict(consts))
            g.mark_output(nid)
            pin[nid] = name
    zero = g.const(0.0)
    g.mark_output(zero)
    pin[zero] = "acc"
    seq, _ = expression_generation(g, pin=pin)
    prologue.append(("prologue", seq))

    body.append(_load_section(spec, tile, descs, "k", "k_tile", spec.k_mod))
    body.append(_load_section(spec, tile, descs, "v", "v_tile", spec.v_mod))

    # scores: relevance matmul plus modification chain
    g, consts = _section_graph(spec)
    qt = g.placeholder("q_tile", (ONE, ONE, Dim(DimKind.SEQ_Q, tile.m),
                                  Dim(DimKind.DIM_QK, dims.d_qk)))
    kt = g.placeholder("k_tile", (ONE, ONE, Dim(DimKind.SEQ_K, tile.n),
                                  Dim(DimKind.DIM_QK, dims.d_qk)))
    bound = {qt: "q_tile", kt: "k_tile"}
    s = g.add(Prim.MATMUL_NT, qt, kt)
    env = dict(consts)
    for name in extras:
        ph = _tile_ph(g, spec, name, tile, descs)
        env[name] = ph
    for m in spec.score_mods:
        env["s"] = s
        s = m.lower_into(g, env)
    g.mark_output(s)
    pin = {}
    for name in extras:
        node = g.placeholders.get(name)
        if node is not None:
            pin[node] = f"{name}_tile"
    pin[s] = "scores"
    seq, _ = expression_generation(g, bound=bound, pin=pin)
    body.append(("scores", seq))

    # fwd: online protocol, rescale, accumulate
    g, consts = _section_graph(spec)
    sph = g.placeholder("scores", (ONE, ONE, Dim(DimKind.SEQ_Q, tile.m),
                                   Dim(DimKind.SEQ_K, tile.n)))
    bound = {sph: "scores"}
    fenv: dict[str, int] = {**consts, "s": sph}
    seq = ExprSeq()
    if online:
        for name in online.rowscales:
            ph = g.placeholder(name, (ONE, ONE, Dim(DimKind.SEQ_Q, tile.m),
                                      ONE))
            bound[ph] = name
            fenv[name] = ph
        for name, fn in online.fwd:
            fenv[name] = fn.lower_into(g, fenv)
        p_node, r_node = fenv["scores"], fenv["rescale"]
        keep = {p_node, r_node} | {fenv[name] for name in online.rowscales}
        for nid in keep:
            g.mark_output(nid)
        seq, slot_of = expression_generation(g, bound=bound, protect=keep)
        seq.emit(Rescale("acc", slot_of[r_node]))
        tpv = seq.fresh((1, 1, tile.m, dims.d_v))
        seq.emit(Compute(tpv, "matmul_nn", (slot_of[p_node], "v_tile")))
        seq.emit(Compute("acc", "add", ("acc", tpv)))
        for name in online.rowscales:
            src = slot_of[fenv[name]]
            if src != name:
                seq.emit(Compute(name, "copy", (src,)))
    elif direct is not None:
        out = direct.body.lower_into(g, {**consts, "s": sph})
        g.mark_output(out)
        seq, slot_of = expression_generation(g, bound=bound, protect={out})
        tpv = seq.fresh((1, 1, tile.m, dims.d_v))
        seq.emit(Compute(tpv, "matmul_nn", (slot_of[out], "v_tile")))
        seq.emit(Compute("acc", "add", ("acc", tpv)))
    else:
        tpv = seq.fresh((1, 1, tile.m, dims.d_v))
        seq.emit(Compute(tpv, "matmul_nn", ("scores", "v_tile")))
        seq.emit(Compute("acc", "add", ("acc", tpv)))
    body.append(("fwd", seq))

    # epilogue: final normalization, output modification, writeback
    g, consts = _section_graph(spec)
    acc = g.placeholder("acc", (ONE, ONE, Dim(DimKind.SEQ_Q, tile.m),
                                Dim(DimKind.DIM_V, dims.d_v)))
    bound = {acc: "acc"}
    out = acc
    if online:
        env = {**consts, "acc": acc}
        for name in online.rowscales:
            ph = g.placeholder(name, (ONE, ONE, Dim(DimKind.SEQ_Q, tile.m),
                                      ONE))
            bound[ph] = name
            env[name] = ph
        out = online.epilogue.lower_into(g, env)
    if spec.output_mod:
        env = {**consts, "o": out}
        for extra in sorted(spec.output_mod.free_names() - {"o"}
                            - set(consts)):
            shape = descs[extra].resolve_shape(dims)
            if any(d.kind is DimKind.SEQ_K and d.extent > 1 for d in shape):
                raise UnsupportedError(
                    "output modification may not read key-indexed extras",
                    extra=extra)
            env[extra] = _tile_ph(g, spec, extra, tile, descs)
        out = spec.output_mod.lower_into(g, env)
    g.mark_output(out)
    if out == acc:
        seq = ExprSeq()
        seq.declare("out_tile", (1, 1, tile.m, dims.d_v), pinned=True)
        seq.emit(Compute("out_tile", "copy", ("acc",)))
        seq.emit(CopyOut("out_tile", "out"))
    else:
        seq, _ = expression_generation(g, bound=bound, pin={out: "out_tile"},
                                       copy_out={out: "out"})
    epilogue.append(("epilogue", seq))

    shapes = {b.name: b.shape_fn(tile) for b in kernel_buffers(spec)}
    buffers = [(name, tuple(d.extent for d in shape))
               for name, shape in shapes.items()]
    return KernelIR(TemplateKind.PARALLEL_ONLINE, spec, tile,
                    prologue, body, epilogue, buffers, shapes)


def _assemble_recurrent(spec: AttentionSpec, tile: TileShape) -> KernelIR:
    dims = spec.dims
    if tile.m != tile.n:
        raise InputError("chunked recurrences need square tiles",
                         tile=(tile.m, tile.n))
    scale = diagonal_scale(spec.h_mod)
    if scale is None:
        raise UnsupportedError(
            "h_mod does not factor as h times a per-step scale; this "
            "variant only runs stepwise", h_mod=spec.h_mod.source)
    c = tile.m
    descs = {d.name: d for d in spec.input_descriptors()}

    prologue: list = []
    body: list = []

    g, _ = _section_graph(spec)
    zero = g.const(0.0)
    g.mark_output(zero)
    seq, _ = expression_generation(g, pin={zero: "state"})
    prologue.append(("init_state", seq))

    body.append(_load_section(spec, tile, descs, "q", "q_tile", spec.q_mod))
    body.append(_load_section(spec, tile, descs, "k", "k_tile", spec.k_mod))
    body.append(_load_section(spec, tile, descs, "v", "v_tile", spec.v_mod))

    # per-step scale for the chunk
    g, consts = _section_graph(spec)
    env = dict(consts)
    pin = {}
    for e in spec.extra_inputs:
        ph = _tile_ph(g, spec, e.name, tile, descs)
        env[e.name] = ph
        pin[ph] = f"{e.name}_tile"
    sc = exprlang.lower(scale, g, env, allow_reduce=False, rank=4)
    ones = g.placeholder("scale_ones", (ONE, ONE, Dim(DimKind.SEQ_K, c), ONE))
    sc = g.add(Prim.MUL, sc, ones)
    g.mark_output(sc)
    pin[sc] = "scale"
    seq, _ = expression_generation(g, bound={ones: "scale_ones"}, pin=pin)
    seq.declare("dmat", (1, 1, c, c), pinned=True)
    seq.declare("cp", (1, 1, c, 1), pinned=True)
    seq.declare("wvec", (1, 1, c, 1), pinned=True)
    seq.declare("cp_last", (1, 1, 1, 1), pinned=True)
    body.append(("scale", seq))

    # intra-chunk scores and output
    g, consts = _section_graph(spec)
    qt = g.placeholder("q_tile", (ONE, ONE, Dim(DimKind.SEQ_Q, c),
                                  Dim(DimKind.DIM_QK, dims.d_qk)))
    kt = g.placeholder("k_tile", (ONE, ONE, Dim(DimKind.SEQ_K, c),
                                  Dim(DimKind.DIM_QK, dims.d_qk)))
    vt = g.placeholder("v_tile", (ONE, ONE, Dim(DimKind.SEQ_K, c),
                                  Dim(DimKind.DIM_V, dims.d_v)))
    dm = g.placeholder("dmat", (ONE, ONE, Dim(DimKind.SEQ_Q, c),
                                Dim(DimKind.SEQ_K, c)))
    cp = g.placeholder("cp", (ONE, ONE, Dim(DimKind.SEQ_Q, c), ONE))
    st = g.placeholder("state", (ONE, ONE, Dim(DimKind.DIM_QK, dims.d_qk),
                                 Dim(DimKind.DIM_V, dims.d_v)))
    bound = {qt: "q_tile", kt: "k_tile", vt: "v_tile", dm: "dmat",
             cp: "cp", st: "state"}
    a = g.add(Prim.MATMUL_NT, qt, kt)
    a = g.add(Prim.MUL, a, dm)
    intra = g.add(Prim.MATMUL_NN, a, vt)
    qs = g.add(Prim.MUL, qt, cp)
    inter = g.add(Prim.MATMUL_NN, qs, st)
    o = g.add(Prim.ADD, intra, inter)
    if spec.output_mod:
        env = {**consts, "o": o}
        for extra in sorted(spec.output_mod.free_names() - {"o"}
                            - set(consts)):
            ph = g.placeholders.get(extra)
            env[extra] = ph if ph is not None else _tile_ph(
                g, spec, extra, tile, descs)
            bound[env[extra]] = f"{extra}_tile"
        o = spec.output_mod.lower_into(g, env)
    g.mark_output(o)
    seq, _ = expression_generation(g, bound=bound, pin={o: "out_tile"},
                                   copy_out={o: "out"})
    body.append(("intra", seq))

    # carried state update
    seq = ExprSeq()
    seq.emit(Rescale("state", "cp_last"))
    kw = seq.fresh((1, 1, c, dims.d_qk))
    seq.emit(Compute(kw, "mul", ("k_tile", "wvec")))
    kv = seq.fresh((1, 1, dims.d_qk, dims.d_v))
    seq.emit(Compute(kv, "matmul_tn", (kw, "v_tile")))
    seq.emit(Compute("state", "add", ("state", kv)))
    body.append(("state", seq))

    shapes = {b.name: b.shape_fn(tile) for b in kernel_buffers(spec)}
    buffers = [(name, tuple(d.extent for d in shape))
               for name, shape in shapes.items()]
    return KernelIR(TemplateKind.RECURRENT_CHUNKED, spec, tile,
                    prologue, body, [], buffers, shapes,
                    has_decay_table=True)


# ─────────────────────────── code generation ───────────────────────────


def _fmt_extents(extents: tuple) -> str:
    trail = [e for e in extents[-2:]]
    return "[" + ",".join(str(e) for e in trail) + "]"


def _fmt_value(v) -> str:
    if isinstance(v, float):
        if v == math.inf:
            return "inf"
        if v == -math.inf:
            return "-inf"
        if v == int(v) and abs(v) < 1e15:
            return str(int(v))
        return repr(v)
    return str(v)


def _render_stmt(stmt: Stmt, plan: ExecutionPlan, pinned: set) -> str | None:
    if isinstance(stmt, Declare):
        if stmt.pinned:
            return None  # hoisted to the kernel header
        return f"local {stmt.slot} f64{_fmt_extents(stmt.extents)};"
    if isinstance(stmt, CopyIn):
        stage = plan.stage_of(stmt.slot) if stmt.slot in pinned else 1
        return f"copyin {stmt.tensor} -> {stmt.slot} stage={stage};"
    if isinstance(stmt, Compute):
        if stmt.op == "const":
            return f"{stmt.slot} = const({_fmt_value(stmt.params[0])});"
        args = ", ".join(stmt.operands)
        extra = ""
        if stmt.op == "clamp":
            extra = ", " + ", ".join(_fmt_value(p) for p in stmt.params)
        return f"{stmt.slot} = {stmt.op}({args}{extra});"
    if isinstance(stmt, RowReduce):
        return f"{stmt.slot} = rowreduce.{stmt.kind}({stmt.operand});"
    if isinstance(stmt, Rescale):
        return f"rescale {stmt.acc} by {stmt.factor};"
    if isinstance(stmt, CopyOut):
        return f"copyout {stmt.slot} -> {stmt.tensor};"
    raise UnsupportedError("statement not renderable in this template",
                           kind="unsupported-statement-for-template",
                           stmt=type(stmt).__name__)


def code_generation(ir: KernelIR, plan: ExecutionPlan) -> str:
    """Deterministic kernel text for one assembled template and plan."""
    _check_plan(ir, plan)
    spec, dims = ir.spec, ir.spec.dims
    pinned = {name for name, _ in ir.buffers}
    lines: list[str] = []
    lines.append(f'kernel "{spec.name}" template {ir.kind.value} '
                 f"tile {ir.tile.m}x{ir.tile.n} {{")
    lines.append(f"  dims batch={dims.batch} heads={dims.heads} "
                 f"seq_q={dims.seq_q} seq_k={dims.seq_k} "
                 f"d_qk={dims.d_qk} d_v={dims.d_v};")
    for name, extents in ir.buffers:
        tier = plan.placement_of(name).name.lower()
        stage = plan.stage_of(name)
        lines.append(f"  buffer {name} f64{_fmt_extents(extents)} "
                     f"tier={tier} stages={stage};")

    def render_block(sections, indent):
        for sname, seq in sections:
            lines.append(f"{indent}section {sname} {{")
            for stmt in seq.stmts:
                text = _render_stmt(stmt, plan, pinned)
                if text is not None:
                    lines.append(f"{indent}  {text}")
            lines.append(f"{indent}}}")

    if ir.kind is TemplateKind.PARALLEL_ONLINE:
        lines.append("  grid query_blocks {")
        render_block(ir.prologue, "    ")
        lines.append("    loop key_blocks {")
        render_block(ir.body, "      ")
        lines.append("    }")
        render_block(ir.epilogue, "    ")
        lines.append("  }")
    else:
        lines.append("  grid none {")
        render_block(ir.prologue, "    ")
        lines.append("    loop chunks {")
        for i, (sname, seq) in enumerate(ir.body):
            render_block([(sname, seq)], "      ")
            if ir.has_decay_table and sname == "scale":
                lines.append("      decay_table scale -> dmat cp wvec "
                             "cp_last;")
        lines.append("    }")
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"


# ─────────────────────────── binding / execution ───────────────────────────


def _check_plan(ir: KernelIR, plan: ExecutionPlan) -> None:
    if plan.tile != ir.tile:
        raise InputError("plan and kernel tile configs differ",
                         kind="inconsistent-plan", plan=(plan.tile.m,
                                                         plan.tile.n),
                         kernel=(ir.tile.m, ir.tile.n))
    have = {name for name, _ in plan.placements}
    need = {name for name, _ in ir.buffers}
    if not need <= have:
        raise InputError("plan does not place every kernel buffer",
                         kind="inconsistent-plan",
                         missing=sorted(need - have))


_STMT_FN = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
    "neg": lambda a: -a,
    "exp": np.exp, "exp2": np.exp2, "log": np.log, "abs": np.abs,
    "tanh": np.tanh, "sigmoid": _sigmoid,
    "max": np.maximum, "min": np.minimum,
    "cmp_eq": lambda a, b: np.equal(a, b).astype(np.float64),
    "cmp_ne": lambda a, b: np.not_equal(a, b).astype(np.float64),
    "cmp_lt": lambda a, b: np.less(a, b).astype(np.float64),
    "cmp_le": lambda a, b: np.less_equal(a, b).astype(np.float64),
    "cmp_gt": lambda a, b: np.greater(a, b).astype(np.float64),
    "cmp_ge": lambda a, b: np.greater_equal(a, b).astype(np.float64),
    "matmul_nn": mm_nn, "matmul_nt": mm_nt, "matmul_tn": mm_tn,
}

_ROWREDUCE_FN = {"sum": row_sum, "max": row_max, "abssum": row_abssum}


@dataclass
class ExecutablePlan:
    """A kernel bound to a plan, runnable on full problem arrays."""

    ir: KernelIR
    plan: ExecutionPlan

    def run(self, arrays: dict) -> np.ndarray:
        if self.ir.kind is TemplateKind.PARALLEL_ONLINE:
            return self._run_parallel(arrays)
        return self._run_recurrent(arrays)

    def _const_extents(self, slot: str, qs: slice) -> tuple:
        """Materialize a pinned buffer at its census shape, shrinking
        query-indexed axes on a ragged trailing block."""
        shape = self.ir.buffer_shapes.get(slot)
        if shape is None:
            return (1, 1, 1, 1)
        qlen = qs.stop - qs.start
        return tuple(qlen if d.kind is DimKind.SEQ_Q and d.extent > 1
                     else d.extent for d in shape)

    # -- shared statement interpreter -----------------------------------
    def _exec(self, seq: ExprSeq, state: dict, arrays: dict, shapes,
              qs, ks, out: np.ndarray) -> None:
        with np.errstate(divide="ignore", invalid="ignore", over="ignore",
                         under="ignore"):
            for stmt in seq.stmts:
                if isinstance(stmt, Declare):
                    continue
                if isinstance(stmt, CopyIn):
                    state[stmt.slot] = _block_view(arrays[stmt.tensor],
                                                   shapes[stmt.tensor],
                                                   qs, ks)
                elif isinstance(stmt, Compute):
                    if stmt.op == "const":
                        state[stmt.slot] = np.full(
                            self._const_extents(stmt.slot, qs),
                            stmt.params[0])
                    elif stmt.op == "copy":
                        state[stmt.slot] = state[stmt.operands[0]]
                    elif stmt.op == "clamp":
                        lo, hi = stmt.params
                        state[stmt.slot] = np.clip(state[stmt.operands[0]],
                                                   lo, hi)
                    elif stmt.op == "where":
                        c, a, b = (state[o] for o in stmt.operands)
                        state[stmt.slot] = np.where(c != 0, a, b)
                    elif stmt.op == "broadcast" or stmt.op == "sum_to":
                        state[stmt.slot] = state[stmt.operands[0]]
                    else:
                        fn = _STMT_FN[stmt.op]
                        state[stmt.slot] = fn(*(state[o]
                                                for o in stmt.operands))
                elif isinstance(stmt, RowReduce):
                    state[stmt.slot] = _ROWREDUCE_FN[stmt.kind](
                        np.asarray(state[stmt.operand], np.float64))
                elif isinstance(stmt, Rescale):
                    state[stmt.acc] = state[stmt.acc] * state[stmt.factor]
                elif isinstance(stmt, CopyOut):
                    view = out[..., qs, :]
                    view[...] = np.broadcast_to(state[stmt.slot], view.shape)
                else:  # pragma: no cover
                    raise GraphError("unknown statement",
                                     stmt=type(stmt).__name__)

    def _run_parallel(self, arrays: dict) -> np.ndarray:
        spec = self.ir.spec
        dims = spec.dims
        shapes = {d.name: d.resolve_shape(dims)
                  for d in spec.input_descriptors()}
        out = np.zeros((dims.batch, dims.heads, dims.seq_q, dims.d_v))
        for qs in _blocks(dims.seq_q, self.ir.tile.m):
            state: dict = {}
            for _, seq in self.ir.prologue:
                self._exec(seq, state, arrays, shapes, qs, slice(0, 0), out)
            for ks in _blocks(dims.seq_k, self.ir.tile.n):
                for _, seq in self.ir.body:
                    self._exec(seq, state, arrays, shapes, qs, ks, out)
            for _, seq in self.ir.epilogue:
                self._exec(seq, state, arrays, shapes, qs, slice(0, 0), out)
        return _check_output(out, "kernel")

    def _run_recurrent(self, arrays: dict) -> np.ndarray:
        spec = self.ir.spec
        dims = spec.dims
        shapes = {d.name: d.resolve_shape(dims)
                  for d in spec.input_descriptors()}
        b, h = dims.batch, dims.heads
        out = np.zeros((b, h, dims.seq_q, dims.d_v))
        state: dict = {"scale_ones": np.ones((1, 1, 1, 1))}
        for _, seq in self.ir.prologue:
            self._exec(seq, state, arrays, shapes, slice(0, 0), slice(0, 0),
                       out)
        for cs in _blocks(dims.seq_q, self.ir.tile.m):
            ca = cs.stop - cs.start
            state["scale_ones"] = np.ones((1, 1, ca, 1))
            for sname, seq in self.ir.body:
                self._exec(seq, state, arrays, shapes, cs, cs, out)
                if self.ir.has_decay_table and sname == "scale":
                    self._decay_table(state, b, h, ca)
        return _check_output(out, "kernel")

    def _decay_table(self, state: dict, b: int, h: int, c: int) -> None:
        sc = np.asarray(state["scale"], np.float64)
        sc = sc * np.ones((b, h, c, 1))
        dmat = np.zeros((b, h, c, c))
        dmat[..., 0, 0] = 1.0
        for i in range(1, c):
            dmat[..., i, :i] = dmat[..., i - 1, :i] * sc[..., i, :]
            dmat[..., i, i] = 1.0
        cp = np.ones((b, h, c, 1))
        cp[..., 0, :] = sc[..., 0, :]
        for i in range(1, c):
            cp[..., i, :] = cp[..., i - 1, :] * sc[..., i, :]
        state["dmat"] = dmat
        state["cp"] = cp
        state["wvec"] = np.swapaxes(dmat[..., c - 1:c, :], -1, -2)
        state["cp_last"] = cp[..., c - 1:c, :]


def bind_executable(ir: KernelIR, plan: ExecutionPlan) -> ExecutablePlan:
    """Couple an assembled kernel with a constraint-valid plan."""
    _check_plan(ir, plan)
    return ExecutablePlan(ir, plan)


def lower_backward(spec: AttentionSpec) -> ExprSeq:
    """Linearize the gradient graph with the same slot policy; gradients
    land in named buffers d_<input>."""
    from .attention import derive_backward
    bg = derive_backward(spec)
    bound = {}
    pin = {gid: f"d_{name}" for name, gid in bg.grads.items()}
    seq, _ = expression_generation(bg.graph, bound=bound, pin=pin)
    seq.check_slot_safety()
    return seq
