"""Attention variant descriptions and their pattern graphs.

A variant is a set of small expression fragments hung on one of two
fixed skeletons:

    parallel:   S = mod(Q) mod(K)^T ; score mods ; row normalization ;
                O = S mod(V) ; output mod
    recurrent:  h_t = h_mod(h_{t-1}) + k_mod(k_t)^T (x) v_mod(v_t) ;
                o_t = q_mod(q_t) h_t ;  h_0 = 0

Row normalization comes in two interchangeable shapes: a direct form
over complete score rows, and an online form (prologue / fwd / epilogue
over running row scales) that tiled execution uses.  The online phases
are ordered named assignments; `scores` and `rescale` are reserved
result names in the fwd phase and `acc` is the accumulator name in the
epilogue.

`build_parallel` and the recurrent unroll assemble full computation
graphs from the fragments; `derive_backward` runs reverse-mode autodiff
over those graphs, so every gradient follows from the same node table
that defines the forward semantics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

from . import exprlang
from .errors import InputError, UnsupportedError
from .exprlang import Expr, Literal, Var, Binary, Call
from .graph import Dim, DimKind, Graph, Prim, Shape, backward

RESERVED_NAMES = {
    "q", "k", "v", "s", "o", "h", "acc", "scores", "rescale",
    "qidx", "kidx", "inf",
    "batch", "heads", "seqq", "seqk", "dimqk", "dimv",
}


class Pattern(Enum):
    PARALLEL = "parallel"
    RECURRENT = "recurrent"


@dataclass(frozen=True, slots=True)
class Dims:
    batch: int
    heads: int
    seq_q: int
    seq_k: int
    d_qk: int
    d_v: int

    def __post_init__(self):
        for name in ("batch", "heads", "seq_q", "seq_k", "d_qk", "d_v"):
            if getattr(self, name) < 1:
                raise InputError(f"dims.{name} must be >= 1",
                                 value=getattr(self, name))

    def const_env(self) -> dict[str, float]:
        return {
            "batch": float(self.batch), "heads": float(self.heads),
            "seqq": float(self.seq_q), "seqk": float(self.seq_k),
            "dimqk": float(self.d_qk), "dimv": float(self.d_v),
        }

    def q_shape(self) -> Shape:
        return (Dim(DimKind.BATCH, self.batch), Dim(DimKind.HEADS, self.heads),
                Dim(DimKind.SEQ_Q, self.seq_q), Dim(DimKind.DIM_QK, self.d_qk))

    def k_shape(self) -> Shape:
        return (Dim(DimKind.BATCH, self.batch), Dim(DimKind.HEADS, self.heads),
                Dim(DimKind.SEQ_K, self.seq_k), Dim(DimKind.DIM_QK, self.d_qk))

    def v_shape(self) -> Shape:
        return (Dim(DimKind.BATCH, self.batch), Dim(DimKind.HEADS, self.heads),
                Dim(DimKind.SEQ_K, self.seq_k), Dim(DimKind.DIM_V, self.d_v))


_SHAPE_TOKEN_KINDS = {
    "batch": DimKind.BATCH, "heads": DimKind.HEADS,
    "seq_q": DimKind.SEQ_Q, "seq_k": DimKind.SEQ_K,
    "d_qk": DimKind.DIM_QK, "d_v": DimKind.DIM_V,
}


@dataclass(frozen=True, slots=True)
class ExtraInput:
    """A named auxiliary tensor (mask, gate, decay, index grid).

    `shape` is a 4-tuple of dimension tokens or the literal 1.  `fill`
    selects how problem instances populate it:

      uniform            values in [-1, 1]
      unit               values in [0.05, 0.95]
      constant_decay     per-head constant gamma (params: gamma)
      causal_decay_mask  gamma^(i-j) for j <= i else 0 (params: gamma)
      index_q / index_k  position grids
    """

    name: str
    shape: tuple = ("batch", "heads", "seq_k", 1)
    fill: str = "uniform"
    fill_params: dict = field(default_factory=dict)
    differentiable: bool = True

    def resolve_shape(self, dims: Dims) -> Shape:
        out: list[Dim] = []
        for tok in self.shape:
            if tok == 1:
                out.append(Dim(DimKind.ONE, 1))
            elif isinstance(tok, str) and tok in _SHAPE_TOKEN_KINDS:
                out.append(Dim(_SHAPE_TOKEN_KINDS[tok], getattr(dims, tok)))
            else:
                raise InputError("bad extra shape token", token=tok,
                                 extra=self.name)
        if len(out) != 4:
            raise InputError("extra shapes have rank 4", extra=self.name)
        return tuple(out)


@dataclass(frozen=True)
class ModificationFn:
    """One expression fragment with a designated input tensor name."""

    source: str
    input_name: str | None = None
    ismask: bool = False
    allow_reduce: bool = False
    expr: Expr = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.expr is None:
            object.__setattr__(self, "expr", exprlang.parse(self.source))

    def free_names(self) -> set[str]:
        return exprlang.free_vars(self.expr)

    def lower_into(self, graph: Graph, env: dict[str, int], rank: int = 4) -> int:
        return exprlang.lower(self.expr, graph, env,
                              allow_reduce=self.allow_reduce, rank=rank)


def mod(source: str, input_name: str, *, ismask: bool = False) -> ModificationFn:
    return ModificationFn(source, input_name, ismask=ismask)


@dataclass(frozen=True)
class DirectRowNorm:
    """Normalization over complete score rows; variable `s`."""

    body: ModificationFn

    @classmethod
    def from_source(cls, source: str) -> "DirectRowNorm":
        return cls(ModificationFn(source, "s", allow_reduce=True))


@dataclass(frozen=True)
class OnlineRowNorm:
    """Blockwise normalization protocol.

    prologue and fwd are ordered (name, fragment) assignments.  The
    prologue initializes every row scale from constants.  The fwd phase
    sees the current score block as `s` plus the running row scales,
    may introduce intermediate names, and must assign the reserved names
    `scores` (transformed block) and `rescale` (accumulator rescale
    factor).  The epilogue sees `acc` plus final row scales.
    """

    rowscales: tuple[str, ...]
    prologue: tuple[tuple[str, ModificationFn], ...]
    fwd: tuple[tuple[str, ModificationFn], ...]
    epilogue: ModificationFn
    direct: DirectRowNorm | None = None


def online(rowscales: list[str], prologue: dict[str, str], fwd: dict[str, str],
           epilogue: str, direct: str | None = None) -> OnlineRowNorm:
    """Build an OnlineRowNorm from expression strings (insertion order
    of `fwd` is the evaluation order)."""
    return OnlineRowNorm(
        rowscales=tuple(rowscales),
        prologue=tuple((n, ModificationFn(e, None, allow_reduce=True))
                       for n, e in prologue.items()),
        fwd=tuple((n, ModificationFn(e, None, allow_reduce=True))
                  for n, e in fwd.items()),
        epilogue=ModificationFn(epilogue, "acc", allow_reduce=True),
        direct=DirectRowNorm.from_source(direct) if direct else None,
    )


@dataclass(frozen=True)
class AttentionSpec:
    name: str
    pattern: Pattern
    dims: Dims
    q_mod: ModificationFn | None = None
    k_mod: ModificationFn | None = None
    v_mod: ModificationFn | None = None
    score_mods: tuple[ModificationFn, ...] = ()
    rownorm: OnlineRowNorm | DirectRowNorm | None = None
    output_mod: ModificationFn | None = None
    h_mod: ModificationFn | None = None
    extra_inputs: tuple[ExtraInput, ...] = ()

    # ------------------------------------------------------------------
    def extras_by_name(self) -> dict[str, ExtraInput]:
        return {e.name: e for e in self.extra_inputs}

    def uses_index_grids(self) -> bool:
        names: set[str] = set()
        for m in self.score_mods:
            names |= m.free_names()
        return bool(names & {"qidx", "kidx"})

    def input_descriptors(self) -> list[ExtraInput]:
        """All fillable inputs: q, k, v, declared extras, and implicit
        index grids when score modifications reference them."""
        base = [
            ExtraInput("q", ("batch", "heads", "seq_q", "d_qk"), "uniform"),
            ExtraInput("k", ("batch", "heads", "seq_k", "d_qk"), "uniform"),
            ExtraInput("v", ("batch", "heads", "seq_k", "d_v"), "uniform"),
        ]
        out = base + list(self.extra_inputs)
        if self.uses_index_grids():
            out.append(ExtraInput("qidx", (1, 1, "seq_q", 1), "index_q",
                                  differentiable=False))
            out.append(ExtraInput("kidx", (1, 1, 1, "seq_k"), "index_k",
                                  differentiable=False))
        return out

    # ------------------------------------------------------------------
    def validate(self) -> None:
        seen: set[str] = set()
        for e in self.extra_inputs:
            if e.name in RESERVED_NAMES:
                raise InputError("extra input name is reserved", name=e.name)
            if e.name in seen:
                raise InputError("duplicate extra input", name=e.name)
            seen.add(e.name)
            e.resolve_shape(self.dims)

        allowed_free = set(self.dims.const_env()) | seen

        def check(fn: ModificationFn | None, input_name: str,
                  extra_ok: set[str] = frozenset()) -> None:
            if fn is None:
                return
            unknown = fn.free_names() - allowed_free - {input_name} - extra_ok
            if unknown:
                raise InputError("expression references unknown names",
                                 names=sorted(unknown), source=fn.source)

        check(self.q_mod, "q")
        check(self.k_mod, "k")
        check(self.v_mod, "v")
        check(self.output_mod, "o")
        for m in self.score_mods:
            check(m, "s", extra_ok={"qidx", "kidx"})

        if self.pattern is Pattern.RECURRENT:
            if self.score_mods:
                raise UnsupportedError(
                    "recurrent variants do not take score modifications")
            if self.rownorm is not None:
                raise UnsupportedError(
                    "recurrent variants fold normalization into h_mod; "
                    "row normalization is a parallel-pattern feature")
            if self.dims.seq_q != self.dims.seq_k:
                raise InputError("recurrent variants need seq_q == seq_k",
                                 seq_q=self.dims.seq_q, seq_k=self.dims.seq_k)
            check(self.h_mod, "h")
            for e in self.extra_inputs:
                if e.shape[2] != "seq_k":
                    raise InputError(
                        "recurrent extras must be per-step tensors on the "
                        "shared sequence axis", extra=e.name)
        else:
            if self.h_mod is not None:
                raise InputError("h_mod only applies to recurrent variants")

        if isinstance(self.rownorm, OnlineRowNorm):
            rn = self.rownorm
            if not rn.rowscales:
                raise InputError("online normalization declares no row scales")
            pro_names = [n for n, _ in rn.prologue]
            if sorted(pro_names) != sorted(rn.rowscales):
                raise InputError("prologue must initialize each row scale "
                                 "exactly once", prologue=pro_names,
                                 rowscales=list(rn.rowscales))
            consts = set(self.dims.const_env())
            for n, fn in rn.prologue:
                bad = fn.free_names() - consts
                if bad:
                    raise InputError("prologue reads non-constant names",
                                     names=sorted(bad))
            seen_fwd = set(rn.rowscales) | {"s"} | consts
            fwd_names = [n for n, _ in rn.fwd]
            for n, fn in rn.fwd:
                bad = fn.free_names() - seen_fwd
                if bad:
                    raise InputError("fwd reads names not yet defined",
                                     assignment=n, names=sorted(bad))
                seen_fwd.add(n)
            for req in ("scores", "rescale"):
                if req not in fwd_names:
                    raise InputError(f"fwd must assign {req!r}")
            epi_ok = {"acc"} | set(rn.rowscales) | consts
            bad = rn.epilogue.free_names() - epi_ok
            if bad:
                raise InputError("epilogue reads names outside acc and "
                                 "final row scales", names=sorted(bad))
            if rn.direct is not None:
                bad = rn.direct.body.free_names() - ({"s"} | consts)
                if bad:
                    raise InputError("direct form reads unknown names",
                                     names=sorted(bad))
        elif isinstance(self.rownorm, DirectRowNorm):
            bad = self.rownorm.body.free_names() - (
                {"s"} | set(self.dims.const_env()))
            if bad:
                raise InputError("direct form reads unknown names",
                                 names=sorted(bad))


# ────────────────────────── diagonal h_mod analysis ──────────────────────────


def diagonal_scale(h_mod: ModificationFn | None) -> Expr | None:
    """Extract the per-step scale when h_mod factors as h * scale.

    Returns the scale expression (Literal 1.0 for identity), or None
    when h_mod does not have that shape, in which case only stepwise
    execution is available.
    """
    if h_mod is None:
        return Literal(1.0)
    expr = h_mod.expr
    hname = h_mod.input_name or "h"
    if isinstance(expr, Var) and expr.name == hname:
        return Literal(1.0)

    factors: list[Expr] = []

    def flatten(e: Expr) -> bool:
        if isinstance(e, Binary) and e.op == "*":
            return flatten(e.lhs) and flatten(e.rhs)
        factors.append(e)
        return True

    if not flatten(expr):  # pragma: no cover - flatten always returns True
        return None
    h_factors = [f for f in factors
                 if isinstance(f, Var) and f.name == hname]
    rest = [f for f in factors
            if not (isinstance(f, Var) and f.name == hname)]
    if len(h_factors) != 1:
        return None
    if any(hname in exprlang.free_vars(f) for f in rest):
        return None
    if not rest:
        return Literal(1.0)
    scale = rest[0]
    for f in rest[1:]:
        scale = Binary("*", scale, f)
    return scale


# ───────────────────────────── pattern graphs ─────────────────────────────


@dataclass
class PatternGraph:
    """A fully assembled forward graph plus the ids that matter."""

    graph: Graph
    inputs: dict[str, int]
    output: int
    scores_final: int | None = None


def _const_nodes(g: Graph, dims: Dims) -> dict[str, int]:
    return {name: g.const(v) for name, v in dims.const_env().items()}


def build_parallel(spec: AttentionSpec) -> PatternGraph:
    """Assemble the dense parallel-pattern graph for one variant.

    Score modifications apply in declaration order; normalization uses
    the direct form (the online form's declared direct equivalent when
    only that is given)."""
    if spec.pattern is not Pattern.PARALLEL:
        raise InputError("variant is not a parallel-pattern variant",
                         variant=spec.name)
    spec.validate()
    dims = spec.dims
    g = Graph()
    inputs: dict[str, int] = {}
    for desc in spec.input_descriptors():
        inputs[desc.name] = g.placeholder(desc.name, desc.resolve_shape(dims))
    consts = _const_nodes(g, dims)

    def apply_mod(fn: ModificationFn | None, input_name: str, node: int) -> int:
        if fn is None:
            return node
        env = {input_name: node, **inputs, **consts}
        return fn.lower_into(g, env)

    qm = apply_mod(spec.q_mod, "q", inputs["q"])
    km = apply_mod(spec.k_mod, "k", inputs["k"])
    vm = apply_mod(spec.v_mod, "v", inputs["v"])
    s = g.add(Prim.MATMUL_NT, qm, km)
    for m in spec.score_mods:
        s = apply_mod(m, "s", s)

    rn = spec.rownorm
    direct = None
    if isinstance(rn, DirectRowNorm):
        direct = rn
    elif isinstance(rn, OnlineRowNorm):
        direct = rn.direct
    if direct is not None:
        s = direct.body.lower_into(g, {"s": s, **consts})
        out = g.add(Prim.MATMUL_NN, s, vm)
    elif isinstance(rn, OnlineRowNorm):
        # No direct equivalent declared: run the whole protocol over
        # complete rows.  One block, zero accumulator, so the rescale
        # never touches real data but the epilogue still applies to the
        # accumulator after the value contraction.
        fwd_env = dict(consts)
        for name, fn in rn.prologue:
            fwd_env[name] = fn.lower_into(g, dict(consts))
        fwd_env["s"] = s
        for name, fn in rn.fwd:
            fwd_env[name] = fn.lower_into(g, fwd_env)
        s = fwd_env["scores"]
        acc = g.add(Prim.MATMUL_NN, s, vm)
        epi_env = {**consts,
                   **{name: fwd_env[name] for name in rn.rowscales}}
        epi_env["acc"] = acc
        out = rn.epilogue.lower_into(g, epi_env)
    else:
        out = g.add(Prim.MATMUL_NN, s, vm)
    out = apply_mod(spec.output_mod, "o", out)
    g.mark_output(out)
    return PatternGraph(g, inputs, out, scores_final=s)


MAX_UNROLL = 256


@dataclass
class RecurrenceDef:
    """Symbolic recurrence for one recurrent variant.

    h_t = h_mod(h_{t-1}) + k_mod(k_t)^T (x) v_mod(v_t)
    o_t = q_mod(q_t) h_t ;  h_0 = 0

    `scale` is the per-step diagonal factor extracted from h_mod when it
    has the h * scale shape (chunked execution needs it)."""

    spec: AttentionSpec
    scale: Expr | None

    def unroll(self) -> PatternGraph:
        """Unrolled graph over the full sequence; the marked output is
        the sum over steps of o_t, so its seeded gradients equal those
        of loss = sum over the stacked outputs."""
        spec = self.spec
        dims = spec.dims
        steps = dims.seq_q
        if steps > MAX_UNROLL:
            raise UnsupportedError("sequence too long to unroll for autodiff",
                                   steps=steps, limit=MAX_UNROLL)
        g = Graph()
        inputs: dict[str, int] = {}
        for desc in spec.input_descriptors():
            inputs[desc.name] = g.placeholder(desc.name, desc.resolve_shape(dims))
        consts = _const_nodes(g, dims)
        extras = spec.extras_by_name()

        h = g.const(0.0)
        total = None
        for t in range(steps):
            step_env = dict(consts)
            for name in extras:
                node = g.add(Prim.SLICE_SEQ, inputs[name], params=(t,))
                step_env[name] = node
            qt = g.add(Prim.SLICE_SEQ, inputs["q"], params=(t,))
            kt = g.add(Prim.SLICE_SEQ, inputs["k"], params=(t,))
            vt = g.add(Prim.SLICE_SEQ, inputs["v"], params=(t,))
            if spec.q_mod:
                qt = spec.q_mod.lower_into(g, {"q": qt, **step_env})
            if spec.k_mod:
                kt = spec.k_mod.lower_into(g, {"k": kt, **step_env})
            if spec.v_mod:
                vt = spec.v_mod.lower_into(g, {"v": vt, **step_env})
            h_pre = h
            if spec.h_mod:
                h_pre = spec.h_mod.lower_into(g, {"h": h, **step_env})
            outer = g.add(Prim.MATMUL_TN, kt, vt)
            h = g.add(Prim.ADD, h_pre, outer)
            ot = g.add(Prim.MATMUL_NN, qt, h)
            if spec.output_mod:
                ot = spec.output_mod.lower_into(g, {"o": ot, **step_env})
            total = ot if total is None else g.add(Prim.ADD, total, ot)
        g.mark_output(total)
        return PatternGraph(g, inputs, total)


def build_recurrent(spec: AttentionSpec) -> RecurrenceDef:
    if spec.pattern is not Pattern.RECURRENT:
        raise InputError("variant is not a recurrent-pattern variant",
                         variant=spec.name)
    spec.validate()
    return RecurrenceDef(spec, diagonal_scale(spec.h_mod))


@dataclass
class BackwardGraph:
    pattern: PatternGraph
    graph: Graph  # frozen, extended with adjoints
    grads: dict[str, int]


def derive_backward(spec: AttentionSpec,
                    wrt: list[str] | None = None) -> BackwardGraph:
    """Reverse-mode gradients of loss = sum(output) for the variant.

    `wrt` names inputs (default: q, k, v plus differentiable extras).
    For recurrent variants the recurrence is unrolled first, so matmul,
    slice, and elementwise adjoints all come from the same rule table.
    """
    if spec.pattern is Pattern.PARALLEL:
        pat = build_parallel(spec)
    else:
        pat = build_recurrent(spec).unroll()
    if wrt is None:
        wrt = ["q", "k", "v"] + [e.name for e in spec.extra_inputs
                                 if e.differentiable]
    missing = [n for n in wrt if n not in pat.inputs]
    if missing:
        raise InputError("cannot differentiate unknown inputs", names=missing)
    bg, grad_ids = backward(pat.graph, pat.output,
                            [pat.inputs[n] for n in wrt])
    grads = {n: grad_ids[pat.inputs[n]] for n in wrt}
    return BackwardGraph(pat, bg, grads)


# ─────────────────────────────── builtins ───────────────────────────────


def _softmax_rownorm() -> OnlineRowNorm:
    return online(
        rowscales=["m", "l"],
        prologue={"m": "-inf", "l": "0"},
        fwd={
            "m_new": "max(m, reduceMax(s))",
            "r": "where(m_new == -inf, 1, exp(m - m_new))",
            "p": "where(m_new == -inf, 0, exp(s - m_new))",
            "l": "r * l + reduceSum(p)",
            "m": "m_new",
            "scores": "p",
            "rescale": "r",
        },
        epilogue="where(l == 0, 0, acc / l)",
        direct="where(reduceMax(s) == -inf, 0, "
               "exp(s - reduceMax(s)) / reduceSum(exp(s - reduceMax(s))))",
    )


def _abssum_rownorm() -> OnlineRowNorm:
    return online(
        rowscales=["a"],
        prologue={"a": "0"},
        fwd={
            "a": "a + reduceAbssum(s)",
            "scores": "s",
            "rescale": "1",
        },
        epilogue="acc / clamp(a, 1, inf)",
        direct="s / clamp(reduceAbssum(s), 1, inf)",
    )


def retention_gammas(heads: int, gamma: float | list[float] | None) -> list[float]:
    if gamma is None:
        return [1.0 - 2.0 ** (-5.0 - h) for h in range(heads)]
    if isinstance(gamma, (int, float)):
        return [float(gamma)] * heads
    if len(gamma) != heads:
        raise InputError("gamma list length must equal heads",
                         got=len(gamma), heads=heads)
    return [float(g) for g in gamma]


def _softmax_spec(name: str, dims: Dims, **_: object) -> AttentionSpec:
    return AttentionSpec(
        name=name, pattern=Pattern.PARALLEL, dims=dims,
        q_mod=mod("q / sqrt(dimqk)", "q"),
        rownorm=_softmax_rownorm(),
    )


def _sigmoid_spec(name: str, dims: Dims, **_: object) -> AttentionSpec:
    return AttentionSpec(
        name=name, pattern=Pattern.PARALLEL, dims=dims,
        q_mod=mod("q / sqrt(dimqk)", "q"),
        score_mods=(mod("sigmoid(s)", "s"),),
    )


def _relu_spec(name: str, dims: Dims, **_: object) -> AttentionSpec:
    return AttentionSpec(
        name=name, pattern=Pattern.PARALLEL, dims=dims,
        q_mod=mod("q / sqrt(dimqk)", "q"),
        score_mods=(mod("relu(s)", "s"),),
    )


def _retention_parallel_spec(name: str, dims: Dims,
                             gamma=None, normalized: bool = True,
                             **_: object) -> AttentionSpec:
    gammas = retention_gammas(dims.heads, gamma)
    return AttentionSpec(
        name=name, pattern=Pattern.PARALLEL, dims=dims,
        q_mod=mod("q / sqrt(dimqk)", "q"),
        score_mods=(mod("s * mask", "s", ismask=True),),
        rownorm=_abssum_rownorm() if normalized else None,
        extra_inputs=(ExtraInput(
            "mask", (1, "heads", "seq_q", "seq_k"), "causal_decay_mask",
            {"gamma": gammas}, differentiable=False),),
    )


def _retention_recurrent_spec(name: str, dims: Dims,
                              gamma=None, **_: object) -> AttentionSpec:
    gammas = retention_gammas(dims.heads, gamma)
    return AttentionSpec(
        name=name, pattern=Pattern.RECURRENT, dims=dims,
        q_mod=mod("q / sqrt(dimqk)", "q"),
        h_mod=mod("h * decay", "h"),
        extra_inputs=(ExtraInput(
            "decay", (1, "heads", "seq_k", 1), "constant_decay",
            {"gamma": gammas}, differentiable=False),),
    )


def _gated_retention_spec(name: str, dims: Dims, **_: object) -> AttentionSpec:
    return AttentionSpec(
        name=name, pattern=Pattern.RECURRENT, dims=dims,
        q_mod=mod("q / sqrt(dimqk)", "q"),
        h_mod=mod("h * gate", "h"),
        extra_inputs=(ExtraInput("gate", ("batch", "heads", "seq_k", 1),
                                 "unit"),),
    )


def _mamba2_spec(name: str, dims: Dims, **_: object) -> AttentionSpec:
    return AttentionSpec(
        name=name, pattern=Pattern.RECURRENT, dims=dims,
        k_mod=mod("k * gate", "k"),
        h_mod=mod("h * decay * gate", "h"),
        extra_inputs=(
            ExtraInput("gate", ("batch", "heads", "seq_k", 1), "unit"),
            ExtraInput("decay", ("batch", "heads", "seq_k", 1), "unit"),
        ),
    )


# (heads, d_qk, d_v) defaults per builtin; model-scale head counts and
# head dims from the microbenchmark configurations these variants mirror.
BUILTIN_DIMS: dict[str, tuple[int, int, int]] = {
    "softmax": (32, 128, 128),
    "softmax-deepseek": (16, 192, 128),
    "softmax-diff": (12, 128, 256),
    "sigmoid": (32, 128, 128),
    "relu": (6, 64, 64),
    "retention-parallel": (32, 256, 512),
    "retention-recurrent": (32, 256, 512),
    "gated-retention": (40, 256, 256),
    "mamba2-ssm": (80, 128, 64),
}

_BUILDERS = {
    "softmax": _softmax_spec,
    "softmax-deepseek": _softmax_spec,
    "softmax-diff": _softmax_spec,
    "sigmoid": _sigmoid_spec,
    "relu": _relu_spec,
    "retention-parallel": _retention_parallel_spec,
    "retention-recurrent": _retention_recurrent_spec,
    "gated-retention": _gated_retention_spec,
    "mamba2-ssm": _mamba2_spec,
}

BUILTIN_NAMES = tuple(BUILTIN_DIMS)

DEFAULT_SEQ = 2048

RECURRENT_BUILTINS = ("retention-recurrent", "gated-retention", "mamba2-ssm")


def builtin(name: str, *, batch: int = 1, heads: int | None = None,
            seq_q: int | None = None, seq_k: int | None = None,
            seq: int | None = None, d_qk: int | None = None,
            d_v: int | None = None, scale: float = 1.0,
            gamma: float | list[float] | None = None,
            normalized: bool = True) -> AttentionSpec:
    """Construct a builtin variant, optionally overriding its dims.

    `scale` multiplies sequence lengths only; head and feature dims stay
    at their configured values unless overridden explicitly.
    """
    from .errors import UnknownVariantError
    if name not in _BUILDERS:
        raise UnknownVariantError("not a builtin variant", name=name,
                                  known=list(BUILTIN_NAMES))
    h0, dqk0, dv0 = BUILTIN_DIMS[name]
    sq = seq_q if seq_q is not None else (seq if seq is not None else DEFAULT_SEQ)
    sk = seq_k if seq_k is not None else (seq if seq is not None else DEFAULT_SEQ)
    if name in RECURRENT_BUILTINS:
        sk = sq if seq_k is None else sk
    sq = max(1, int(round(sq * scale)))
    sk = max(1, int(round(sk * scale)))
    dims = Dims(batch=batch, heads=heads if heads is not None else h0,
                seq_q=sq, seq_k=sk,
                d_qk=d_qk if d_qk is not None else dqk0,
                d_v=d_v if d_v is not None else dv0)
    spec = _BUILDERS[name](name, dims, gamma=gamma, normalized=normalized)
    spec.validate()
    return spec


def causal_mask(spec: AttentionSpec) -> ModificationFn:
    """A causal mask for a parallel variant, picking the additive -inf
    form when an exponential appears downstream (softmax-family) and the
    multiplicative 0/1 form otherwise."""
    def has_exp(fn: ModificationFn | None) -> bool:
        if fn is None:
            return False
        found = False

        def walk(e: Expr) -> None:
            nonlocal found
            if isinstance(e, Call):
                if e.func in ("exp", "exp2"):
                    found = True
                for a in e.args:
                    walk(a)
            elif isinstance(e, Binary) or isinstance(e, exprlang.Compare):
                walk(e.lhs)
                walk(e.rhs)
            elif isinstance(e, exprlang.Unary):
                walk(e.operand)

        walk(fn.expr)
        return found

    downstream: list[ModificationFn | None] = [spec.output_mod]
    rn = spec.rownorm
    if isinstance(rn, DirectRowNorm):
        downstream.append(rn.body)
    elif isinstance(rn, OnlineRowNorm):
        downstream.extend(fn for _, fn in rn.fwd)
        downstream.append(rn.epilogue)
        if rn.direct:
            downstream.append(rn.direct.body)
    if any(has_exp(fn) for fn in downstream):
        return mod("where(kidx <= qidx, s, -inf)", "s", ismask=True)
    return mod("s * where(kidx <= qidx, 1, 0)", "s", ismask=True)


def with_causal_mask(spec: AttentionSpec) -> AttentionSpec:
    return replace(spec, score_mods=spec.score_mods + (causal_mask(spec),))
