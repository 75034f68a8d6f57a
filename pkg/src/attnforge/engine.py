"""Dense 64-bit execution engine and reference oracles.

Everything here computes in float64 with a pinned accumulation order:
contractions and row sums run as a straight loop over the contracted
index, ascending, with no pairwise splitting.  numpy's own `sum`,
`einsum`, and `@` do not promise that order (they use SIMD partial
sums), so the helpers below loop over the contracted axis explicitly
and only vectorize across the kept axes, which never reorders the
per-element accumulation chain.

Four executors share those helpers:

  run_naive_parallel   dense whole-matrix evaluation of a variant graph
  run_tiled_parallel   blockwise evaluation with the online protocol
  run_step_recurrent   literal one-step recurrence
  run_chunk_recurrent  chunked recurrence via incremental decay tables

NaN in a final output raises; intermediates are allowed transient inf
or NaN inside untaken where branches (IEEE semantics, errors silenced).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import exprlang
from .attention import (AttentionSpec, DirectRowNorm, OnlineRowNorm, Pattern,
                        build_parallel, build_recurrent, derive_backward,
                        diagonal_scale)
from .errors import GraphError, InputError, NanError, UnsupportedError
from .exprlang import Binary, Call, Compare, Expr, Literal, Unary, Var
from .graph import Dim, DimKind, Graph, Prim, Shape, topo_sort

_ERRSTATE = {"divide": "ignore", "invalid": "ignore",
             "over": "ignore", "under": "ignore"}


# ───────────────────────── accumulation helpers ─────────────────────────


def mm_nn(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b over the last two axes, contraction index ascending."""
    d = a.shape[-1]
    if b.shape[-2] != d:
        raise GraphError("contraction mismatch", a=a.shape, b=b.shape)
    out = np.zeros(np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
                   + (a.shape[-2], b.shape[-1]))
    with np.errstate(**_ERRSTATE):
        for t in range(d):
            out += a[..., :, t:t + 1] * b[..., t:t + 1, :]
    return out


def mm_nt(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b^T over the last two axes, contraction index ascending."""
    d = a.shape[-1]
    if b.shape[-1] != d:
        raise GraphError("contraction mismatch", a=a.shape, b=b.shape)
    out = np.zeros(np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
                   + (a.shape[-2], b.shape[-2]))
    with np.errstate(**_ERRSTATE):
        for t in range(d):
            out += a[..., :, t:t + 1] * np.swapaxes(b[..., :, t:t + 1], -1, -2)
    return out


def mm_tn(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a^T @ b over the last two axes, contraction index ascending."""
    d = a.shape[-2]
    if b.shape[-2] != d:
        raise GraphError("contraction mismatch", a=a.shape, b=b.shape)
    out = np.zeros(np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
                   + (a.shape[-1], b.shape[-1]))
    with np.errstate(**_ERRSTATE):
        for t in range(d):
            out += np.swapaxes(a[..., t:t + 1, :], -1, -2) * b[..., t:t + 1, :]
    return out


def row_sum(x: np.ndarray) -> np.ndarray:
    out = np.zeros(x.shape[:-1] + (1,))
    with np.errstate(**_ERRSTATE):
        for t in range(x.shape[-1]):
            out[..., 0] += x[..., t]
    return out


def row_abssum(x: np.ndarray) -> np.ndarray:
    out = np.zeros(x.shape[:-1] + (1,))
    with np.errstate(**_ERRSTATE):
        for t in range(x.shape[-1]):
            out[..., 0] += np.abs(x[..., t])
    return out


def row_max(x: np.ndarray) -> np.ndarray:
    # max is order-free, so the library reduction is fine here
    return np.max(x, axis=-1, keepdims=True)


def sum_to(x: np.ndarray, target: tuple[int, ...]) -> np.ndarray:
    axes = tuple(ax for ax, (have, want) in enumerate(zip(x.shape, target))
                 if want == 1 and have != 1)
    if axes:
        with np.errstate(**_ERRSTATE):
            x = np.sum(x, axis=axes, keepdims=True)
    return x


# ───────────────────────── expression interpreter ─────────────────────────

_BIN_FN = {
    "+": np.add, "-": np.subtract, "*": np.multiply, "/": np.divide,
}

_CMP_FN = {
    "==": np.equal, "!=": np.not_equal, "<": np.less, "<=": np.less_equal,
    ">": np.greater, ">=": np.greater_equal,
}


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


_CALL_FN1 = {
    "exp": np.exp, "exp2": np.exp2, "log": np.log, "abs": np.abs,
    "tanh": np.tanh, "sigmoid": _sigmoid,
    "relu": lambda x: np.maximum(x, 0.0),
    "sqrt": np.sqrt,
    "reduceSum": row_sum, "reduceMax": row_max, "reduceAbssum": row_abssum,
}


def eval_expr(expr: Expr, env: dict[str, object]):
    """Evaluate one expression fragment over numpy arrays and floats.

    Mirrors the graph evaluator's primitive semantics; the tiled and
    chunked executors use it so fragments run per block without graph
    construction."""
    with np.errstate(**_ERRSTATE):
        return _eval(expr, env)


def _eval(expr: Expr, env: dict[str, object]):
    if isinstance(expr, Literal):
        return expr.value
    if isinstance(expr, Var):
        try:
            return env[expr.name]
        except KeyError:
            raise GraphError("unbound name in fragment", name=expr.name)
    if isinstance(expr, Unary):
        return -_eval(expr.operand, env)
    if isinstance(expr, Binary):
        return _BIN_FN[expr.op](np.float64(1) * _eval(expr.lhs, env),
                                _eval(expr.rhs, env))
    if isinstance(expr, Compare):
        return _CMP_FN[expr.op](_eval(expr.lhs, env),
                                _eval(expr.rhs, env)).astype(np.float64)
    if isinstance(expr, Call):
        args = [_eval(a, env) for a in expr.args]
        if expr.func in _CALL_FN1:
            if expr.func.startswith("reduce"):
                return _CALL_FN1[expr.func](np.asarray(args[0], np.float64))
            return _CALL_FN1[expr.func](args[0])
        if expr.func == "max":
            return np.maximum(args[0], args[1])
        if expr.func == "min":
            return np.minimum(args[0], args[1])
        if expr.func == "clamp":
            return np.clip(args[0], args[1], args[2])
        if expr.func == "where":
            cond = np.asarray(args[0])
            return np.where(cond != 0, args[1], args[2])
    raise GraphError("unhandled expression form", form=type(expr).__name__)


# ─────────────────────────── graph evaluator ───────────────────────────

# primitives whose output depends on a branch decision; their decision
# patterns make up the branch signature used for kink detection
_BRANCHY = {Prim.MAX, Prim.MIN, Prim.ABS, Prim.CLAMP, Prim.WHERE,
            Prim.REDUCE_MAX, Prim.REDUCE_ABSSUM, Prim.FIRST_MAX_MASK}


@dataclass
class EvalResult:
    values: dict[int, np.ndarray]
    signature: dict[int, bytes]


def _first_max_mask(x: np.ndarray) -> np.ndarray:
    idx = np.argmax(x, axis=-1)
    mask = np.zeros_like(x)
    np.put_along_axis(mask, idx[..., None], 1.0, axis=-1)
    return mask


def evaluate(graph: Graph, feeds: dict[str, np.ndarray],
             collect_signature: bool = False) -> EvalResult:
    """Run every node of a graph in topological order.

    feeds maps placeholder names to float64 arrays whose extents must
    equal the declared shapes exactly; extra keys are ignored.
    """
    order = topo_sort(graph)
    values: dict[int, np.ndarray] = {}
    signature: dict[int, bytes] = {}
    names = {nid: name for name, nid in graph.placeholders.items()}

    with np.errstate(**_ERRSTATE):
        for nid in order:
            node = graph.nodes[nid]
            op = node.op
            if nid in names:
                name = names[nid]
                if name not in feeds:
                    raise InputError("missing input tensor", name=name)
                arr = np.ascontiguousarray(feeds[name], dtype=np.float64)
                want = tuple(d.extent for d in node.shape)
                if arr.shape != want:
                    raise InputError("input shape mismatch", name=name,
                                     want=want, got=arr.shape)
                values[nid] = arr
                continue
            ins = [values[i] for i in node.inputs]
            if op is Prim.CONST:
                values[nid] = np.full(tuple(d.extent for d in node.shape),
                                      node.params[0])
            elif op is Prim.ADD:
                values[nid] = ins[0] + ins[1]
            elif op is Prim.SUB:
                values[nid] = ins[0] - ins[1]
            elif op is Prim.MUL:
                values[nid] = ins[0] * ins[1]
            elif op is Prim.DIV:
                values[nid] = ins[0] / ins[1]
            elif op is Prim.NEG:
                values[nid] = -ins[0]
            elif op is Prim.EXP:
                values[nid] = np.exp(ins[0])
            elif op is Prim.EXP2:
                values[nid] = np.exp2(ins[0])
            elif op is Prim.LOG:
                values[nid] = np.log(ins[0])
            elif op is Prim.ABS:
                values[nid] = np.abs(ins[0])
                if collect_signature:
                    signature[nid] = (ins[0] >= 0).tobytes()
            elif op is Prim.TANH:
                values[nid] = np.tanh(ins[0])
            elif op is Prim.SIGMOID:
                values[nid] = _sigmoid(ins[0])
            elif op is Prim.MAX:
                values[nid] = np.maximum(ins[0], ins[1])
                if collect_signature:
                    signature[nid] = (ins[0] >= ins[1]).tobytes()
            elif op is Prim.MIN:
                values[nid] = np.minimum(ins[0], ins[1])
                if collect_signature:
                    signature[nid] = (ins[0] <= ins[1]).tobytes()
            elif op is Prim.CLAMP:
                lo, hi = node.params
                values[nid] = np.clip(ins[0], lo, hi)
                if collect_signature:
                    signature[nid] = ((ins[0] >= lo) & (ins[0] <= hi)).tobytes()
            elif op is Prim.WHERE:
                values[nid] = np.where(ins[0] != 0, ins[1], ins[2])
                if collect_signature:
                    signature[nid] = (ins[0] != 0).tobytes()
            elif op in (Prim.CMP_EQ, Prim.CMP_NE, Prim.CMP_LT, Prim.CMP_LE,
                        Prim.CMP_GT, Prim.CMP_GE):
                fn = {Prim.CMP_EQ: np.equal, Prim.CMP_NE: np.not_equal,
                      Prim.CMP_LT: np.less, Prim.CMP_LE: np.less_equal,
                      Prim.CMP_GT: np.greater, Prim.CMP_GE: np.greater_equal}[op]
                values[nid] = fn(ins[0], ins[1]).astype(np.float64)
            elif op is Prim.BROADCAST:
                want = tuple(d.extent for d in node.shape)
                values[nid] = np.broadcast_to(ins[0], want)
            elif op is Prim.SUM_TO:
                values[nid] = sum_to(ins[0], tuple(d.extent
                                                   for d in node.shape))
            elif op is Prim.REDUCE_SUM:
                values[nid] = row_sum(ins[0])
            elif op is Prim.REDUCE_MAX:
                values[nid] = row_max(ins[0])
                if collect_signature:
                    signature[nid] = np.argmax(ins[0], axis=-1).tobytes()
            elif op is Prim.REDUCE_ABSSUM:
                values[nid] = row_abssum(ins[0])
                if collect_signature:
                    signature[nid] = (ins[0] >= 0).tobytes()
            elif op is Prim.MATMUL_NN:
                values[nid] = mm_nn(ins[0], ins[1])
            elif op is Prim.MATMUL_NT:
                values[nid] = mm_nt(ins[0], ins[1])
            elif op is Prim.MATMUL_TN:
                values[nid] = mm_tn(ins[0], ins[1])
            elif op is Prim.SLICE_SEQ:
                t = node.params[0]
                values[nid] = ins[0][..., t:t + 1, :]
            elif op is Prim.PAD_SEQ:
                t, extent, _kind = node.params
                out = np.zeros(ins[0].shape[:-2] + (extent,)
                               + ins[0].shape[-1:])
                out[..., t:t + 1, :] = ins[0]
                values[nid] = out
            elif op is Prim.FIRST_MAX_MASK:
                values[nid] = _first_max_mask(ins[0])
                if collect_signature:
                    signature[nid] = np.argmax(ins[0], axis=-1).tobytes()
            else:  # pragma: no cover
                raise GraphError("unhandled primitive", op=op.name)
    return EvalResult(values, signature)


# ─────────────────────────── problem instances ───────────────────────────

_KEY_MASK = (1 << 64) - 1


def philox_key(seed: int, role: int) -> int:
    return ((seed & _KEY_MASK) << 32) + role


def _rng(seed: int, role: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=philox_key(seed, role)))


def _fill(desc, dims, seed: int, role: int) -> np.ndarray:
    extents = tuple(d.extent for d in desc.resolve_shape(dims))
    if desc.fill == "uniform":
        return _rng(seed, role).uniform(-1.0, 1.0, size=extents)
    if desc.fill == "unit":
        u = _rng(seed, role).uniform(-1.0, 1.0, size=extents)
        return 0.5 + 0.45 * u
    if desc.fill == "constant_decay":
        g = np.asarray(desc.fill_params["gamma"], dtype=np.float64)
        return np.broadcast_to(g[None, :, None, None], extents).copy()
    if desc.fill == "causal_decay_mask":
        g = np.asarray(desc.fill_params["gamma"], dtype=np.float64)
        i = np.arange(dims.seq_q)[:, None]
        j = np.arange(dims.seq_k)[None, :]
        delta = (i - j).astype(np.float64)
        out = np.zeros((1, dims.heads, dims.seq_q, dims.seq_k))
        with np.errstate(**_ERRSTATE):
            for h in range(dims.heads):
                out[0, h] = np.where(delta >= 0,
                                     g[h] ** np.maximum(delta, 0.0), 0.0)
        return out
    if desc.fill == "index_q":
        return np.arange(dims.seq_q, dtype=np.float64).reshape(1, 1, -1, 1)
    if desc.fill == "index_k":
        return np.arange(dims.seq_k, dtype=np.float64).reshape(1, 1, 1, -1)
    raise InputError("unknown fill policy", fill=desc.fill, name=desc.name)


@dataclass
class ProblemInstance:
    spec: AttentionSpec
    seed: int
    arrays: dict[str, np.ndarray]


def generate(spec: AttentionSpec, seed: int) -> ProblemInstance:
    """Deterministic inputs for one variant instance.

    Each tensor gets its own counter-based stream keyed by
    (seed << 32) + role, with roles q=0, k=1, v=2 and extras numbered
    from 3 in declaration order, so adding an extra never shifts the
    q/k/v data.
    """
    arrays: dict[str, np.ndarray] = {}
    role = 0
    for desc in spec.input_descriptors():
        if desc.name in ("q", "k", "v"):
            r = {"q": 0, "k": 1, "v": 2}[desc.name]
        elif desc.name in ("qidx", "kidx"):
            r = -1  # deterministic fills, no stream consumed
        else:
            r = 3 + role
            role += 1
        arrays[desc.name] = _fill(desc, spec.dims, seed, max(r, 0))
    return ProblemInstance(spec, seed, arrays)


def _check_output(out: np.ndarray, what: str) -> np.ndarray:
    if np.isnan(out).any():
        raise NanError("output contains NaN", path=what,
                       count=int(np.isnan(out).sum()))
    return out


# ─────────────────────────── parallel executors ───────────────────────────


def run_naive_parallel(spec: AttentionSpec,
                       arrays: dict[str, np.ndarray]) -> np.ndarray:
    """Whole-matrix dense reference: the variant graph evaluated as-is."""
    pat = build_parallel(spec)
    res = evaluate(pat.graph, arrays)
    return _check_output(np.asarray(res.values[pat.output]), "naive")


def _blocks(n: int, b: int) -> list[slice]:
    return [slice(i, min(i + b, n)) for i in range(0, n, b)]


def _block_view(arr: np.ndarray, shape: Shape, qs: slice, ks: slice):
    idx: list[slice] = [slice(None)] * 4
    for ax, d in enumerate(shape):
        if d.kind is DimKind.SEQ_Q and d.extent > 1:
            idx[ax] = qs
        elif d.kind is DimKind.SEQ_K and d.extent > 1:
            idx[ax] = ks
    return arr[tuple(idx)]


def run_tiled_parallel(spec: AttentionSpec, arrays: dict[str, np.ndarray],
                       block_q: int = 64, block_k: int = 64) -> np.ndarray:
    """Blockwise execution of a parallel variant.

    Scores are produced one (block_q, block_k) tile at a time; an online
    row normalization carries its row scales across k blocks and
    rescales the accumulator, exactly the dataflow a fused kernel uses.
    A direct-only normalization needs complete rows, so the k dimension
    collapses to a single block for it.
    """
    if spec.pattern is not Pattern.PARALLEL:
        raise InputError("variant is not a parallel-pattern variant",
                         variant=spec.name)
    spec.validate()
    if block_q < 1 or block_k < 1:
        raise InputError("block sizes must be positive",
                         block_q=block_q, block_k=block_k)
    dims = spec.dims
    consts = dims.const_env()
    descs = {d.name: d for d in spec.input_descriptors()}
    shapes = {n: d.resolve_shape(dims) for n, d in descs.items()}

    full_env: dict[str, object] = {**consts, **arrays}
    qm = (eval_expr(spec.q_mod.expr, {**full_env, "q": arrays["q"]})
          if spec.q_mod else arrays["q"])
    km = (eval_expr(spec.k_mod.expr, {**full_env, "k": arrays["k"]})
          if spec.k_mod else arrays["k"])
    vm = (eval_expr(spec.v_mod.expr, {**full_env, "v": arrays["v"]})
          if spec.v_mod else arrays["v"])
    qm, km, vm = (np.asarray(a, dtype=np.float64) for a in (qm, km, vm))

    rn = spec.rownorm
    online = rn if isinstance(rn, OnlineRowNorm) else None
    direct_only = rn if isinstance(rn, DirectRowNorm) else None
    if direct_only is not None:
        block_k = dims.seq_k

    b, h = dims.batch, dims.heads
    out = np.zeros((b, h, dims.seq_q, dims.d_v))
    extras = [n for n in descs if n not in ("q", "k", "v")]

    with np.errstate(**_ERRSTATE):
        for qs in _blocks(dims.seq_q, block_q):
            bq = qs.stop - qs.start
            acc = np.zeros((b, h, bq, dims.d_v))
            scales: dict[str, np.ndarray] = {}
            if online:
                for name, fn in online.prologue:
                    val = eval_expr(fn.expr, dict(consts))
                    scales[name] = np.full((b, h, bq, 1), val)
            for ks in _blocks(dims.seq_k, block_k):
                s = mm_nt(qm[..., qs, :], km[..., ks, :])
                env: dict[str, object] = dict(consts)
                for name in extras:
                    env[name] = _block_view(arrays[name], shapes[name], qs, ks)
                for m in spec.score_mods:
                    env["s"] = s
                    s = np.asarray(eval_expr(m.expr, env), dtype=np.float64)
                if online:
                    fenv: dict[str, object] = {**consts, **scales, "s": s}
                    for name, fn in online.fwd:
                        fenv[name] = eval_expr(fn.expr, fenv)
                    p = np.asarray(fenv["scores"], dtype=np.float64)
                    r = fenv["rescale"]
                    acc = acc * r + mm_nn(p, vm[..., ks, :])
                    scales = {name: np.asarray(fenv[name]) * np.ones((b, h, bq, 1))
                              for name in online.rowscales}
                elif direct_only:
                    s = np.asarray(eval_expr(direct_only.body.expr,
                                             {**consts, "s": s}), np.float64)
                    acc = acc + mm_nn(s, vm[..., ks, :])
                else:
                    acc = acc + mm_nn(s, vm[..., ks, :])
            if online:
                epi_env: dict[str, object] = {**consts, **scales, "acc": acc}
                acc = np.asarray(eval_expr(online.epilogue.expr, epi_env),
                                 np.float64)
            out[..., qs, :] = acc

    if spec.output_mod:
        out = np.asarray(eval_expr(spec.output_mod.expr,
                                   {**full_env, "o": out}), np.float64)
    return _check_output(out, "tiled")


# ─────────────────────────── recurrent executors ───────────────────────────


def _premod_qkv(spec: AttentionSpec, arrays: dict[str, np.ndarray]):
    consts = spec.dims.const_env()
    env: dict[str, object] = {**consts, **arrays}
    qm = (eval_expr(spec.q_mod.expr, {**env, "q": arrays["q"]})
          if spec.q_mod else arrays["q"])
    km = (eval_expr(spec.k_mod.expr, {**env, "k": arrays["k"]})
          if spec.k_mod else arrays["k"])
    vm = (eval_expr(spec.v_mod.expr, {**env, "v": arrays["v"]})
          if spec.v_mod else arrays["v"])
    return (np.asarray(qm, np.float64) * np.ones_like(arrays["q"]),
            np.asarray(km, np.float64) * np.ones_like(arrays["k"]),
            np.asarray(vm, np.float64) * np.ones_like(arrays["v"]))


def run_step_recurrent(spec: AttentionSpec,
                       arrays: dict[str, np.ndarray]) -> np.ndarray:
    """Literal stepwise recurrence; the ground truth for chunking."""
    if spec.pattern is not Pattern.RECURRENT:
        raise InputError("variant is not a recurrent-pattern variant",
                         variant=spec.name)
    spec.validate()
    dims = spec.dims
    consts = dims.const_env()
    qm, km, vm = _premod_qkv(spec, arrays)
    extras = [e.name for e in spec.extra_inputs]
    h = np.zeros((dims.batch, dims.heads, dims.d_qk, dims.d_v))
    out = np.zeros((dims.batch, dims.heads, dims.seq_q, dims.d_v))
    with np.errstate(**_ERRSTATE):
        for t in range(dims.seq_q):
            env: dict[str, object] = dict(consts)
            for name in extras:
                env[name] = arrays[name][..., t:t + 1, :]
            if spec.h_mod:
                h = np.asarray(eval_expr(spec.h_mod.expr, {**env, "h": h}),
                               np.float64) * np.ones_like(h)
            h = h + mm_tn(km[..., t:t + 1, :], vm[..., t:t + 1, :])
            out[..., t:t + 1, :] = mm_nn(qm[..., t:t + 1, :], h)
    if spec.output_mod:
        env = {**consts, **arrays, "o": out}
        out = np.asarray(eval_expr(spec.output_mod.expr, env), np.float64)
    return _check_output(out, "step")


def run_chunk_recurrent(spec: AttentionSpec, arrays: dict[str, np.ndarray],
                        chunk: int) -> np.ndarray:
    """Chunked recurrence.

    Requires h_mod to factor as h times a per-step scale.  Within a
    chunk the update telescopes: with local steps 0..C-1, scales s_i,
    and D[i,u] = prod of s over u+1..i,

        o_i = (cp_i * q_i) h_in + sum_u D[i,u] (q_i . k_u) v_u
        h_out = cp_{C-1} h_in + sum_u D[C-1,u] k_u^T v_u

    D builds row by row (D[i,:i] = D[i-1,:i] * s_i, D[i,i] = 1) and cp
    is the running forward product, so no ratios or logarithms appear
    and decay underflow cannot poison neighbouring steps.
    """
    if spec.pattern is not Pattern.RECURRENT:
        raise InputError("variant is not a recurrent-pattern variant",
                         variant=spec.name)
    spec.validate()
    if chunk < 1:
        raise InputError("chunk must be positive", chunk=chunk)
    scale_expr = diagonal_scale(spec.h_mod)
    if scale_expr is None:
        raise UnsupportedError(
            "h_mod does not factor as h times a per-step scale; "
            "only stepwise execution applies", h_mod=spec.h_mod.source)
    dims = spec.dims
    consts = dims.const_env()
    qm, km, vm = _premod_qkv(spec, arrays)

    # per-step scale, materialized [batch, heads, seq, 1]
    env: dict[str, object] = {**consts, **arrays}
    sc = np.asarray(eval_expr(scale_expr, env), np.float64)
    sc = sc * np.ones((dims.batch, dims.heads, dims.seq_k, 1))

    b, hh = dims.batch, dims.heads
    h = np.zeros((b, hh, dims.d_qk, dims.d_v))
    out = np.zeros((b, hh, dims.seq_q, dims.d_v))
    with np.errstate(**_ERRSTATE):
        for cs in _blocks(dims.seq_q, chunk):
            c = cs.stop - cs.start
            qc, kc, vc = qm[..., cs, :], km[..., cs, :], vm[..., cs, :]
            scc = sc[..., cs, :]                      # [b, h, c, 1]
            dmat = np.zeros((b, hh, c, c))
            dmat[..., 0, 0] = 1.0
            for i in range(1, c):
                dmat[..., i, :i] = dmat[..., i - 1, :i] * scc[..., i, :]
                dmat[..., i, i] = 1.0
            cp = np.ones((b, hh, c, 1))
            cp[..., 0, :] = scc[..., 0, :]
            for i in range(1, c):
                cp[..., i, :] = cp[..., i - 1, :] * scc[..., i, :]
            a = mm_nt(qc, kc) * dmat
            intra = mm_nn(a, vc)
            inter = mm_nn(qc * cp, h)
            out[..., cs, :] = intra + inter
            w = dmat[..., c - 1:c, :]                 # [b, h, 1, c]
            w = np.swapaxes(w, -1, -2)                # [b, h, c, 1]
            h = cp[..., c - 1, :][..., None] * h + mm_tn(kc * w, vc)
    if spec.output_mod:
        env = {**consts, **arrays, "o": out}
        out = np.asarray(eval_expr(spec.output_mod.expr, env), np.float64)
    return _check_output(out, "chunk")


# ─────────────────────────── gradient checking ───────────────────────────


def _loss_graph(spec: AttentionSpec):
    if spec.pattern is Pattern.PARALLEL:
        pat = build_parallel(spec)
    else:
        pat = build_recurrent(spec).unroll()
    return pat


def autodiff_grads(spec: AttentionSpec, arrays: dict[str, np.ndarray],
                   wrt: list[str] | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of loss = sum(output)."""
    bg = derive_backward(spec, wrt)
    res = evaluate(bg.graph, arrays)
    out = {}
    for name, gid in bg.grads.items():
        want = arrays[name].shape
        out[name] = np.broadcast_to(np.asarray(res.values[gid]), want).copy()
    return out


@dataclass
class GradReport:
    name: str
    checked: int
    excluded: int
    max_rel_err: float
    worst_coord: tuple | None


def finite_diff_check(spec: AttentionSpec, arrays: dict[str, np.ndarray],
                      wrt: list[str] | None = None, eps: float = 1e-5,
                      rel_tol: float = 1e-5,
                      sample_per_tensor: int | None = None,
                      seed: int = 0) -> tuple[bool, list[GradReport]]:
    """Central-difference check of the reverse-mode gradients.

    Each probed coordinate evaluates loss at x±eps.  When the two
    perturbed runs take different branches (max/min/where/clamp/abs or a
    row-max argmax flips) the coordinate sits on a kink where a two
    sided difference is meaningless, so it is skipped and counted.  In
    exhaustive mode skipped coordinates are simply excluded; in sampled
    mode each one is replaced by the next coordinate of a seeded
    permutation until the sample quota is met or the tensor runs out.
    rel err = |ad - fd| / max(1, |fd|, |ad|).
    """
    pat = _loss_graph(spec)
    ad = autodiff_grads(spec, arrays, wrt)
    reports: list[GradReport] = []
    ok = True
    for name, grad in ad.items():
        arr = arrays[name]
        coords = list(np.ndindex(arr.shape))
        quota = None
        if sample_per_tensor is not None and len(coords) > sample_per_tensor:
            rng = _rng(seed, 9000 + len(reports))
            perm = rng.permutation(len(coords))
            coords = [coords[i] for i in perm]
            quota = sample_per_tensor
        checked = excluded = 0
        max_err = 0.0
        worst = None
        for coord in coords:
            if quota is not None and checked >= quota:
                break
            base = arr[coord]
            arr[coord] = base + eps
            plus = evaluate(pat.graph, arrays, collect_signature=True)
            arr[coord] = base - eps
            minus = evaluate(pat.graph, arrays, collect_signature=True)
            arr[coord] = base
            if plus.signature != minus.signature:
                excluded += 1
                continue
            lp = float(np.sum(plus.values[pat.output]))
            lm = float(np.sum(minus.values[pat.output]))
            fd = (lp - lm) / (2.0 * eps)
            a = float(grad[coord])
            err = abs(a - fd) / max(1.0, abs(fd), abs(a))
            checked += 1
            if err > max_err:
                max_err, worst = err, coord
        if max_err > rel_tol:
            ok = False
        reports.append(GradReport(name, checked, excluded, max_err, worst))
    return ok, reports


# ─────────────────────────── divergence report ───────────────────────────


def max_abs_divergence(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise InputError("cannot compare outputs of different shapes",
                         a=a.shape, b=b.shape)
    return float(np.max(np.abs(a - b))) if a.size else 0.0
