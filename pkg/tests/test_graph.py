"""Graph construction, shape inference, and reverse-mode gradients.

Gradient oracles are hand-derived closed forms evaluated with plain
numpy, independent of the graph evaluator.
"""

import numpy as np
import pytest

from attnforge.engine import evaluate
from attnforge.errors import GraphError, ShapeError
from attnforge.graph import (Dim, DimKind, Graph, Prim, backward, extents,
                             topo_sort)

Q = DimKind.SEQ_Q
K = DimKind.SEQ_K
D = DimKind.DIM_QK


def shp(*pairs):
    return tuple(Dim(k, e) for k, e in pairs)


def grad_of(g: Graph, out: int, wrt: list[int], feeds: dict):
    bg, gm = backward(g, out, wrt)
    res = evaluate(bg, feeds)
    return [res.values[gm[n]] for n in wrt]


# ── construction rules ──


def test_ids_are_topological_by_construction():
    g = Graph()
    a = g.placeholder("a", shp((Q, 2), (K, 3)))
    b = g.add(Prim.EXP, a)
    c = g.add(Prim.ADD, a, b)
    assert topo_sort(g) == [a, b, c]


def test_inputs_must_be_earlier_ids():
    g = Graph()
    a = g.placeholder("a", shp((Q, 2), (K, 2)))
    with pytest.raises(GraphError):
        g.add(Prim.EXP, a + 17)


def test_elementwise_broadcast_requires_equal_rank():
    g = Graph()
    a = g.placeholder("a", shp((Q, 2), (K, 3)))
    b = g.placeholder("b", shp((Q, 2),))
    with pytest.raises(ShapeError):
        g.add(Prim.ADD, a, b)


def test_extent_one_broadcasts():
    g = Graph()
    a = g.placeholder("a", shp((Q, 2), (K, 3)))
    b = g.placeholder("b", shp((Q, 2), (DimKind.ONE, 1)))
    c = g.add(Prim.MUL, a, b)
    assert extents(g.shape(c)) == (2, 3)


def test_row_reduction_collapses_trailing_axis():
    g = Graph()
    a = g.placeholder("a", shp((Q, 2), (K, 5)))
    r = g.add(Prim.REDUCE_SUM, a)
    assert extents(g.shape(r)) == (2, 1)


def test_matmul_shapes():
    g = Graph()
    a = g.placeholder("a", shp((Q, 2), (D, 3)))
    b = g.placeholder("b", shp((K, 4), (D, 3)))
    s = g.add(Prim.MATMUL_NT, a, b)
    assert extents(g.shape(s)) == (2, 4)
    v = g.placeholder("v", shp((K, 4), (DimKind.DIM_V, 6)))
    o = g.add(Prim.MATMUL_NN, s, v)
    assert extents(g.shape(o)) == (2, 6)
    t = g.add(Prim.MATMUL_TN, v, v)
    assert extents(g.shape(t)) == (6, 6)


# ── gradients against closed forms ──


def test_grad_mul_div():
    g = Graph()
    a = g.placeholder("a", shp((Q, 2), (K, 2)))
    b = g.placeholder("b", shp((Q, 2), (K, 2)))
    out = g.add(Prim.DIV, a, b)
    g.mark_output(out)
    fa = np.array([[1.0, -2.0], [0.5, 3.0]])
    fb = np.array([[2.0, 4.0], [-1.0, 0.5]])
    ga, gb = grad_of(g, out, [a, b], {"a": fa, "b": fb})
    # d(a/b)/da = 1/b ; d(a/b)/db = -a/b^2
    np.testing.assert_allclose(ga, 1.0 / fb, rtol=1e-15)
    np.testing.assert_allclose(gb, -fa / fb ** 2, rtol=1e-15)


def test_grad_exp_log_tanh_sigmoid():
    fa = np.array([[0.3, -1.2], [2.0, 0.01]])
    for op, d in [
        (Prim.EXP, np.exp(fa)),
        (Prim.LOG, 1.0 / fa),
        (Prim.TANH, 1.0 - np.tanh(fa) ** 2),
        (Prim.SIGMOID,
         (1 / (1 + np.exp(-fa))) * (1 - 1 / (1 + np.exp(-fa)))),
    ]:
        g = Graph()
        a = g.placeholder("a", shp((Q, 2), (K, 2)))
        out = g.add(op, a)
        g.mark_output(out)
        (ga,) = grad_of(g, out, [a], {"a": fa})
        np.testing.assert_allclose(ga, d, rtol=1e-12)


def test_grad_max_ties_route_to_first_operand():
    g = Graph()
    a = g.placeholder("a", shp((Q, 1), (K, 2)))
    b = g.placeholder("b", shp((Q, 1), (K, 2)))
    out = g.add(Prim.MAX, a, b)
    g.mark_output(out)
    feeds = {"a": np.array([[1.0, 5.0]]), "b": np.array([[1.0, 7.0]])}
    ga, gb = grad_of(g, out, [a, b], feeds)
    np.testing.assert_allclose(ga, [[1.0, 0.0]])
    np.testing.assert_allclose(gb, [[0.0, 1.0]])


def test_grad_broadcast_sums_over_expanded_axis():
    g = Graph()
    a = g.placeholder("a", shp((Q, 2), (DimKind.ONE, 1)))
    b = g.placeholder("b", shp((Q, 2), (K, 3)))
    out = g.add(Prim.MUL, a, b)
    g.mark_output(out)
    fa = np.array([[2.0], [-1.0]])
    fb = np.arange(6.0).reshape(2, 3) + 1
    ga, _ = grad_of(g, out, [a, b], {"a": fa, "b": fb})
    np.testing.assert_allclose(ga, fb.sum(axis=1, keepdims=True))


def test_grad_reduce_max_uses_first_argmax_only():
    g = Graph()
    a = g.placeholder("a", shp((Q, 1), (K, 3)))
    out = g.add(Prim.REDUCE_MAX, a)
    g.mark_output(out)
    (ga,) = grad_of(g, out, [a], {"a": np.array([[2.0, 7.0, 7.0]])})
    np.testing.assert_allclose(ga, [[0.0, 1.0, 0.0]])


def test_grad_matmul_trio():
    rng = np.random.default_rng(0)
    fa = rng.uniform(-1, 1, (2, 3))
    fb = rng.uniform(-1, 1, (4, 3))
    fv = rng.uniform(-1, 1, (4, 5))
    g = Graph()
    a = g.placeholder("a", shp((Q, 2), (D, 3)))
    b = g.placeholder("b", shp((K, 4), (D, 3)))
    v = g.placeholder("v", shp((K, 4), (DimKind.DIM_V, 5)))
    s = g.add(Prim.MATMUL_NT, a, b)
    o = g.add(Prim.MATMUL_NN, s, v)
    g.mark_output(o)
    ga, gb, gv = grad_of(g, o, [a, b, v], {"a": fa, "b": fb, "v": fv})
    ones = np.ones((2, 5))
    gs = ones @ fv.T
    np.testing.assert_allclose(ga, gs @ fb, rtol=1e-12)
    np.testing.assert_allclose(gb, gs.T @ fa, rtol=1e-12)
    np.testing.assert_allclose(gv, (fa @ fb.T).T @ ones, rtol=1e-12)


def test_grad_where_routes_by_condition_and_mask_gets_zero():
    g = Graph()
    a = g.placeholder("a", shp((Q, 1), (K, 2)))
    b = g.placeholder("b", shp((Q, 1), (K, 2)))
    zero = g.const(0.0, rank=2)
    cond = g.add(Prim.CMP_GT, a, zero)
    out = g.add(Prim.WHERE, cond, a, b)
    g.mark_output(out)
    feeds = {"a": np.array([[1.0, -1.0]]), "b": np.array([[5.0, 6.0]])}
    ga, gb = grad_of(g, out, [a, b], feeds)
    np.testing.assert_allclose(ga, [[1.0, 0.0]])
    np.testing.assert_allclose(gb, [[0.0, 1.0]])


def test_grad_fanout_accumulates_deterministically():
    # y = a*a + exp(a): dy/da = 2a + exp(a)
    g = Graph()
    a = g.placeholder("a", shp((Q, 1), (K, 2)))
    sq = g.add(Prim.MUL, a, a)
    ex = g.add(Prim.EXP, a)
    out = g.add(Prim.ADD, sq, ex)
    g.mark_output(out)
    fa = np.array([[0.5, -2.0]])
    (ga,) = grad_of(g, out, [a], {"a": fa})
    np.testing.assert_allclose(ga, 2 * fa + np.exp(fa), rtol=1e-15)


def test_backward_is_reproducible_node_for_node():
    g = Graph()
    a = g.placeholder("a", shp((Q, 2), (K, 2)))
    b = g.add(Prim.EXP, a)
    c = g.add(Prim.MUL, a, b)
    g.mark_output(c)
    g1, m1 = backward(g, c, [a])
    g2, m2 = backward(g, c, [a])
    assert m1 == m2
    assert [(n.op, n.inputs, n.params) for n in g1.nodes] == \
           [(n.op, n.inputs, n.params) for n in g2.nodes]


def test_unreached_input_gets_zero_gradient():
    g = Graph()
    a = g.placeholder("a", shp((Q, 1), (K, 2)))
    b = g.placeholder("b", shp((Q, 1), (K, 2)))
    out = g.add(Prim.EXP, a)
    g.mark_output(out)
    _, gb = grad_of(g, out, [a, b],
                    {"a": np.zeros((1, 2)), "b": np.ones((1, 2))})
    np.testing.assert_allclose(gb, [[0.0, 0.0]])


def test_backward_result_is_frozen():
    g = Graph()
    a = g.placeholder("a", shp((Q, 1), (K, 2)))
    out = g.add(Prim.EXP, a)
    g.mark_output(out)
    bg, _ = backward(g, out, [a])
    with pytest.raises(GraphError):
        bg.add(Prim.EXP, a)
