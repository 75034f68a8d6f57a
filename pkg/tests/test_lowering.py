"""Kernel assembly, text emission, and the bound tiled executor.

Statement templates are validated by running the bound kernels against
the dense reference executor, and the emitted text is pinned to
snapshots so any change to the dialect is a conscious one.
"""

import hashlib
import json

import numpy as np
import pytest

from attnforge.attention import builtin
from attnforge.engine import (generate, max_abs_divergence,
                              run_naive_parallel, run_step_recurrent)
from attnforge.errors import GraphError, InputError, UnsupportedError
from attnforge.lowering import (assemble_kernel, bind_executable,
                                code_generation, expression_generation,
                                kernel_buffers, lower_backward,
                                make_scheduling_task)
from attnforge.scheduling import (ExecutionPlan, MemoryLocation, TileShape,
                                  tile_config_scheduling)
from attnforge.variantfile import spec_from_text

from conftest import SNAPSHOTS, load_packaged_device, tiny_builtin

R = MemoryLocation.REGISTER


def allreg_plan(spec, tile):
    names = [b.name for b in kernel_buffers(spec)]
    return ExecutionPlan(tile=tile,
                         placements=tuple((n, R) for n in names),
                         stages=tuple((n, 1) for n in names), cost=0.0)


def emit(spec, tile):
    plan = allreg_plan(spec, tile)
    return code_generation(assemble_kernel(spec, tile), plan), plan


# ── buffer census vs emitted text ──


@pytest.mark.parametrize("name", ["softmax", "relu", "gated-retention",
                                  "mamba2-ssm"])
def test_buffer_lines_match_census(name):
    spec = tiny_builtin(name)
    tile = TileShape(4, 4)
    text, _ = emit(spec, tile)
    census = [b.name for b in kernel_buffers(spec)]
    listed = [ln.split()[1] for ln in text.splitlines()
              if ln.strip().startswith("buffer ")]
    assert listed == census


def test_buffer_extents_are_exact():
    # tile buffers carry the head dimensions with no padding
    spec = builtin("softmax-deepseek", batch=1, heads=1, seq_q=64, seq_k=64)
    tile = TileShape(16, 16)
    extents = {b.name: tuple(d.extent for d in b.shape_fn(tile))[-2:]
               for b in kernel_buffers(spec)}
    assert extents["q_tile"] == (16, 192)
    assert extents["k_tile"] == (16, 192)
    assert extents["v_tile"] == (16, 128)
    assert extents["scores"] == (16, 16)
    assert extents["acc"] == (16, 128)
    assert extents["out_tile"] == (16, 128)


# ── emitted text structure ──


def test_softmax_sections_carry_online_protocol():
    spec = tiny_builtin("softmax", seq_q=16, seq_k=16, d_qk=8, d_v=8)
    text, _ = emit(spec, TileShape(8, 8))
    sections = {}
    current = None
    for ln in text.splitlines():
        s = ln.strip()
        if s.startswith("section "):
            current = s.split()[1]
            sections[current] = []
        elif current and s == "}":
            current = None
        elif current:
            sections[current].append(s)
    prologue = "\n".join(sections["prologue"])
    assert "const(-inf)" in prologue and "const(0)" in prologue
    fwd = "\n".join(sections["fwd"])
    assert "rowreduce.max" in fwd
    assert "exp(" in fwd
    assert "rowreduce.sum" in fwd
    assert "rescale acc by" in fwd
    epilogue = "\n".join(sections["epilogue"])
    assert "cmp_eq(l," in epilogue and "div(acc, l)" in epilogue


def test_recurrent_text_has_decay_table_and_state_update():
    spec = tiny_builtin("gated-retention")
    text, _ = emit(spec, TileShape(4, 4))
    assert "decay_table scale -> dmat cp wvec cp_last" in text
    assert "rescale state by cp_last" in text
    assert "matmul_tn(" in text
    assert "grid none" in text and "loop chunks" in text


def test_emission_is_deterministic():
    spec = tiny_builtin("softmax-diff")
    a, _ = emit(spec, TileShape(4, 4))
    b, _ = emit(spec, TileShape(4, 4))
    assert a == b
    assert a.encode() == b.encode()


def test_scratch_slots_are_reused():
    # the first-fit allocator recycles freed locals inside a section
    spec = tiny_builtin("softmax", seq_q=16, seq_k=16, d_qk=8, d_v=8)
    text, _ = emit(spec, TileShape(8, 8))
    fwd = text.split("section fwd", 1)[1].split("section", 1)[0]
    locals_declared = fwd.count("local t")
    assignments = sum(1 for ln in fwd.splitlines()
                      if "=" in ln and "local" not in ln)
    assert locals_declared < assignments


def test_all_builtins_assemble_and_pass_slot_checks():
    for name in ("softmax", "softmax-deepseek", "softmax-diff", "sigmoid",
                 "relu", "retention-parallel", "gated-retention",
                 "mamba2-ssm", "retention-recurrent"):
        spec = tiny_builtin(name)
        ir = assemble_kernel(spec, TileShape(4, 4))
        for _, seq in ir.all_sections():
            seq.check_slot_safety()


# ── direct-only normalization needs whole key rows ──


DIRECT_VARIANT = """
{
  "name": "direct-softmax",
  "pattern": "parallel",
  "dims": {"batch": 1, "heads": 1, "seq_q": 8, "seq_k": 8,
           "dqk": 4, "dv": 4},
  "rownorm": {"direct":
      "where(reduceMax(s) == -inf, 0, exp(s - reduceMax(s)) / reduceSum(exp(s - reduceMax(s))))"}
}
"""


def test_direct_rownorm_requires_full_rows():
    spec = spec_from_text(DIRECT_VARIANT)
    with pytest.raises(UnsupportedError):
        assemble_kernel(spec, TileShape(4, 4))
    # with whole key rows per tile the same variant lowers and runs
    ir = assemble_kernel(spec, TileShape(4, 8))
    plan = allreg_plan(spec, TileShape(4, 8))
    inst = generate(spec, 3)
    got = bind_executable(ir, plan).run(inst.arrays)
    ref = run_naive_parallel(spec, inst.arrays)
    assert max_abs_divergence(got, ref) <= 1e-10


def test_recurrent_tiles_must_be_square():
    spec = tiny_builtin("retention-recurrent")
    with pytest.raises(InputError):
        assemble_kernel(spec, TileShape(4, 8))


# ── bound executor vs dense reference ──


@pytest.mark.parametrize("name,block", [("softmax", 16), ("relu", 8),
                                        ("retention-parallel", 16)])
def test_bound_parallel_kernel_matches_naive(name, block):
    spec = tiny_builtin(name, seq_q=32, seq_k=32, d_qk=8, d_v=8)
    tile = TileShape(16, block)
    ir = assemble_kernel(spec, tile)
    plan = allreg_plan(spec, tile)
    inst = generate(spec, 11)
    got = bind_executable(ir, plan).run(inst.arrays)
    ref = run_naive_parallel(spec, inst.arrays)
    assert max_abs_divergence(got, ref) <= 1e-10


@pytest.mark.parametrize("name", ["retention-recurrent", "gated-retention",
                                  "mamba2-ssm"])
def test_bound_recurrent_kernel_matches_stepwise(name):
    spec = tiny_builtin(name, seq_q=24, seq_k=24)
    tile = TileShape(8, 8)
    ir = assemble_kernel(spec, tile)
    plan = allreg_plan(spec, tile)
    inst = generate(spec, 7)
    got = bind_executable(ir, plan).run(inst.arrays)
    ref = run_step_recurrent(spec, inst.arrays)
    assert max_abs_divergence(got, ref) <= 1e-10


def test_ragged_edge_blocks_execute_correctly():
    # 24 keys with block 16 leaves a ragged 8-wide tail tile
    spec = tiny_builtin("softmax", seq_q=24, seq_k=24, d_qk=8, d_v=8)
    tile = TileShape(16, 16)
    ir = assemble_kernel(spec, tile)
    plan = allreg_plan(spec, tile)
    inst = generate(spec, 5)
    got = bind_executable(ir, plan).run(inst.arrays)
    ref = run_naive_parallel(spec, inst.arrays)
    assert max_abs_divergence(got, ref) <= 1e-10


def test_plan_must_cover_every_buffer():
    spec = tiny_builtin("relu")
    tile = TileShape(4, 4)
    ir = assemble_kernel(spec, tile)
    plan = ExecutionPlan(tile=tile, placements=(("q_tile", R),),
                         stages=(("q_tile", 1),), cost=0.0)
    with pytest.raises(InputError):
        code_generation(ir, plan)


# ── frozen snapshots ──


@pytest.mark.parametrize("name", ["softmax", "softmax-deepseek",
                                  "softmax-diff", "sigmoid", "relu",
                                  "retention-parallel", "gated-retention",
                                  "mamba2-ssm", "retention-recurrent"])
def test_emitted_kernel_matches_snapshot(name):
    desk = load_packaged_device("desk")
    spec = builtin(name, scale=0.03125)
    task = make_scheduling_task(spec)
    plan = tile_config_scheduling(task, desk)
    text = code_generation(assemble_kernel(spec, plan.tile), plan)
    frozen = (SNAPSHOTS / "kernels" / f"{name}.kernel").read_text()
    assert text == frozen


def test_relu_snapshot_digest_is_pinned():
    text = (SNAPSHOTS / "kernels" / "relu.kernel").read_text()
    digest = hashlib.sha256(text.encode()).hexdigest()
    assert digest == ("c7f97e6386bbcd803740a5405dae8b1e"
                      "7acca92df185f7d64721a357a9ce7dca")


# ── gradient-side lowering ──


def test_backward_graph_lowers_with_named_grad_buffers():
    spec = tiny_builtin("relu")
    seq = lower_backward(spec)
    seq.check_slot_safety()
    targets = {stmt.slot for stmt in seq.stmts if hasattr(stmt, "slot")}
    assert {"d_q", "d_k", "d_v"} <= targets
