"""End-to-end acceptance suite.

Each test here is one headline pledge of the package, run at its stated
tolerance; `pytest -v tests/test_acceptance.py` prints one pass/fail
line per pledge.  Everything is checked against independent references:
dense 64-bit executions, literal stepwise recurrences, exhaustive
scheduler enumeration, hand-worked rows, and frozen kernel snapshots.
"""

import itertools
import json
import random
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from jsonschema import Draft202012Validator

from attnforge.attention import (AttentionSpec, Dims, Pattern, builtin,
                                 BUILTIN_NAMES)
from attnforge.engine import (finite_diff_check, generate,
                              max_abs_divergence, run_chunk_recurrent,
                              run_naive_parallel, run_step_recurrent,
                              run_tiled_parallel)
from attnforge.errors import NoFeasiblePlanError
from attnforge.lowering import (assemble_kernel, bind_executable,
                                code_generation, kernel_buffers,
                                make_scheduling_task)
from attnforge.scheduling import (Candidate, DeviceConfig, ExecutionPlan,
                                  MemoryLocation, TileShape,
                                  brute_force_schedule, brute_force_space,
                                  compute_memory_constraint,
                                  device_from_dict,
                                  infer_possible_tile_configs,
                                  tile_config_scheduling)

from conftest import DATA, SNAPSHOTS, load_packaged_device, packaged

PARALLEL_BUILTINS = ("softmax", "softmax-deepseek", "softmax-diff",
                     "sigmoid", "relu", "retention-parallel")
RECURRENT_BUILTINS = ("retention-recurrent", "gated-retention",
                      "mamba2-ssm")


def _as_candidate(plan: ExecutionPlan) -> Candidate:
    return Candidate(plan.tile, dict(plan.placements), dict(plan.stages))


def _tiled_matches_naive(spec, seeds, blocks, tol):
    worst = 0.0
    for seed in seeds:
        arrays = generate(spec, seed).arrays
        ref = run_naive_parallel(spec, arrays)
        for bn in blocks:
            got = run_tiled_parallel(spec, arrays, block_q=64, block_k=bn)
            worst = max(worst, max_abs_divergence(got, ref))
    assert worst <= tol, f"{spec.name}: worst divergence {worst:.3e}"
    return worst


# 1 ─ online normalization against the dense reference


def test_softmax_tiled_equals_dense_for_twenty_seeds_and_three_blocks():
    spec = builtin("softmax", batch=1, heads=2, seq_q=128, seq_k=128)
    assert (spec.dims.d_qk, spec.dims.d_v) == (128, 128)
    _tiled_matches_naive(spec, range(1, 21), (16, 48, 128), 1e-10)


# 2 ─ non-square head dims, no padding anywhere


def test_nonsquare_head_dims_pass_with_unpadded_buffers():
    for name, dqk, dv in (("softmax-deepseek", 192, 128),
                          ("softmax-diff", 128, 256)):
        spec = builtin(name, batch=1, heads=2, seq_q=128, seq_k=128)
        assert (spec.dims.d_qk, spec.dims.d_v) == (dqk, dv)
        _tiled_matches_naive(spec, range(1, 21), (16, 48, 128), 1e-10)

        # every per-tile buffer keeps its own head width: nothing is
        # padded out to max(dqk, dv)
        for m, n in ((64, 16), (64, 48), (64, 128)):
            tile = TileShape(m, n)
            for buf in kernel_buffers(spec):
                extents = tuple(d.extent for d in buf.shape_fn(tile))[-2:]
                assert extents[0] in (m, n, dqk, 1)
                assert extents[1] in (dqk, dv, n, 1)
                assert extents[0] * extents[1] <= max(m, n) * max(dqk, dv)
            widths = {b.name: tuple(d.extent
                                    for d in b.shape_fn(tile))[-1]
                      for b in kernel_buffers(spec)}
            assert widths["q_tile"] == dqk and widths["k_tile"] == dqk
            assert widths["v_tile"] == dv and widths["acc"] == dv
            assert widths["out_tile"] == dv and widths["scores"] == n


# 3 ─ custom parallel variants and the hand-worked normalization rows


def test_custom_parallel_variants_match_reference_and_hand_rows():
    for name in ("sigmoid", "relu", "retention-parallel"):
        spec = builtin(name, batch=1, heads=2, seq_q=128, seq_k=128,
                       d_qk=64, d_v=64)
        _tiled_matches_naive(spec, range(1, 6), (16, 48, 128), 1e-10)

    rn = builtin("retention-parallel").rownorm
    hand = AttentionSpec(name="hand", pattern=Pattern.PARALLEL,
                         dims=Dims(1, 1, 1, 2, 1, 2), rownorm=rn)

    def rows(col):
        arrays = {"q": np.array([[[[1.0]]]]),
                  "k": np.array(col).reshape(1, 1, 2, 1),
                  "v": np.eye(2).reshape(1, 1, 2, 2)}
        naive = run_naive_parallel(hand, arrays).ravel()
        tiled = run_tiled_parallel(hand, arrays, block_q=1,
                                   block_k=1).ravel()
        np.testing.assert_allclose(naive, tiled, atol=1e-15)
        return naive

    # abssum 2.5 divides the row; abssum 0.5 hits the clamp floor of 1
    np.testing.assert_allclose(rows([0.5, -2.0]), [0.2, -0.8], atol=1e-15)
    np.testing.assert_allclose(rows([0.3, 0.2]), [0.3, 0.2], atol=1e-15)


# 4 ─ chunked recurrences against the literal stepwise execution


def test_recurrent_chunking_equals_stepwise_for_all_chunk_sizes():
    for name in RECURRENT_BUILTINS:
        spec = builtin(name, seq=128)
        worst = 0.0
        for seed in range(1, 11):
            arrays = generate(spec, seed).arrays
            ref = run_step_recurrent(spec, arrays)
            for chunk in (1, 16, 48, 128):
                got = run_chunk_recurrent(spec, arrays, chunk=chunk)
                worst = max(worst, max_abs_divergence(got, ref))
        assert worst <= 1e-10, f"{name}: worst divergence {worst:.3e}"


# 5 ─ the same math through both patterns


def test_unnormalized_retention_agrees_across_patterns():
    for gamma in (0.9, 0.99):
        par = builtin("retention-parallel", seq=256, gamma=gamma,
                      normalized=False)
        rec = builtin("retention-recurrent", seq=256, gamma=gamma)
        for seed in (1, 2):
            p_arrays = generate(par, seed).arrays
            r_arrays = generate(rec, seed).arrays
            for t in ("q", "k", "v"):
                assert np.array_equal(p_arrays[t], r_arrays[t])
            p_out = run_naive_parallel(par, p_arrays)
            r_out = run_chunk_recurrent(rec, r_arrays, chunk=64)
            err = max_abs_divergence(p_out, r_out)
            assert err <= 1e-8, f"gamma={gamma} seed={seed}: {err:.3e}"

    # one literal stepwise cross-check at a shorter length
    par = builtin("retention-parallel", seq=128, gamma=0.9,
                  normalized=False)
    rec = builtin("retention-recurrent", seq=128, gamma=0.9)
    err = max_abs_divergence(
        run_naive_parallel(par, generate(par, 3).arrays),
        run_step_recurrent(rec, generate(rec, 3).arrays))
    assert err <= 1e-8


# 6 ─ traced gradients against central finite differences


def test_autodiff_matches_central_differences_on_every_builtin():
    expected_wrt = {
        "mamba2-ssm": {"q", "k", "v", "gate", "decay"},
        "gated-retention": {"q", "k", "v", "gate"},
    }
    for name in sorted(BUILTIN_NAMES):
        spec = builtin(name, batch=1, heads=1, seq_q=8, seq_k=8,
                       d_qk=4, d_v=4)
        arrays = generate(spec, 5).arrays
        ok, reports = finite_diff_check(spec, arrays, eps=1e-5,
                                        rel_tol=1e-5,
                                        sample_per_tensor=None)
        tensors = {r.name for r in reports}
        assert expected_wrt.get(name, {"q", "k", "v"}) == tensors
        for r in reports:
            assert r.max_rel_err <= 1e-5, \
                f"{name}.{r.name}: rel err {r.max_rel_err:.3e}"
        assert ok


# 7 ─ two-layer scheduler against exhaustive enumeration


def test_scheduler_equals_exhaustive_search_on_toy_devices():
    fixture = json.loads((SNAPSHOTS / "scheduler_fixture.json").read_text())
    for dev_name in ("toy-alpha", "toy-beta", "toy-gamma"):
        fx = fixture[dev_name]
        device = load_packaged_device(dev_name)
        spec = builtin(fx["variant"], batch=1, **fx["overrides"])
        task = make_scheduling_task(spec)
        space = brute_force_space(task, device)
        assert space == fx["space"] and space <= 10 ** 5
        plan = tile_config_scheduling(task, device)
        ref = brute_force_schedule(task, device)
        assert plan.cost == ref.cost
        assert plan.cost == pytest.approx(fx["two_layer_cost"], rel=1e-12)
        for p in (plan, ref):
            assert compute_memory_constraint(p.tile, task.tensors,
                                             _as_candidate(p),
                                             device.capacity)

    # the recorded counterexample: greedy demotion loses to exhaustive
    fx = fixture["demotion-trap"]
    device = load_packaged_device("demotion-trap")
    spec = builtin(fx["variant"], batch=1, **fx["overrides"])
    task = make_scheduling_task(spec)
    greedy = tile_config_scheduling(task, device)
    exact = brute_force_schedule(task, device)
    assert greedy.cost == pytest.approx(fx["two_layer_cost"], rel=1e-12)
    assert exact.cost == pytest.approx(fx["brute_cost"], rel=1e-12)
    assert exact.cost < greedy.cost


# 8 ─ scheduler soundness over randomized problems


def test_scheduler_soundness_on_500_random_graph_device_pairs():
    rng = random.Random(20240816)
    planned = 0
    infeasible = 0
    for _ in range(500):
        name = rng.choice(sorted(BUILTIN_NAMES))
        seq_q = rng.choice((16, 32, 48))
        seq_k = seq_q if builtin(name).pattern is Pattern.RECURRENT \
            else rng.choice((16, 32, 48))
        spec = builtin(name, batch=1, heads=rng.choice((1, 2)),
                       seq_q=seq_q, seq_k=seq_k,
                       d_qk=rng.choice((4, 8, 16)),
                       d_v=rng.choice((4, 8, 16)))
        device = DeviceConfig(
            name="random", basetile=TileShape(16, 16),
            capacity={
                MemoryLocation.REGISTER: rng.choice(
                    (1024, 4096, 16384, 65536)),
                MemoryLocation.SHARED: rng.choice(
                    (8192, 65536, 524288)),
                MemoryLocation.GLOBAL: 2 ** 30,
            },
            bandwidth={
                MemoryLocation.REGISTER: 10 ** rng.uniform(11.0, 12.0),
                MemoryLocation.SHARED: 10 ** rng.uniform(9.5, 10.5),
                MemoryLocation.GLOBAL: 10 ** rng.uniform(8.5, 9.2),
            },
            throughput=10 ** rng.uniform(11.5, 12.5),
            max_stages=rng.choice((1, 2, 3)))
        task = make_scheduling_task(spec)
        trace: list = []
        try:
            plan = tile_config_scheduling(task, device, trace=trace)
        except NoFeasiblePlanError:
            infeasible += 1
            continue
        planned += 1
        assert compute_memory_constraint(plan.tile, task.tensors,
                                         _as_candidate(plan),
                                         device.capacity)
        for _, frm, to in trace:
            assert to is frm.lower()  # every demotion steps down a tier
        again = tile_config_scheduling(task, device, workers=1)
        fanned = tile_config_scheduling(task, device, workers=4)
        assert again == plan == fanned
    assert planned >= 100  # the sweep must actually exercise planning
    assert planned + infeasible == 500


# 9 ─ lowering preserves semantics; emission is frozen


def _random_valid_plans(spec, device, count, rng):
    task = make_scheduling_task(spec)
    configs = infer_possible_tile_configs(
        device.basetile, task.seq_q, task.seq_k, square=task.square)
    names = [t.name for t in task.tensors]
    plans = []
    while len(plans) < count:
        tile = rng.choice(configs)
        placements = {n: rng.choice((MemoryLocation.REGISTER,
                                     MemoryLocation.SHARED,
                                     MemoryLocation.GLOBAL))
                      for n in names}
        stages = {n: (rng.randint(1, device.max_stages)
                      if placements[n] is MemoryLocation.SHARED else 1)
                  for n in names}
        cand = Candidate(tile, placements, stages)
        if not compute_memory_constraint(tile, task.tensors, cand,
                                         device.capacity):
            continue
        plans.append(ExecutionPlan(
            tile=tile,
            placements=tuple((n, placements[n]) for n in names),
            stages=tuple((n, stages[n]) for n in names), cost=0.0))
    return plans


def test_bound_kernels_match_oracles_and_frozen_snapshots():
    desk = load_packaged_device("desk")
    rng = random.Random(99)
    for name in sorted(BUILTIN_NAMES):
        spec = builtin(name, scale=0.03125)
        arrays = generate(spec, 17).arrays
        if spec.pattern is Pattern.PARALLEL:
            ref = run_naive_parallel(spec, arrays)
        else:
            ref = run_step_recurrent(spec, arrays)
        for plan in _random_valid_plans(spec, desk, 3, rng):
            ir = assemble_kernel(spec, plan.tile)
            got = bind_executable(ir, plan).run(arrays)
            err = max_abs_divergence(got, ref)
            assert err <= 1e-10, (f"{name} tile {plan.tile.m}x"
                                  f"{plan.tile.n}: {err:.3e}")
            assert code_generation(ir, plan) == code_generation(ir, plan)

        task = make_scheduling_task(spec)
        chosen = tile_config_scheduling(task, desk)
        text = code_generation(assemble_kernel(spec, chosen.tile), chosen)
        frozen = (SNAPSHOTS / "kernels" / f"{name}.kernel").read_text()
        assert text == frozen, f"{name}: emitted kernel drifted"


# 10 ─ the command-line contract, end to end


def test_cli_contract_exit_codes_and_json_schemas():
    validator = Draft202012Validator(
        json.loads(packaged("schemas/report.schema.json")))
    root = Path(__file__).resolve().parents[1]

    def run(*args):
        return subprocess.run([sys.executable, "-m", "attnforge", *args],
                              capture_output=True, text=True,
                              cwd=str(root))

    tiny = ("--batch", "1", "--heads", "1", "--seqq", "16", "--seqk",
            "16", "--dqk", "4", "--dv", "4")
    happy = [
        ("list",),
        ("check", "--variant", "relu", *tiny, "--seed", "1"),
        ("gradcheck", "--variant", "relu", "--batch", "1", "--heads",
         "1", "--seqq", "8", "--seqk", "8", "--dqk", "4", "--dv", "4",
         "--samples", "6"),
        ("schedule", "--variant", "relu", *tiny),
        ("emit", "--variant", "relu", *tiny),
        ("bench", "--variant", "relu", *tiny, "--repeats", "1"),
    ]
    for args in happy:
        plain = run(*args)
        assert plain.returncode == 0, (args, plain.stdout, plain.stderr)
        as_json = run(*args, "--json")
        assert as_json.returncode == 0
        body = json.loads(as_json.stdout)
        validator.validate(body)
        assert body["command"] == args[0] and body["ok"] is True

    listing = run("list")
    assert "softmax-deepseek  parallel  dqk=192 dv=128" in listing.stdout

    malformed = run("check", "--file", str(DATA / "truncated.json"),
                    "--json")
    assert malformed.returncode == 2
    body = json.loads(malformed.stdout)
    validator.validate(body)
    assert body["exit_code"] == 2 and body["error"]["kind"] == "schema"

    starved = run("schedule", "--variant", "relu", *tiny, "--device",
                  str(DATA / "zero-capacity.json"), "--json")
    assert starved.returncode == 1
    body = json.loads(starved.stdout)
    validator.validate(body)
    assert body["error"]["kind"] == "no-feasible-plan"
