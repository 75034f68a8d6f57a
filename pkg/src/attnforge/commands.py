"""The six operations behind the service and the command line.

Each function returns a finished report dict (see report.py) whose
`exit_code` follows the shared contract: 0 all checks passed, 1 a
semantic or tolerance failure, 2 malformed input.  Raising never crosses
this module's boundary for expected failure classes; callers branch on
the report alone.
"""

from __future__ import annotations

import dataclasses
import hashlib
import importlib.resources
import statistics
import time

from .attention import BUILTIN_DIMS, AttentionSpec, Pattern, builtin
from .engine import (finite_diff_check, generate, max_abs_divergence,
                     run_chunk_recurrent, run_naive_parallel,
                     run_step_recurrent, run_tiled_parallel)
from .errors import ForgeError, InputError, SemanticError
from .lowering import (assemble_kernel, bind_executable, code_generation,
                       make_scheduling_task)
from .report import envelope, error_report
from .scheduling import (BRUTE_FORCE_LIMIT, Candidate, DeviceConfig,
                         ExecutionPlan, brute_force_schedule,
                         brute_force_space, device_from_dict,
                         profile_breakdown, tile_config_scheduling)
from .variantfile import spec_from_text

CHECK_TOL = 1e-10
GRAD_TOL = 1e-5

_OVERRIDE_KEYS = ("batch", "heads", "seq_q", "seq_k", "d_qk", "d_v")


def resolve_variant(variant: str | None, variant_text: str | None,
                    scale: float = 1.0,
                    overrides: dict | None = None) -> AttentionSpec:
    """A builtin by name or a definition file by contents, with dims
    overridden and sequence lengths scaled."""
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    bad = sorted(set(overrides) - set(_OVERRIDE_KEYS))
    if bad:
        raise InputError("unknown dimension overrides", fields=bad)
    if (variant is None) == (variant_text is None):
        raise InputError("exactly one of a variant name or a variant "
                         "file is required")
    if variant is not None:
        return builtin(variant, scale=scale, **overrides)
    spec = spec_from_text(variant_text)
    dims = spec.dims
    repl = dict(overrides)
    if "seq_q" not in repl:
        repl["seq_q"] = max(1, round(dims.seq_q * scale))
    if "seq_k" not in repl:
        repl["seq_k"] = max(1, round(dims.seq_k * scale))
    spec = dataclasses.replace(spec, dims=dataclasses.replace(dims, **repl))
    spec.validate()
    return spec


def resolve_device(device_text: str | None) -> DeviceConfig:
    """A device file by contents, defaulting to the bundled desk model."""
    import json

    from .errors import SchemaError
    if device_text is None:
        ref = importlib.resources.files("attnforge").joinpath(
            "data/devices/desk.json")
        device_text = ref.read_text(encoding="utf-8")
    try:
        doc = json.loads(device_text)
    except json.JSONDecodeError as e:
        raise SchemaError("device file is not valid JSON", detail=str(e))
    return device_from_dict(doc)


def _variant_payload(spec: AttentionSpec) -> dict:
    d = spec.dims
    return {"name": spec.name, "pattern": spec.pattern.value,
            "dims": {"batch": d.batch, "heads": d.heads, "seq_q": d.seq_q,
                     "seq_k": d.seq_k, "dqk": d.d_qk, "dv": d.d_v}}


def _guard(command: str, fn):
    """Run fn() mapping the error families onto the exit-code contract."""
    try:
        return fn()
    except InputError as e:
        return error_report(command, 2, e.kind, e.message, e.context)
    except SemanticError as e:
        return error_report(command, 1, e.kind, e.message, e.context)
    except ForgeError as e:  # base-class fallback, same family as semantic
        return error_report(command, 1, e.kind, e.message, e.context)


# ─────────────────────────────── list ───────────────────────────────


def cmd_list() -> dict:
    def run():
        t0 = time.perf_counter()
        builtins = [_variant_payload(builtin(name))
                    for name in sorted(BUILTIN_DIMS)]
        return envelope("list", True, 0, time.perf_counter() - t0,
                        builtins=builtins)
    return _guard("list", run)


# ─────────────────────────────── check ───────────────────────────────


def cmd_check(variant: str | None = None, variant_text: str | None = None,
              scale: float = 1.0, seed: int = 0,
              blocks: list[int] | None = None,
              chunks: list[int] | None = None,
              overrides: dict | None = None) -> dict:
    def run():
        t0 = time.perf_counter()
        spec = resolve_variant(variant, variant_text, scale, overrides)
        arrays = generate(spec, seed).arrays
        comparisons = []
        ok = True
        if spec.pattern is Pattern.PARALLEL:
            ref = run_naive_parallel(spec, arrays)
            bs = blocks or [min(64, spec.dims.seq_k)]
            bq = min(64, spec.dims.seq_q)
            for b in bs:
                got = run_tiled_parallel(spec, arrays, block_q=bq,
                                         block_k=b)
                err = max_abs_divergence(got, ref)
                good = err <= CHECK_TOL
                ok = ok and good
                comparisons.append({"name": "tiled-vs-naive",
                                    "block_q": bq, "block_k": b,
                                    "max_abs_err": err,
                                    "tolerance": CHECK_TOL, "pass": good})
        else:
            ref = run_step_recurrent(spec, arrays)
            cs = chunks or [min(64, spec.dims.seq_q)]
            for c in cs:
                got = run_chunk_recurrent(spec, arrays, chunk=c)
                err = max_abs_divergence(got, ref)
                good = err <= CHECK_TOL
                ok = ok and good
                comparisons.append({"name": "chunked-vs-step", "chunk": c,
                                    "max_abs_err": err,
                                    "tolerance": CHECK_TOL, "pass": good})
        return envelope("check", ok, 0 if ok else 1,
                        time.perf_counter() - t0,
                        variant=_variant_payload(spec), seed=seed,
                        scale=scale, comparisons=comparisons)
    return _guard("check", run)


# ───────────────────────────── gradcheck ─────────────────────────────


def cmd_gradcheck(variant: str | None = None,
                  variant_text: str | None = None, scale: float = 1.0,
                  seed: int = 0, eps: float = 1e-5,
                  samples: int | None = 24,
                  overrides: dict | None = None) -> dict:
    def run():
        t0 = time.perf_counter()
        spec = resolve_variant(variant, variant_text, scale, overrides)
        arrays = generate(spec, seed).arrays
        ok, reports = finite_diff_check(spec, arrays, eps=eps,
                                        rel_tol=GRAD_TOL,
                                        sample_per_tensor=samples,
                                        seed=seed)
        tensors = [{"tensor": r.name, "checked": r.checked,
                    "resampled": r.excluded,
                    "max_rel_err": r.max_rel_err,
                    "tolerance": GRAD_TOL,
                    "worst_coord": None if r.worst_coord is None
                    else list(r.worst_coord),
                    "pass": r.max_rel_err <= GRAD_TOL}
                   for r in reports]
        return envelope("gradcheck", ok, 0 if ok else 1,
                        time.perf_counter() - t0,
                        variant=_variant_payload(spec), seed=seed,
                        scale=scale, eps=eps, tensors=tensors)
    return _guard("gradcheck", run)


# ───────────────────────────── schedule ─────────────────────────────


def _plan_payload(plan: ExecutionPlan) -> dict:
    return {"tile": {"m": plan.tile.m, "n": plan.tile.n},
            "placements": {n: loc.name.lower()
                           for n, loc in plan.placements},
            "stages": dict(plan.stages),
            "cost": plan.cost}


def _measure_factory(spec: AttentionSpec, seed: int):
    """Wall-clock profiling for measured mode: bind each candidate and
    time one full run on a fixed instance."""
    arrays = generate(spec, seed).arrays
    irs: dict = {}

    def measure(cand: Candidate) -> float:
        key = (cand.tile.m, cand.tile.n)
        if key not in irs:
            irs[key] = assemble_kernel(spec, cand.tile)
        names = sorted(cand.placements)
        plan = ExecutionPlan(cand.tile,
                             tuple((n, cand.placements[n]) for n in names),
                             tuple((n, cand.stages[n]) for n in names),
                             0.0)
        t0 = time.perf_counter()
        bind_executable(irs[key], plan).run(arrays)
        return time.perf_counter() - t0

    return measure


def cmd_schedule(variant: str | None = None,
                 variant_text: str | None = None,
                 device_text: str | None = None, mode: str = "analytic",
                 verify: bool = False, scale: float = 1.0, seed: int = 0,
                 overrides: dict | None = None) -> dict:
    def run():
        t0 = time.perf_counter()
        spec = resolve_variant(variant, variant_text, scale, overrides)
        device = resolve_device(device_text)
        measure = _measure_factory(spec, seed) if mode == "measured" \
            else None
        task = make_scheduling_task(spec, measure=measure)
        trace: list = []
        plan = tile_config_scheduling(task, device, mode=mode, trace=trace)
        cand = Candidate(plan.tile, dict(plan.placements),
                         dict(plan.stages))
        payload = {
            "variant": _variant_payload(spec), "device": device.name,
            "mode": mode, "plan": _plan_payload(plan),
            "breakdown": profile_breakdown(cand, task, device),
            "demotions": [{"tensor": n, "from": a.name.lower(),
                           "to": b.name.lower()} for n, a, b in trace],
        }
        if verify:
            space = brute_force_space(task, device)
            ver = {"space": space, "limit": BRUTE_FORCE_LIMIT}
            if space <= BRUTE_FORCE_LIMIT:
                brute = brute_force_schedule(task, device)
                ver["brute_cost"] = brute.cost
                ver["equal"] = brute.cost == plan.cost
                ver["skipped"] = False
            else:
                ver["brute_cost"] = None
                ver["equal"] = None
                ver["skipped"] = True
            payload["verify"] = ver
        return envelope("schedule", True, 0, time.perf_counter() - t0,
                        **payload)
    return _guard("schedule", run)


# ─────────────────────────────── emit ───────────────────────────────


def cmd_emit(variant: str | None = None, variant_text: str | None = None,
             device_text: str | None = None, check: bool = False,
             scale: float = 1.0, seed: int = 0,
             overrides: dict | None = None) -> dict:
    def run():
        t0 = time.perf_counter()
        spec = resolve_variant(variant, variant_text, scale, overrides)
        device = resolve_device(device_text)
        task = make_scheduling_task(spec)
        plan = tile_config_scheduling(task, device)
        ir = assemble_kernel(spec, plan.tile)
        text = code_generation(ir, plan)
        digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
        payload = {
            "variant": _variant_payload(spec), "device": device.name,
            "tile": {"m": plan.tile.m, "n": plan.tile.n},
            "cost": plan.cost, "kernel_text": text,
            "bytes": len(text.encode("utf-8")), "sha256": digest,
        }
        ok = True
        if check:
            arrays = generate(spec, seed).arrays
            got = bind_executable(ir, plan).run(arrays)
            ref = run_naive_parallel(spec, arrays) \
                if spec.pattern is Pattern.PARALLEL \
                else run_step_recurrent(spec, arrays)
            err = max_abs_divergence(got, ref)
            ok = err <= CHECK_TOL
            payload["check"] = {"max_abs_err": err, "tolerance": CHECK_TOL,
                                "pass": ok}
        return envelope("emit", ok, 0 if ok else 1,
                        time.perf_counter() - t0, **payload)
    return _guard("emit", run)


# ─────────────────────────────── bench ───────────────────────────────


def cmd_bench(variants: list[str] | None = None,
              variant_texts: list[str] | None = None, scale: float = 1.0,
              seed: int = 0, repeats: int = 3,
              blocks: list[int] | None = None,
              chunks: list[int] | None = None,
              overrides: dict | None = None) -> dict:
    def run():
        t0 = time.perf_counter()
        specs = [resolve_variant(name, None, scale, overrides)
                 for name in (variants or [])]
        specs += [resolve_variant(None, text, scale, overrides)
                  for text in (variant_texts or [])]
        if not specs:
            raise InputError("bench needs at least one variant")
        if repeats < 1:
            raise InputError("repeats must be >= 1", got=repeats)
        rows = []
        for spec in specs:
            arrays = generate(spec, seed).arrays
            if spec.pattern is Pattern.PARALLEL:
                configs = [{"block_k": b}
                           for b in (blocks or [min(64, spec.dims.seq_k)])]
                base_fn = lambda: run_naive_parallel(spec, arrays)
                cand = "tiled"
            else:
                configs = [{"chunk": c}
                           for c in (chunks or [min(64, spec.dims.seq_q)])]
                base_fn = lambda: run_step_recurrent(spec, arrays)
                cand = "chunked"
            naive_s = _median_time(base_fn, repeats)
            for cfg in configs:
                if spec.pattern is Pattern.PARALLEL:
                    bq = min(64, spec.dims.seq_q)
                    fn = lambda: run_tiled_parallel(
                        spec, arrays, block_q=bq, block_k=cfg["block_k"])
                else:
                    fn = lambda: run_chunk_recurrent(spec, arrays,
                                                     chunk=cfg["chunk"])
                cand_s = _median_time(fn, repeats)
                rows.append({
                    "variant": spec.name, "pattern": spec.pattern.value,
                    "config": cfg, "seq_q": spec.dims.seq_q,
                    "seq_k": spec.dims.seq_k, "candidate": cand,
                    "naive_seconds": naive_s,
                    "candidate_seconds": cand_s,
                    "ratio": naive_s / cand_s if cand_s > 0 else 0.0,
                    "repeats": repeats,
                })
        return envelope("bench", True, 0, time.perf_counter() - t0,
                        seed=seed, scale=scale, repeats=repeats, rows=rows)
    return _guard("bench", run)


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)
