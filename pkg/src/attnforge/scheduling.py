"""Two-layer execution-plan search over tile shapes and memory tiers.

The outer layer enumerates every feasible tile configuration; the inner
layer assigns each intermediate tensor a memory tier and a pipeline
stage count.  The inner policy is greedy: start everything in
registers, sort by tile footprint descending, and whenever no stage
assignment satisfies the capacity constraint, demote the tensor at the
current position one tier and move on.  Each returned candidate is
profiled and the cheapest wins, ties broken by smaller tile config then
earlier candidate index, which makes the search result a pure function
of its inputs.

A full cartesian brute-force search over (config, placement, stages)
serves as the optimality oracle; the greedy inner layer explores only a
subset of placements, and `brute_force_schedule` is how we measure what
that subset gives up.

This module knows nothing about graphs: callers hand it tensor metas
with per-tile byte counts and visit counts as functions of the tile
shape, plus a flop estimate.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Callable

from .errors import InputError, NoFeasiblePlanError, SemanticError, UnsupportedError


class MemoryLocation(IntEnum):
    GLOBAL = 0
    SHARED = 1
    REGISTER = 2

    def lower(self) -> "MemoryLocation | None":
        return MemoryLocation(self - 1) if self > MemoryLocation.GLOBAL else None


TIER_ORDER = (MemoryLocation.REGISTER, MemoryLocation.SHARED,
              MemoryLocation.GLOBAL)


@dataclass(frozen=True, slots=True, order=True)
class TileShape:
    m: int
    n: int

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise InputError("tile extents must be positive",
                             m=self.m, n=self.n)


@dataclass
class IntermediateTensor:
    """Scheduling record for one per-tile buffer."""

    name: str
    bytes_per_tile: Callable[[TileShape], int]
    visits: Callable[[TileShape], int]


@dataclass(frozen=True)
class DeviceConfig:
    name: str
    basetile: TileShape
    capacity: dict  # MemoryLocation -> bytes
    bandwidth: dict  # MemoryLocation -> bytes per unit time
    throughput: float  # flops per unit time
    max_stages: int


@dataclass(frozen=True)
class ExecutionPlan:
    tile: TileShape
    placements: tuple  # ((name, MemoryLocation), ...) in meta order
    stages: tuple  # ((name, int), ...) in meta order
    cost: float

    def placement_of(self, name: str) -> MemoryLocation:
        return dict(self.placements)[name]

    def stage_of(self, name: str) -> int:
        return dict(self.stages)[name]


@dataclass
class SchedulingTask:
    """Everything the search needs to know about one kernel."""

    name: str
    tensors: list[IntermediateTensor]
    seq_q: int
    seq_k: int
    square: bool  # recurrent chunks tie both tile extents together
    flops: Callable[[TileShape], float]
    measure: Callable[["Candidate"], float] | None = None
    # normalizations without an online form need whole key rows per tile
    full_n: bool = False

    def configs(self, basetile: TileShape) -> list[TileShape]:
        out = infer_possible_tile_configs(basetile, self.seq_q, self.seq_k,
                                          square=self.square)
        if self.full_n:
            out = [c for c in out if c.n >= self.seq_k]
        return out


@dataclass
class Candidate:
    """One stage-and-placement assignment for a fixed tile config."""

    tile: TileShape
    placements: dict  # name -> MemoryLocation
    stages: dict  # name -> int


# ─────────────────────────── tile enumeration ───────────────────────────

TILE_CAP = 256


def infer_possible_tile_configs(basetile: TileShape, seq_q: int, seq_k: int,
                                square: bool = False,
                                cap_m: int = TILE_CAP,
                                cap_n: int = TILE_CAP) -> list[TileShape]:
    """All tile shapes whose extents are multiples of the base tile, up
    to min(sequence length, cap) per axis; ascending (m, n) order.
    Square mode (chunked recurrences) ties n to m."""
    ms = list(range(basetile.m, min(seq_q, cap_m) + 1, basetile.m))
    ns = list(range(basetile.n, min(seq_k, cap_n) + 1, basetile.n))
    if square:
        configs = [TileShape(m, m) for m in ms if m % basetile.n == 0
                   and m <= min(seq_k, cap_n)]
    else:
        configs = [TileShape(m, n) for m in ms for n in ns]
    if not configs:
        raise SemanticError("base tile exceeds problem size",
                            kind="basetile-exceeds-problem",
                            basetile=(basetile.m, basetile.n),
                            seq=(seq_q, seq_k))
    return sorted(configs)


# ─────────────────────────── inner layer ───────────────────────────


def generate_plans(tensors: list[IntermediateTensor], tile: TileShape,
                   placements: dict, max_stages: int) -> list[Candidate]:
    """Stage-assignment candidates for the current placements.

    Tensors placed in shared memory may multi-buffer, so they range over
    stages 1..max_stages in tensor order with the last one varying
    fastest; everything else is pinned to stage 1.  No shared tensors
    means exactly one candidate.
    """
    shared = [t.name for t in tensors
              if placements[t.name] is MemoryLocation.SHARED]
    out: list[Candidate] = []
    for combo in itertools.product(range(1, max_stages + 1),
                                   repeat=len(shared)):
        stages = {t.name: 1 for t in tensors}
        stages.update(zip(shared, combo))
        out.append(Candidate(tile, dict(placements), stages))
    return out


def compute_memory_constraint(tile: TileShape,
                              tensors: list[IntermediateTensor],
                              cand: Candidate, capacity: dict) -> bool:
    """True iff each tier's sum of tile bytes times stage count fits its
    capacity (boundary inclusive)."""
    used: dict[MemoryLocation, int] = {t: 0 for t in MemoryLocation}
    for t in tensors:
        used[cand.placements[t.name]] += (t.bytes_per_tile(tile)
                                          * cand.stages[t.name])
    return all(used[tier] <= capacity[tier] for tier in MemoryLocation)


def sort_by_size_desc(tensors: list[IntermediateTensor],
                      tile: TileShape) -> list[IntermediateTensor]:
    # name is the tie key so equal-size tensors keep a pinned order
    return sorted(tensors, key=lambda t: (-t.bytes_per_tile(tile), t.name))


def tile_resource_scheduling(tile: TileShape,
                             tensors: list[IntermediateTensor],
                             device: DeviceConfig,
                             trace: list | None = None) -> list[Candidate]:
    """Greedy placement search for one tile config.

    Single pass: all tensors start in registers; at each position the
    full stage-assignment candidate set is generated and filtered by the
    capacity constraint; the first non-empty set is returned.  On
    failure the tensor at the current position (largest first) drops one
    tier.  An empty list means every option was exhausted.
    """
    order = sort_by_size_desc(tensors, tile)
    placements = {t.name: MemoryLocation.REGISTER for t in order}
    for tensor_i in order:
        cands = generate_plans(order, tile, placements, device.max_stages)
        cands = [c for c in cands
                 if compute_memory_constraint(tile, order, c, device.capacity)]
        if cands:
            return cands
        lower = placements[tensor_i.name].lower()
        if lower is not None:
            if trace is not None:
                trace.append((tensor_i.name, placements[tensor_i.name], lower))
            placements[tensor_i.name] = lower
    return []


# ─────────────────────────── cost model ───────────────────────────


def profile_breakdown(cand: Candidate, task: SchedulingTask,
                      device: DeviceConfig) -> dict:
    """Analytic cost terms for one candidate.

    traffic(tier) counts bytes_per_tile x visits for each tensor placed
    there; each tier's traffic is charged at that tier's bandwidth.  The
    compute term is flops/throughput.  Multi-buffering overlaps shared
    traffic with compute: with s = min stage count over shared-placed
    tensors, a credit of (1 - 1/s) * min(shared traffic time, compute
    time) comes off the total.
    """
    traffic = {tier: 0.0 for tier in MemoryLocation}
    for t in task.tensors:
        traffic[cand.placements[t.name]] += (t.bytes_per_tile(cand.tile)
                                             * t.visits(cand.tile))
    traffic_time = sum(traffic[tier] / device.bandwidth[tier]
                       for tier in MemoryLocation)
    compute_time = task.flops(cand.tile) / device.throughput
    shared_stages = [cand.stages[t.name] for t in task.tensors
                     if cand.placements[t.name] is MemoryLocation.SHARED]
    s = min(shared_stages) if shared_stages else 1
    shared_time = traffic[MemoryLocation.SHARED] / device.bandwidth[
        MemoryLocation.SHARED]
    credit = (1.0 - 1.0 / s) * min(shared_time, compute_time)
    return {
        "traffic_bytes": {tier.name.lower(): traffic[tier]
                          for tier in MemoryLocation},
        "traffic_time": traffic_time,
        "compute_time": compute_time,
        "pipeline_depth": s,
        "overlap_credit": credit,
        "cost": traffic_time + compute_time - credit,
    }


def profile(cand: Candidate, task: SchedulingTask, device: DeviceConfig,
            mode: str = "analytic") -> float:
    if mode == "analytic":
        return profile_breakdown(cand, task, device)["cost"]
    if mode == "measured":
        if task.measure is None:
            raise UnsupportedError("measured profiling unavailable for "
                                   "this task", kind="mode-measured-unavailable",
                                   task=task.name)
        return task.measure(cand)
    raise InputError("unknown profiling mode", mode=mode)


# ─────────────────────────── outer layer ───────────────────────────


def _finish(cands: list[tuple[int, int, Candidate]], costs: list[float],
            task_name: str) -> ExecutionPlan:
    if not cands:
        raise NoFeasiblePlanError("no feasible plan", task=task_name)
    best = min(range(len(cands)),
               key=lambda i: (costs[i], cands[i][0], cands[i][1]))
    cfg_i, plan_i, cand = cands[best]
    names = sorted(cand.placements)
    return ExecutionPlan(
        tile=cand.tile,
        placements=tuple((n, cand.placements[n]) for n in names),
        stages=tuple((n, cand.stages[n]) for n in names),
        cost=costs[best],
    )


def tile_config_scheduling(task: SchedulingTask, device: DeviceConfig,
                           mode: str = "analytic",
                           workers: int | None = None,
                           trace: list | None = None) -> ExecutionPlan:
    """Exhaustive outer search: every tile config's candidate set is
    profiled and the global minimum returned.  Analytic profiling is
    pure, so it may fan out over threads; the result is ordered by
    (cost, config index, candidate index) and thus identical for any
    worker count."""
    configs = task.configs(device.basetile)
    indexed: list[tuple[int, int, Candidate]] = []
    for ci, tile in enumerate(configs):
        for pi, cand in enumerate(
                tile_resource_scheduling(tile, task.tensors, device, trace)):
            indexed.append((ci, pi, cand))
    if mode == "analytic" and workers and workers > 1 and indexed:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            costs = list(pool.map(
                lambda item: profile(item[2], task, device, mode), indexed))
    else:
        costs = [profile(c, task, device, mode) for _, _, c in indexed]
    return _finish(indexed, costs, task.name)


BRUTE_FORCE_LIMIT = 10 ** 6


def brute_force_space(task: SchedulingTask, device: DeviceConfig) -> int:
    configs = task.configs(device.basetile)
    per_tensor = 2 + device.max_stages  # REGISTER, GLOBAL, SHARED x stages
    return len(configs) * per_tensor ** len(task.tensors)


def brute_force_schedule(task: SchedulingTask,
                         device: DeviceConfig) -> ExecutionPlan:
    """Cartesian enumeration over (config, placement, stages) with the
    same constraint, cost model, and tie-break as the two-layer search.
    Refuses spaces above 10^6 candidates."""
    space = brute_force_space(task, device)
    if space > BRUTE_FORCE_LIMIT:
        raise UnsupportedError("brute force space too large",
                               kind="space-too-large", space=space,
                               limit=BRUTE_FORCE_LIMIT)
    configs = task.configs(device.basetile)
    order = [t.name for t in task.tensors]
    choices = [(MemoryLocation.REGISTER, 1), (MemoryLocation.GLOBAL, 1)]
    choices += [(MemoryLocation.SHARED, s)
                for s in range(1, device.max_stages + 1)]
    indexed: list[tuple[int, int, Candidate]] = []
    costs: list[float] = []
    for ci, tile in enumerate(configs):
        pi = 0
        for combo in itertools.product(choices, repeat=len(order)):
            cand = Candidate(
                tile,
                {n: c[0] for n, c in zip(order, combo)},
                {n: c[1] for n, c in zip(order, combo)},
            )
            if not compute_memory_constraint(tile, task.tensors, cand,
                                             device.capacity):
                continue
            indexed.append((ci, pi, cand))
            costs.append(profile(cand, task, device))
            pi += 1
    return _finish(indexed, costs, task.name)


# ─────────────────────────── device files ───────────────────────────

_TIER_NAMES = {"register": MemoryLocation.REGISTER,
               "shared": MemoryLocation.SHARED,
               "global": MemoryLocation.GLOBAL}


def device_from_dict(doc: dict, source: str = "<device>") -> DeviceConfig:
    """Validate and build a device description.

    Structural problems raise with the offending field named.  Capacity
    ordering between tiers is not enforced: a device that can hold
    nothing is representable and simply yields no feasible plan.
    """
    from .errors import SchemaError

    def need(obj: dict, key: str, types, where: str):
        if key not in obj:
            raise SchemaError(f"device file missing field {where}.{key}",
                              source=source)
        v = obj[key]
        if not isinstance(v, types) or isinstance(v, bool):
            raise SchemaError(f"device field {where}.{key} has wrong type",
                              want=str(types), got=type(v).__name__,
                              source=source)
        return v

    if not isinstance(doc, dict):
        raise SchemaError("device file must be a JSON object", source=source)
    name = need(doc, "name", str, "$")
    bt = need(doc, "basetile", dict, "$")
    m = need(bt, "m", int, "basetile")
    n = need(bt, "n", int, "basetile")
    if m < 1 or n < 1:
        raise SchemaError("basetile extents must be positive", m=m, n=n,
                          source=source)
    tiers = need(doc, "tiers", list, "$")
    capacity: dict = {}
    bandwidth: dict = {}
    for i, tier in enumerate(tiers):
        if not isinstance(tier, dict):
            raise SchemaError(f"device field tiers[{i}] must be an object",
                              source=source)
        tname = need(tier, "name", str, f"tiers[{i}]")
        if tname not in _TIER_NAMES:
            raise SchemaError(f"unknown tier name in tiers[{i}]", got=tname,
                              want=sorted(_TIER_NAMES), source=source)
        loc = _TIER_NAMES[tname]
        if loc in capacity:
            raise SchemaError(f"duplicate tier {tname}", source=source)
        cap = need(tier, "capacity_bytes", (int, float), f"tiers[{i}]")
        bw = need(tier, "bandwidth", (int, float), f"tiers[{i}]")
        if cap < 0:
            raise SchemaError(f"tiers[{i}].capacity_bytes must be >= 0",
                              got=cap, source=source)
        if bw <= 0:
            raise SchemaError(f"tiers[{i}].bandwidth must be > 0", got=bw,
                              source=source)
        capacity[loc] = int(cap)
        bandwidth[loc] = float(bw)
    missing = [t for t in MemoryLocation if t not in capacity]
    if missing:
        raise SchemaError("device file must define all three tiers",
                          missing=[t.name.lower() for t in missing],
                          source=source)
    throughput = need(doc, "throughput_flops", (int, float), "$")
    if throughput <= 0:
        raise SchemaError("throughput_flops must be > 0", got=throughput,
                          source=source)
    max_stages = need(doc, "max_stages", int, "$")
    if max_stages < 1:
        raise SchemaError("max_stages must be >= 1", got=max_stages,
                          source=source)
    return DeviceConfig(name=name, basetile=TileShape(m, n),
                        capacity=capacity, bandwidth=bandwidth,
                        throughput=float(throughput), max_stages=max_stages)


def load_device(path: str) -> DeviceConfig:
    import json

    from .errors import SchemaError
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise SchemaError("device file not found", path=path)
    except json.JSONDecodeError as e:
        raise SchemaError("device file is not valid JSON", path=path,
                          detail=str(e))
    return device_from_dict(doc, source=path)
