"""Trace-driven decode simulation.

Per decode step and per layer: schedule the layer's experts, account the
layer latency (non-expert GPU work is serial with GPU expert work and
overlaps the host-side domains), update the load predictor with the observed
loads, and plan background migrations into the layer's overlap window.
Completed migrations apply between decode steps, so a change planned during
step t is visible when the same layer runs at step t+1.

Background transfers ride two channels, PCIe (prefetch) and the inter-DIMM
link (relayout/rebalance). Tasks accepted by the planner fit entirely inside
one window and cost no latency. A task too large for any single window is
promoted to an in-flight slot on its channel and makes progress with each
subsequent window's leftover time; in charge-to-latency mode every generated
task instead executes immediately and any overflow beyond the window is
charged to the step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import ExperimentConfig, GeneratorParams
from .cost import ProfileSet
from .migration import (
    MigrationRecord,
    MigrationTask,
    TaskKind,
    WindowBudget,
    apply_migrations,
    plan_migrations,
    predicted_cold_dimm_seconds,
    _ndp_seconds,
)
from .model import (
    ClassifyThresholds,
    DeviceKind,
    HardwareSpec,
    Layout,
    LayerPlacements,
    ModelSpec,
)
from .predictor import PredictorState, ema_update, predict_classes_layer
from .scheduler import MakespanModel, Policy, schedule_layer
from .trace import ActivationTrace, SkewProfile, classify_stats, generate_trace


class MismatchedTraceModel(ValueError):
    pass


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class StepReport:
    step_index: int
    layer_makespans: list[MakespanModel]
    layer_latencies: list[float]
    migrations_applied: int = 0
    migrations_stale: int = 0
    migration_overhead_s: float = 0.0

    @property
    def latency_s(self) -> float:
        return sum(self.layer_latencies) + self.migration_overhead_s

    def to_dict(self) -> dict:
        return {
            "step_index": self.step_index,
            "latency_s": self.latency_s,
            "layer_latencies": self.layer_latencies,
            "layer_makespans": [m.to_dict() for m in self.layer_makespans],
            "migrations_applied": self.migrations_applied,
            "migrations_stale": self.migrations_stale,
            "migration_overhead_s": self.migration_overhead_s,
        }


@dataclass
class RunReport:
    policy: str
    total_decode_time_s: float
    tokens_generated: int
    throughput_tokens_per_s: float
    busy_s: dict
    utilization: dict
    class_token_shares: dict
    class_expert_shares: dict
    migration_tasks_applied: int
    migration_tasks_stale: int
    migration_overhead_s: float
    migration_overhead_fraction: float
    migration_busy_s: dict
    num_steps: int
    num_layers: int
    batch: int

    def to_dict(self) -> dict:
        return dataclasses_to_dict(self)


def dataclasses_to_dict(obj) -> dict:
    import dataclasses as _dc
    return {f.name: getattr(obj, f.name) for f in _dc.fields(obj)}


@dataclass
class SimResult:
    run: RunReport
    steps: list[StepReport]
    migration_log: list[MigrationRecord]

    def to_json(self) -> str:
        return json.dumps({"run": self.run.to_dict(),
                           "steps": [s.to_dict() for s in self.steps]},
                          sort_keys=True)


# ---------------------------------------------------------------------------
# Initial placement
# ---------------------------------------------------------------------------

def _balanced_localization(order: Sequence[int], mean_loads: np.ndarray,
                           model: ModelSpec, hw: HardwareSpec,
                           profiles: ProfileSet) -> dict[int, int]:
    """Greedy bin packing of experts onto DIMMs by estimated NDP seconds:
    heaviest first into the least-loaded DIMM."""
    bins = np.zeros(hw.num_dimms)
    homes: dict[int, int] = {}
    for e in order:
        d = int(np.argmin(bins))
        homes[e] = d
        bins[d] += _ndp_seconds(float(mean_loads[e]), model, hw, profiles)
    return homes


def initial_placement(trace: ActivationTrace, cfg: ExperimentConfig,
                      profiles: ProfileSet) -> list[LayerPlacements]:
    """Offline layout from whole-trace mean loads. `auto` picks each
    policy's natural layout: striped host copies for GPU-only and GPU+CPU
    serving, localized for GPU+NDP, and class-split (hot cached on GPU, warm
    striped, cold localized) for the three-domain policy."""
    mode = cfg.placement
    if mode == "auto":
        mode = {Policy.GPU_ONLY: "hot_striped", Policy.GPU_CPU: "hot_striped",
                Policy.GPU_NDP: "hot_localized", Policy.TRI: "class_based"}[cfg.policy]
    model, hw = cfg.model, cfg.hardware
    thresholds = cfg.predictor.thresholds()
    mean_loads = trace.loads_array().mean(axis=0)  # (layers, experts)
    budget_count = int(hw.resolve_hbm_budget(model) // model.expert_weight_bytes)

    placements = []
    for layer in range(model.num_layers):
        ml = mean_loads[layer]
        n = trace.num_experts
        layouts: list[Optional[Layout]] = [None] * n
        host: list[Optional[Layout]] = [None] * n
        by_load = sorted(range(n), key=lambda e: (-ml[e], e))

        if mode in ("hot_striped", "hot_localized", "class_based"):
            hot = [e for e in by_load if thresholds.classify(ml[e]).value == "hot"]
            for e in hot[:budget_count]:
                layouts[e] = Layout.gpu_resident()
                host[e] = Layout.striped()

        if mode == "striped" or mode == "hot_striped":
            rest_layout = "striped"
        elif mode == "localized" or mode == "hot_localized":
            rest_layout = "localized"
        else:  # class_based: warm striped, cold localized
            rest_layout = "class"

        remaining = [e for e in by_load if layouts[e] is None]
        if rest_layout == "striped":
            for e in remaining:
                layouts[e] = Layout.striped()
        elif rest_layout == "localized":
            homes = _balanced_localization(remaining, ml, model, hw, profiles)
            for e, d in homes.items():
                layouts[e] = Layout.localized(d)
        else:
            cold = [e for e in remaining
                    if thresholds.classify(ml[e]).value == "cold"]
            for e in remaining:
                layouts[e] = Layout.striped()
            homes = _balanced_localization(cold, ml, model, hw, profiles)
            for e, d in homes.items():
                layouts[e] = Layout.localized(d)
        placements.append(LayerPlacements(layer, layouts, host_layouts=host))
    return placements


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

def resolve_trace(cfg: ExperimentConfig) -> ActivationTrace:
    from .trace import load_trace
    if cfg.trace.path is not None:
        return load_trace(cfg.trace.path)
    g = cfg.trace.generator
    return generate_trace(cfg.model, g.batch, g.num_steps,
                          SkewProfile(g.zipf_exponent, g.locality,
                                      g.rerank_fraction), g.seed)


class _InFlight:
    """One oversize background task making progress across windows."""

    def __init__(self, task: MigrationTask):
        self.task = task
        self.remaining_s = task.est_time_s


def simulate(trace: ActivationTrace, cfg: ExperimentConfig,
             profiles: Optional[ProfileSet] = None) -> SimResult:
    model, hw = cfg.model, cfg.hardware
    if trace.num_experts != model.num_routed_experts:
        raise MismatchedTraceModel(
            f"trace has {trace.num_experts} routed experts, "
            f"config model has {model.num_routed_experts}")
    if trace.num_layers != model.num_layers:
        raise MismatchedTraceModel(
            f"trace has {trace.num_layers} layers, config model has "
            f"{model.num_layers}")
    if trace.top_k != model.top_k:
        raise MismatchedTraceModel(
            f"trace top_k {trace.top_k} != model top_k {model.top_k}")
    trace.validate()

    if profiles is None:
        profiles = cfg.profiles()
    thresholds = cfg.predictor.thresholds()
    placements = initial_placement(trace, cfg, profiles)
    predictor = PredictorState(model.num_layers, model.num_routed_experts,
                               cfg.predictor.alpha)
    hbm_budget = hw.resolve_hbm_budget(model)
    migrate = cfg.migration.enabled and cfg.policy is Policy.TRI
    window = cfg.migration.window_s
    max_iters = cfg.scheduler.max_iters or None

    in_flight: dict[str, Optional[_InFlight]] = {"pcie": None, "link": None}
    oversize_queue: dict[str, list[MigrationTask]] = {"pcie": [], "link": []}

    steps: list[StepReport] = []
    migration_log: list[MigrationRecord] = []
    busy = {"gpu": 0.0, "cpu": 0.0, "ndp": 0.0}
    mig_busy = {"pcie": 0.0, "link": 0.0}
    total_applied = 0
    total_stale = 0
    total_overhead = 0.0

    def channel_of(task: MigrationTask) -> str:
        return "pcie" if task.kind is TaskKind.PREFETCH else "link"

    for step in trace.steps:
        layer_makespans = []
        layer_latencies = []
        completed: list[MigrationTask] = []
        step_overhead = 0.0

        for layer in range(model.num_layers):
            loads = step.layers[layer]
            pl = placements[layer]
            assignment, mm, _ = schedule_layer(
                cfg.policy, loads, pl.layouts, model, hw, profiles,
                refine_enabled=cfg.scheduler.refine_enabled,
                max_iters=max_iters,
                multi_candidate=cfg.scheduler.multi_candidate)
            layer_makespans.append(mm)
            latency = max(cfg.sim.non_expert_gpu_s + mm.t_gpu_total,
                          mm.t_cpu_total,
                          float(mm.t_dimm.max()) if mm.t_dimm.size else 0.0)

            for e, dev in assignment.devices.items():
                kind = dev.kind.value
                busy[kind] += assignment.costs[e].compute_s
            busy["gpu"] += cfg.sim.non_expert_gpu_s

            ema_update(predictor, layer, loads)
            pl.ema[:] = predictor.ema[layer]
            pl.last_observed[:] = loads

            if migrate:
                pred_codes = predict_classes_layer(predictor, layer, thresholds)
                cold_s = predicted_cold_dimm_seconds(pred_codes, pl, model, hw,
                                                     profiles)
                accepted, deferred = plan_migrations(
                    pred_codes, pl, cold_s, WindowBudget(window), model, hw,
                    profiles, skew_threshold=cfg.migration.skew_threshold,
                    hbm_budget_bytes=hbm_budget, thresholds=thresholds,
                    hysteresis=cfg.migration.hysteresis)

                if cfg.migration.charge_to_latency:
                    spent = sum(t.est_time_s for t in accepted + deferred)
                    overflow = max(0.0, spent - window)
                    latency += overflow
                    step_overhead += overflow
                    completed += accepted + deferred
                    for t in accepted + deferred:
                        mig_busy[channel_of(t)] += t.est_time_s
                else:
                    completed += accepted
                    used = {"pcie": 0.0, "link": 0.0}
                    for t in accepted:
                        used[channel_of(t)] += t.est_time_s
                        mig_busy[channel_of(t)] += t.est_time_s
                    # Oversize tasks (larger than any window) progress on
                    # their channel with the window time the planner left.
                    for t in deferred:
                        if t.est_time_s > window:
                            q = oversize_queue[channel_of(t)]
                            if not any(x.expert == t.expert and x.layer == t.layer
                                       and x.kind == t.kind for x in q):
                                q.append(t)
                    for ch in ("pcie", "link"):
                        leftover = max(0.0, window - used[ch])
                        flight = in_flight[ch]
                        if flight is None and oversize_queue[ch]:
                            oversize_queue[ch].sort(
                                key=lambda t: (-t.predicted_benefit_s,
                                               t.est_time_s, t.expert))
                            flight = in_flight[ch] = _InFlight(
                                oversize_queue[ch].pop(0))
                        if flight is not None and leftover > 0:
                            progress = min(leftover, flight.remaining_s)
                            flight.remaining_s -= progress
                            mig_busy[ch] += progress
                            if flight.remaining_s <= 1e-15:
                                completed.append(flight.task)
                                in_flight[ch] = None

            layer_latencies.append(latency)

        applied = stale = 0
        if completed:
            by_layer: dict[int, list[MigrationTask]] = {}
            for t in completed:
                by_layer.setdefault(t.layer, []).append(t)
            for layer, tasks in sorted(by_layer.items()):
                records = apply_migrations(tasks, placements[layer], model, hw,
                                           hbm_budget_bytes=hbm_budget)
                migration_log += records
                applied += sum(1 for r in records if r.applied)
                stale += sum(1 for r in records if not r.applied)
            # A completed task may have invalidated queued oversize work.
            for ch in ("pcie", "link"):
                oversize_queue[ch] = [
                    t for t in oversize_queue[ch]
                    if placements[t.layer].layouts[t.expert] == t.expected_source]

        total_applied += applied
        total_stale += stale
        total_overhead += step_overhead
        steps.append(StepReport(step.step_index, layer_makespans,
                                layer_latencies, applied, stale, step_overhead))

    total = sum(s.latency_s for s in steps)
    tokens = trace.batch_size * trace.num_steps
    shares = classify_stats(trace, thresholds)
    util = {
        "gpu": busy["gpu"] / total if total else 0.0,
        "cpu": busy["cpu"] / total if total else 0.0,
        "ndp": busy["ndp"] / (hw.num_dimms * total) if total else 0.0,
    }
    run = RunReport(
        policy=cfg.policy.value,
        total_decode_time_s=total,
        tokens_generated=tokens,
        throughput_tokens_per_s=tokens / total if total else 0.0,
        busy_s=busy,
        utilization=util,
        class_token_shares={c.value: shares.token_fraction[c]
                            for c in shares.token_fraction},
        class_expert_shares={c.value: shares.expert_fraction[c]
                             for c in shares.expert_fraction},
        migration_tasks_applied=total_applied,
        migration_tasks_stale=total_stale,
        migration_overhead_s=total_overhead,
        migration_overhead_fraction=total_overhead / total if total else 0.0,
        migration_busy_s=dict(mig_busy),
        num_steps=trace.num_steps,
        num_layers=trace.num_layers,
        batch=trace.batch_size,
    )
    return SimResult(run, steps, migration_log)


def utilization(report: RunReport) -> dict:
    """Per-device compute utilization: busy compute seconds over the total
    decode time (NDP normalized by the DIMM count)."""
    return dict(report.utilization)


# ---------------------------------------------------------------------------
# Comparison and sweeps
# ---------------------------------------------------------------------------

BASELINE_POLICIES = (Policy.GPU_ONLY, Policy.GPU_CPU, Policy.GPU_NDP)


@dataclass
class CompareResult:
    results: dict[str, SimResult]
    speedup_vs: dict[str, float]  # main policy's speedup over each baseline

    def totals(self) -> dict[str, float]:
        return {p: r.run.total_decode_time_s for p, r in self.results.items()}


def compare(cfg: ExperimentConfig,
            policies: Sequence[Policy] = (Policy.TRI,) + BASELINE_POLICIES,
            trace: Optional[ActivationTrace] = None) -> CompareResult:
    """Run several policies on the same trace (each with its natural
    placement unless the config pins one) and report speedups of the first
    policy over the others."""
    if trace is None:
        trace = resolve_trace(cfg)
    results: dict[str, SimResult] = {}
    for policy in policies:
        results[policy.value] = simulate(trace, cfg.replace(policy=policy))
    head = policies[0].value
    speedups = {
        p.value: results[p.value].run.total_decode_time_s
        / results[head].run.total_decode_time_s
        for p in policies[1:]
    }
    return CompareResult(results, speedups)


SWEEP_AXES = ("num_dimms", "cpu_flops_scale", "batch")


def sweep(cfg: ExperimentConfig, axis: str, values: Sequence[float],
          trace: Optional[ActivationTrace] = None) -> list[tuple[float, RunReport]]:
    """One simulation per axis value with a shared trace seed. num_dimms
    re-derives per-DIMM host bandwidth as an equal share of the aggregate;
    cpu_flops_scale scales the CPU peak and its whole throughput profile;
    batch regenerates the trace at the same seed."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    if trace is None and axis != "batch":
        trace = resolve_trace(cfg)
    rows: list[tuple[float, RunReport]] = []
    for v in values:
        if axis == "num_dimms":
            hw_d = cfg.hardware.to_dict()
            hw_d["num_dimms"] = int(v)
            hw_d["per_dimm_host_bandwidth"] = None
            cfg_v = cfg.replace(hardware=HardwareSpec.from_dict(hw_d))
            result = simulate(trace, cfg_v)
        elif axis == "cpu_flops_scale":
            hw_d = cfg.hardware.to_dict()
            hw_d["cpu_peak_flops"] = cfg.hardware.cpu_peak_flops * v
            cfg_v = cfg.replace(hardware=HardwareSpec.from_dict(hw_d))
            profiles = cfg.profiles().scale_cpu(v)
            result = simulate(trace, cfg_v, profiles=profiles)
        else:  # batch
            if cfg.trace.generator is None:
                raise ValueError("batch sweep requires a generator trace source")
            g = cfg.trace.generator
            gen = GeneratorParams(batch=int(v), num_steps=g.num_steps,
                                  zipf_exponent=g.zipf_exponent,
                                  locality=g.locality,
                                  rerank_fraction=g.rerank_fraction, seed=g.seed)
            cfg_v = cfg.replace(trace=cfg.trace.__class__(generator=gen))
            result = simulate(resolve_trace(cfg_v), cfg_v)
        rows.append((v, result.run))
    return rows
