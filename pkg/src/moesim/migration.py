"""Background weight-movement planning between decode steps: prefetching
predicted-hot experts to GPU HBM over PCIe, converting layouts between
striped and localized over the inter-DIMM link when an expert's predicted
class conflicts with its layout, and rebalancing localized cold experts away
from overloaded DIMMs.

Candidate tasks are ranked by estimated makespan benefit and greedily
accepted while their cumulative estimated time fits the overlap window
provided by the layer's non-expert GPU work. Planning is pure; applying
mutates placements between decode steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from . import cost as costmod
from .cost import ProfileSet, compute_time
from .model import (
    ClassifyThresholds,
    Device,
    DeviceKind,
    HardwareSpec,
    Layout,
    LayoutKind,
    LayerPlacements,
    ModelSpec,
    device_order_key,
)


class StaleTask(RuntimeError):
    """Placement changed between planning and apply; the task is dropped."""


class TaskKind(str, Enum):
    PREFETCH = "prefetch"
    RELAYOUT = "relayout"
    REBALANCE = "rebalance"


@dataclass(frozen=True)
class MigrationTask:
    kind: TaskKind
    layer: int
    expert: int
    bytes: int
    est_time_s: float
    predicted_benefit_s: float
    expected_source: Layout
    to_layout: Optional[Layout] = None   # prefetch/relayout destination
    from_dimm: Optional[int] = None      # rebalance only
    to_dimm: Optional[int] = None        # rebalance only

    def __post_init__(self):
        if self.bytes > 0 and self.est_time_s <= 0:
            raise ValueError("est_time_s must be > 0 for bytes > 0")
        if self.kind is TaskKind.REBALANCE:
            if self.from_dimm is None or self.to_dimm is None:
                raise ValueError("rebalance requires from_dimm and to_dimm")
            if self.from_dimm == self.to_dimm:
                raise ValueError("rebalance requires from_dimm != to_dimm")
            if (self.expected_source.kind is not LayoutKind.LOCALIZED
                    or self.expected_source.dimm != self.from_dimm):
                raise ValueError("rebalance source must be localized on from_dimm")

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value, "layer": self.layer, "expert": self.expert,
             "bytes": self.bytes, "est_time_s": self.est_time_s,
             "predicted_benefit_s": self.predicted_benefit_s}
        if self.to_layout is not None:
            d["to_layout"] = self.to_layout.to_dict()
        if self.from_dimm is not None:
            d["from_dimm"] = self.from_dimm
            d["to_dimm"] = self.to_dimm
        return d


@dataclass(frozen=True)
class WindowBudget:
    """Seconds of overlap window available for background transfers, from
    the current layer's non-expert GPU work."""

    budget_s: float

    def __post_init__(self):
        if self.budget_s < 0:
            raise ValueError("budget_s must be >= 0")


def link_transfer_time(bytes_: float, kind: TaskKind, hw: HardwareSpec) -> float:
    """Transfer seconds for one task. Rebalancing moves the whole expert
    over a single source->destination link. Relayout fans the weights out to
    (or gathers from) the other num_dimms-1 DIMMs in equal shards, with up
    to dimm_link_max_parallel shard sends in flight. Prefetching rides PCIe,
    not the inter-DIMM link."""
    if bytes_ <= 0:
        return 0.0
    if kind is TaskKind.PREFETCH:
        return bytes_ / hw.pcie_bandwidth
    if kind is TaskKind.REBALANCE:
        return bytes_ / hw.dimm_link_bandwidth
    shards = hw.num_dimms - 1
    if shards <= 0:
        return 0.0
    shard_time = (bytes_ / hw.num_dimms) / hw.dimm_link_bandwidth
    rounds = math.ceil(shards / hw.dimm_link_max_parallel)
    return rounds * shard_time


# ---------------------------------------------------------------------------
# Benefit estimation
# ---------------------------------------------------------------------------

def _occupancy(load: float, layout: Layout, model: ModelSpec, hw: HardwareSpec,
               profiles: ProfileSet) -> float:
    """Estimated makespan contribution of serving one expert under a layout:
    the cheapest eligible path, with NDP costs amortized by the DIMM count
    since the per-DIMM timelines run in parallel while GPU/CPU are serial."""
    best = np.inf
    for dev in costmod.eligible_devices(layout, hw):
        c = costmod.cost_on_device(dev, load, layout, model, hw, profiles).total_s
        if dev.kind is DeviceKind.NDP:
            c /= hw.num_dimms
        best = min(best, c)
    return best


def predicted_cold_dimm_seconds(pred_codes: np.ndarray,
                                placements: LayerPlacements, model: ModelSpec,
                                hw: HardwareSpec, profiles: ProfileSet) -> np.ndarray:
    """Per-DIMM predicted NDP seconds of the localized cold experts, the
    load measure driving rebalancing."""
    out = np.zeros(hw.num_dimms)
    weight_s = model.expert_weight_bytes / hw.per_dimm_internal_bandwidth
    for e, layout in enumerate(placements.layouts):
        if pred_codes[e] == 0 and layout.kind is LayoutKind.LOCALIZED:
            t = max(compute_time(profiles.ndp, float(placements.ema[e]), model),
                    weight_s)
            out[layout.dimm] += t
    return out


def _ndp_seconds(load: float, model: ModelSpec, hw: HardwareSpec,
                 profiles: ProfileSet) -> float:
    return max(compute_time(profiles.ndp, load, model),
               model.expert_weight_bytes / hw.per_dimm_internal_bandwidth)


# ---------------------------------------------------------------------------
# Planning
# ---------------------------------------------------------------------------

def plan_migrations(pred_codes: np.ndarray, placements: LayerPlacements,
                    per_dimm_predicted_cold_load: np.ndarray,
                    budget: WindowBudget, model: ModelSpec, hw: HardwareSpec,
                    profiles: ProfileSet, skew_threshold: float = 1.3,
                    hbm_budget_bytes: Optional[float] = None,
                    thresholds: Optional[ClassifyThresholds] = None,
                    hysteresis: float = 1.25,
                    ) -> tuple[list[MigrationTask], list[MigrationTask]]:
    """Generate prefetch/relayout/rebalance candidates from the predictor
    snapshot, rank them by predicted benefit (ties to the shorter task), and
    accept them greedily while the accepted estimated times sum to at most
    the window budget. Returns (accepted, deferred).

    Relayout triggers apply a hysteresis factor to the cold boundary
    (localize below cold_max/h, stripe above cold_max*h) so experts whose
    EMA hovers at the class edge do not ping-pong between layouts."""
    w = model.expert_weight_bytes
    layer = placements.layer
    if hbm_budget_bytes is None:
        hbm_budget_bytes = hw.resolve_hbm_budget(model)
    if thresholds is None:
        thresholds = ClassifyThresholds()
    if hysteresis < 1.0:
        raise ValueError("hysteresis must be >= 1")
    stripe_floor = thresholds.cold_max_tokens * hysteresis
    localize_ceiling = thresholds.cold_max_tokens / hysteresis
    candidates: list[MigrationTask] = []

    resident = [e for e, lay in enumerate(placements.layouts) if lay.is_resident]
    resident_bytes = len(resident) * w
    evictable = sorted(resident, key=lambda e: (placements.ema[e], e))

    for e, layout in enumerate(placements.layouts):
        ema = float(placements.ema[e])
        code = int(pred_codes[e])
        if code == 2 and not layout.is_resident:
            # Newly predicted hot: prefetch to HBM, evicting the lowest-EMA
            # resident if the budget is full (only for a hotter newcomer).
            fits = resident_bytes + w <= hbm_budget_bytes
            if not fits and evictable and placements.ema[evictable[0]] < ema:
                fits = True
            if not fits:
                continue
            benefit = (_occupancy(ema, layout, model, hw, profiles)
                       - costmod.cost_gpu_hit(ema, model, profiles).total_s)
            task = MigrationTask(
                TaskKind.PREFETCH, layer, e, w,
                link_transfer_time(w, TaskKind.PREFETCH, hw), benefit,
                expected_source=layout, to_layout=Layout.gpu_resident())
        elif (code == 1 and layout.kind is LayoutKind.LOCALIZED
                and ema >= stripe_floor and hw.num_dimms > 1):
            target = Layout.striped()
            benefit = (_occupancy(ema, layout, model, hw, profiles)
                       - _occupancy(ema, target, model, hw, profiles))
            task = MigrationTask(
                TaskKind.RELAYOUT, layer, e, w,
                link_transfer_time(w, TaskKind.RELAYOUT, hw), benefit,
                expected_source=layout, to_layout=target)
        elif (code == 0 and layout.kind is LayoutKind.STRIPED
                and ema <= localize_ceiling and hw.num_dimms > 1):
            target = Layout.localized(int(np.argmin(per_dimm_predicted_cold_load)))
            benefit = (_occupancy(ema, layout, model, hw, profiles)
                       - _occupancy(ema, target, model, hw, profiles))
            task = MigrationTask(
                TaskKind.RELAYOUT, layer, e, w,
                link_transfer_time(w, TaskKind.RELAYOUT, hw), benefit,
                expected_source=layout, to_layout=target)
        else:
            continue
        if task.predicted_benefit_s > 0:
            candidates.append(task)

    candidates += _rebalance_candidates(pred_codes, placements,
                                        per_dimm_predicted_cold_load, model,
                                        hw, profiles, skew_threshold)

    candidates.sort(key=lambda t: (-t.predicted_benefit_s, t.est_time_s,
                                   t.kind.value, t.expert))
    accepted: list[MigrationTask] = []
    deferred: list[MigrationTask] = []
    spent = 0.0
    for task in candidates:
        if spent + task.est_time_s <= budget.budget_s:
            accepted.append(task)
            spent += task.est_time_s
        else:
            deferred.append(task)
    return accepted, deferred


def _rebalance_candidates(pred_codes: np.ndarray, placements: LayerPlacements,
                          per_dimm_cold: np.ndarray, model: ModelSpec,
                          hw: HardwareSpec, profiles: ProfileSet,
                          skew_threshold: float) -> list[MigrationTask]:
    """Greedy skew correction: while max/mean predicted cold load exceeds
    the threshold, move the heaviest movable cold expert from the busiest
    DIMM to the most idle one — but only while each move strictly reduces
    the maximum per-DIMM load."""
    if hw.num_dimms < 2:
        return []
    loads = np.asarray(per_dimm_cold, dtype=float).copy()
    home = {e: lay.dimm for e, lay in enumerate(placements.layouts)
            if lay.kind is LayoutKind.LOCALIZED and pred_codes[e] == 0}
    seconds = {e: _ndp_seconds(float(placements.ema[e]), model, hw, profiles)
               for e in home}
    tasks: list[MigrationTask] = []
    w = model.expert_weight_bytes
    est = link_transfer_time(w, TaskKind.REBALANCE, hw)

    while True:
        mean = loads.mean()
        old_max = loads.max()
        if mean <= 0 or old_max / mean <= skew_threshold:
            break
        busiest = int(np.argmax(loads))
        idlest = int(np.argmin(loads))
        movable = sorted((e for e, d in home.items() if d == busiest),
                         key=lambda e: (-seconds[e], e))
        moved = False
        for e in movable:
            x = seconds[e]
            trial = loads.copy()
            trial[busiest] -= x
            trial[idlest] += x
            if trial.max() < old_max:
                tasks.append(MigrationTask(
                    TaskKind.REBALANCE, placements.layer, e, w, est,
                    predicted_benefit_s=float(old_max - trial.max()),
                    expected_source=Layout.localized(busiest),
                    from_dimm=busiest, to_dimm=idlest))
                loads = trial
                home[e] = idlest
                moved = True
                break
        if not moved:
            break
    return tasks


# ---------------------------------------------------------------------------
# Application
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MigrationRecord:
    task: MigrationTask
    applied: bool
    reason: str = ""

    def to_dict(self) -> dict:
        d = self.task.to_dict()
        d["applied"] = self.applied
        if self.reason:
            d["reason"] = self.reason
        return d


def apply_migrations(tasks: Sequence[MigrationTask], placements: LayerPlacements,
                     model: ModelSpec, hw: HardwareSpec,
                     hbm_budget_bytes: Optional[float] = None) -> list[MigrationRecord]:
    """Apply accepted tasks to the placement state between decode steps.
    Tasks whose source layout changed since planning are dropped and logged
    as stale. Prefetching past the HBM byte budget evicts the lowest-EMA
    resident expert back to its remembered host layout."""
    if hbm_budget_bytes is None:
        hbm_budget_bytes = hw.resolve_hbm_budget(model)
    w = model.expert_weight_bytes
    records: list[MigrationRecord] = []
    for task in tasks:
        e = task.expert
        current = placements.layouts[e]
        if current != task.expected_source:
            records.append(MigrationRecord(task, False,
                                           f"stale: layout now {current.kind.value}"))
            continue
        if task.kind is TaskKind.PREFETCH:
            placements.host_layouts[e] = current
            placements.layouts[e] = Layout.gpu_resident()
            _evict_to_budget(placements, w, hbm_budget_bytes, keep=e)
        elif task.kind is TaskKind.RELAYOUT:
            placements.layouts[e] = task.to_layout
        else:
            placements.layouts[e] = Layout.localized(task.to_dimm)
        records.append(MigrationRecord(task, True))
    return records


def _evict_to_budget(placements: LayerPlacements, weight_bytes: int,
                     hbm_budget_bytes: float, keep: int) -> None:
    while True:
        resident = [e for e, lay in enumerate(placements.layouts) if lay.is_resident]
        if len(resident) * weight_bytes <= hbm_budget_bytes:
            return
        victims = sorted((e for e in resident if e != keep),
                         key=lambda e: (placements.ema[e], e))
        if not victims:
            return
        v = victims[0]
        placements.layouts[v] = placements.host_layouts[v] or Layout.striped()
        placements.host_layouts[v] = None
