"""Per-layer expert-to-device assignment.

The main policy runs in two phases: a greedy assignment of every loaded
expert to its cheapest eligible path, then iterative bottleneck correction —
repeatedly take the most loaded device, try to move its most expensive expert
to an alternative, and keep the move only if the global makespan strictly
drops. Three comparison policies model GPU-only prefetching, GPU+CPU serving,
and GPU+NDP trade-off systems.

The GPU and CPU are serial domains (costs add); each DIMM's NDP is an
independent timeline that also accrues contention whenever the GPU or CPU
reads expert weights stored on that DIMM.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .cost import CostBreakdown, CostTable, ProfileSet, layer_cost_table
from .model import (
    Device,
    DeviceKind,
    HardwareSpec,
    Layout,
    LayoutKind,
    ModelSpec,
    device_order_key,
)


class UnknownPolicy(ValueError):
    pass


class NoEligibleDevice(RuntimeError):
    pass


class Policy(str, Enum):
    GPU_ONLY = "gpu-only"   # PCIe-overlap prefetching, everything on the GPU
    GPU_CPU = "gpu-cpu"     # resident experts on GPU, the rest on the CPU
    GPU_NDP = "gpu-ndp"     # per-expert weight-vs-activation migration trade-off
    TRI = "tri"             # greedy three-domain placement + refinement

    @staticmethod
    def parse(name: str) -> "Policy":
        try:
            return Policy(name.strip().lower())
        except ValueError:
            raise UnknownPolicy(
                f"unknown policy {name!r}; expected one of "
                f"{[p.value for p in Policy]}") from None


@dataclass
class Assignment:
    """Expert -> device mapping for one layer, with per-expert costs."""

    devices: dict[int, Device]
    costs: dict[int, CostBreakdown]

    @property
    def s_gpu(self) -> list[int]:
        return sorted(e for e, d in self.devices.items() if d.kind is DeviceKind.GPU)

    @property
    def s_cpu(self) -> list[int]:
        return sorted(e for e, d in self.devices.items() if d.kind is DeviceKind.CPU)

    def s_ndp(self, dimm: int) -> list[int]:
        return sorted(e for e, d in self.devices.items()
                      if d.kind is DeviceKind.NDP and d.dimm == dimm)


@dataclass
class MakespanModel:
    """Domain completion times for one layer. The makespan is exactly the
    slowest of the three domains, with each DIMM timed individually."""

    t_gpu_total: float
    t_cpu_total: float
    t_dimm: np.ndarray
    makespan: float = field(init=False)

    def __post_init__(self):
        self.t_dimm = np.asarray(self.t_dimm, dtype=float)
        dimm_max = float(self.t_dimm.max()) if self.t_dimm.size else 0.0
        self.makespan = max(self.t_gpu_total, self.t_cpu_total, dimm_max)

    def to_dict(self) -> dict:
        return {"t_gpu_total": self.t_gpu_total, "t_cpu_total": self.t_cpu_total,
                "t_dimm": self.t_dimm.tolist(), "makespan": self.makespan}


@dataclass
class RefineLogEntry:
    iteration: int
    bottleneck: str
    candidate: int
    destination: str
    old_makespan: float
    new_makespan: float

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "bottleneck": self.bottleneck,
                "candidate": self.candidate, "destination": self.destination,
                "old_makespan": self.old_makespan, "new_makespan": self.new_makespan}


# ---------------------------------------------------------------------------
# Domain totals
# ---------------------------------------------------------------------------

class _Totals:
    """Per-domain running totals with O(1) hypothetical-move previews.

    Accepted moves re-derive the sums from scratch in expert-id order so the
    maintained value matches evaluate_makespan() exactly, immune to drift
    from repeated add/remove.
    """

    def __init__(self, table: CostTable, hw: HardwareSpec):
        self.table = table
        self.hw = hw
        self.shard_s = (table.weight_bytes / hw.num_dimms) / hw.per_dimm_host_bandwidth
        self.local_s = table.weight_bytes / hw.per_dimm_host_bandwidth
        self.gpu = 0.0
        self.cpu = 0.0
        self.ndp = np.zeros(hw.num_dimms)
        self.local_cont = np.zeros(hw.num_dimms)
        self.n_striped_reads = 0

    def recompute(self, devices: dict[int, Device]) -> None:
        t = self.table
        self.gpu = 0.0
        self.cpu = 0.0
        self.ndp[:] = 0.0
        self.local_cont[:] = 0.0
        self.n_striped_reads = 0
        for e in sorted(devices):
            dev = devices[e]
            if dev.kind is DeviceKind.GPU:
                self.gpu += t.total_on(e, dev)
                if not t.resident[e]:
                    self._count_read(e, +1)
            elif dev.kind is DeviceKind.CPU:
                self.cpu += t.total_on(e, dev)
                self._count_read(e, +1)
            else:
                self.ndp[dev.dimm] += t.total_on(e, dev)

    def _count_read(self, e: int, sign: int) -> None:
        d = self.table.localized_dimm[e]
        if d >= 0:
            self.local_cont[d] += sign * self.local_s
        else:
            self.n_striped_reads += sign

    def dimm_busy(self) -> np.ndarray:
        return self.ndp + self.local_cont + self.n_striped_reads * self.shard_s

    def makespan(self) -> float:
        busy = self.dimm_busy()
        dimm_max = float(busy.max()) if busy.size else 0.0
        return max(self.gpu, self.cpu, dimm_max)

    def preview_move(self, e: int, src: Device, dst: Device) -> float:
        """Makespan if expert e moved from src to dst, without mutating."""
        t = self.table
        gpu, cpu = self.gpu, self.cpu
        ndp = self.ndp.copy()
        local = self.local_cont.copy()
        n_str = self.n_striped_reads
        for dev, sign in ((src, -1), (dst, +1)):
            if dev.kind is DeviceKind.GPU:
                gpu += sign * t.total_on(e, dev)
                if not t.resident[e]:
                    d = t.localized_dimm[e]
                    if d >= 0:
                        local[d] += sign * self.local_s
                    else:
                        n_str += sign
            elif dev.kind is DeviceKind.CPU:
                cpu += sign * t.total_on(e, dev)
                d = t.localized_dimm[e]
                if d >= 0:
                    local[d] += sign * self.local_s
                else:
                    n_str += sign
            else:
                ndp[dev.dimm] += sign * t.total_on(e, dev)
        busy = ndp + local + n_str * self.shard_s
        dimm_max = float(busy.max()) if busy.size else 0.0
        return max(gpu, cpu, dimm_max)

    def model(self) -> MakespanModel:
        return MakespanModel(self.gpu, self.cpu, self.dimm_busy())


def _eligible_from_table(table: CostTable, e: int) -> list[Device]:
    if table.resident[e]:
        return [Device.gpu()]
    devices = [Device.gpu(), Device.cpu()]
    d = int(table.localized_dimm[e])
    if d >= 0:
        devices.append(Device.ndp(d))
    return devices


def _build_assignment(devices: dict[int, Device], table: CostTable) -> Assignment:
    costs = {e: table.breakdown(e, dev) for e, dev in sorted(devices.items())}
    return Assignment(dict(sorted(devices.items())), costs)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def evaluate_makespan(assignment: Assignment | dict[int, Device],
                      loads: np.ndarray, layouts: Sequence[Layout],
                      model: ModelSpec, hw: HardwareSpec,
                      profiles: ProfileSet,
                      table: Optional[CostTable] = None) -> MakespanModel:
    """Recompute domain totals from scratch: serial sums for GPU and CPU,
    per-DIMM NDP time plus host-read contention for each DIMM."""
    devices = assignment.devices if isinstance(assignment, Assignment) else assignment
    if table is None:
        table = layer_cost_table(loads, layouts, model, hw, profiles)
    totals = _Totals(table, hw)
    totals.recompute(devices)
    return totals.model()


def greedy_initial_assignment(loads: np.ndarray, layouts: Sequence[Layout],
                              model: ModelSpec, hw: HardwareSpec,
                              profiles: ProfileSet,
                              table: Optional[CostTable] = None) -> Assignment:
    """Assign every loaded expert to the eligible device with the lowest
    standalone cost; ties go NDP, then CPU, then GPU."""
    if table is None:
        table = layer_cost_table(loads, layouts, model, hw, profiles)
    devices: dict[int, Device] = {}
    for e in np.nonzero(np.asarray(loads) > 0)[0]:
        e = int(e)
        options = _eligible_from_table(table, e)
        if not options:
            raise NoEligibleDevice(f"expert {e} has no eligible device")
        devices[e] = min(options,
                         key=lambda d: (table.total_on(e, d), device_order_key(d)))
    return _build_assignment(devices, table)


def refine_assignment(initial: Assignment, loads: np.ndarray,
                      layouts: Sequence[Layout], model: ModelSpec,
                      hw: HardwareSpec, profiles: ProfileSet,
                      max_iters: Optional[int] = None,
                      multi_candidate: bool = False,
                      table: Optional[CostTable] = None,
                      ) -> tuple[Assignment, MakespanModel, list[RefineLogEntry]]:
    """Iterative bottleneck correction. Each iteration finds the device with
    the maximum total time, takes its highest-cost expert, and evaluates
    moving it to each eligible alternative; the move with the lowest new
    makespan is applied if it strictly beats the current one (ties broken by
    the smaller time increase on the receiving device, then by fixed device
    order). Stops when the candidate has no improving move or after
    max_iters (default 4x the number of loaded experts)."""
    if table is None:
        table = layer_cost_table(loads, layouts, model, hw, profiles)
    devices = dict(initial.devices)
    if max_iters is None:
        max_iters = 4 * len(devices)
    totals = _Totals(table, hw)
    totals.recompute(devices)
    log: list[RefineLogEntry] = []

    for it in range(max_iters):
        current = totals.makespan()
        # Bottleneck: GPU and CPU as wholes, each DIMM individually.
        labeled = [(totals.gpu, "gpu", None), (totals.cpu, "cpu", None)]
        busy = totals.dimm_busy()
        labeled += [(float(busy[d]), f"dimm[{d}]", d) for d in range(hw.num_dimms)]
        bottleneck_total, bottleneck_label, bottleneck_dimm = max(
            labeled, key=lambda x: x[0])

        def on_bottleneck(dev: Device) -> bool:
            if bottleneck_label == "gpu":
                return dev.kind is DeviceKind.GPU
            if bottleneck_label == "cpu":
                return dev.kind is DeviceKind.CPU
            return dev.kind is DeviceKind.NDP and dev.dimm == bottleneck_dimm

        residents = [(e, d) for e, d in devices.items() if on_bottleneck(d)]
        if not residents:
            break  # contention-only bottleneck: nothing movable on it
        residents.sort(key=lambda ed: (-table.total_on(ed[0], ed[1]), ed[0]))

        applied = False
        for e, src in residents[: (3 if multi_candidate else 1)]:
            options = [d for d in _eligible_from_table(table, e)
                       if (d.kind, d.dimm) != (src.kind, src.dimm)]
            if not options:
                continue
            scored = [(totals.preview_move(e, src, dst),
                       table.total_on(e, dst), device_order_key(dst), dst)
                      for dst in options]
            scored.sort(key=lambda x: (x[0], x[1], x[2]))
            new_mk, _, _, dst = scored[0]
            if new_mk < current:
                devices[e] = dst
                totals.recompute(devices)
                actual = totals.makespan()
                if actual >= current:  # float-noise guard: revert dubious move
                    devices[e] = src
                    totals.recompute(devices)
                    continue
                log.append(RefineLogEntry(it, bottleneck_label, e, dst.label(),
                                          current, actual))
                applied = True
                break
        if not applied:
            break

    return _build_assignment(devices, table), totals.model(), log


def _gpu_only_model(devices: dict[int, Device], table: CostTable,
                    hw: HardwareSpec) -> MakespanModel:
    # Prefetch-pipeline credit: weight transfers of queued experts overlap
    # the compute of experts ahead of them, so the GPU timeline is the max of
    # total compute and total PCIe traffic rather than a sum of per-expert
    # maxima. DIMM timelines still serve the host reads.
    compute = sum(float(table.gpu_compute[e]) for e in sorted(devices))
    pcie = sum(table.pcie_s for e in sorted(devices) if not table.resident[e])
    totals = _Totals(table, hw)
    totals.recompute(devices)
    return MakespanModel(max(compute, pcie), 0.0, totals.dimm_busy())


def schedule_layer(policy: Policy | str, loads: np.ndarray,
                   layouts: Sequence[Layout], model: ModelSpec,
                   hw: HardwareSpec, profiles: ProfileSet,
                   refine_enabled: bool = True,
                   max_iters: Optional[int] = None,
                   multi_candidate: bool = False,
                   ) -> tuple[Assignment, MakespanModel, list[RefineLogEntry]]:
    """Produce the expert->device assignment and domain times for one layer
    under the given policy."""
    policy = Policy.parse(policy) if isinstance(policy, str) else policy
    loads = np.asarray(loads)
    table = layer_cost_table(loads, layouts, model, hw, profiles)
    loaded = [int(e) for e in np.nonzero(loads > 0)[0]]

    if policy is Policy.GPU_ONLY:
        devices = {e: Device.gpu() for e in loaded}
        return (_build_assignment(devices, table),
                _gpu_only_model(devices, table, hw), [])

    if policy is Policy.GPU_CPU:
        devices = {e: (Device.gpu() if table.resident[e] else Device.cpu())
                   for e in loaded}
        assignment = _build_assignment(devices, table)
        return (assignment,
                evaluate_makespan(assignment, loads, layouts, model, hw,
                                  profiles, table=table), [])

    if policy is Policy.GPU_NDP:
        devices = {}
        for e in loaded:
            if table.resident[e]:
                devices[e] = Device.gpu()
            elif table.localized_dimm[e] >= 0:
                # Weight-migration (GPU fetch) vs activation-migration (NDP)
                # trade-off, decided per expert on standalone cost.
                d = Device.ndp(int(table.localized_dimm[e]))
                devices[e] = min((d, Device.gpu()),
                                 key=lambda dv: (table.total_on(e, dv),
                                                 device_order_key(dv)))
            else:
                devices[e] = Device.gpu()
        assignment = _build_assignment(devices, table)
        return (assignment,
                evaluate_makespan(assignment, loads, layouts, model, hw,
                                  profiles, table=table), [])

    # TRI: greedy + bottleneck-aware refinement
    assignment = greedy_initial_assignment(loads, layouts, model, hw, profiles,
                                           table=table)
    if not refine_enabled:
        return (assignment,
                evaluate_makespan(assignment, loads, layouts, model, hw,
                                  profiles, table=table), [])
    return refine_assignment(assignment, loads, layouts, model, hw, profiles,
                             max_iters=max_iters, multi_candidate=multi_candidate,
                             table=table)
