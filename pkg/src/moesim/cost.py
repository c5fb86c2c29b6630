"""Per-expert execution cost model.

Four execution paths are costed: GPU with the weights already cached in HBM
(pure compute), GPU with an on-demand weight fetch (max of compute, PCIe
transfer, and host DRAM read), matrix-extension CPU (max of compute and host
DRAM read), and per-DIMM NDP (max of compute and the internal weight read;
only available for localized experts). Compute latency comes from measured or
analytic throughput-vs-token-count lookup tables.

All operations are pure and accept scalar or numpy-array token counts.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .model import (
    Device,
    DeviceKind,
    HardwareSpec,
    Layout,
    LayoutKind,
    ModelSpec,
)

Tokens = Union[int, float, np.ndarray]


class EmptyProfile(ValueError):
    pass


class LayoutNotReadable(ValueError):
    """A host DRAM read was requested for a layout with no host copy."""


class IneligibleLayout(ValueError):
    """The requested execution path does not accept this layout; the
    scheduler must not offer it."""


# ---------------------------------------------------------------------------
# Compute throughput profiles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ComputeProfile:
    """Achieved-FLOP/s lookup table for one device class.

    Piecewise-linear in token count between breakpoints, clamped to the first
    value below the first breakpoint and to the last value beyond the last.
    Breakpoints must be strictly increasing (>= 1 token) with achieved
    throughput non-decreasing, capped at the device peak, and with achieved
    FLOP/s *per token* non-increasing — the last condition is what guarantees
    compute time is monotone in token count.
    """

    token_counts: tuple[float, ...]
    achieved_flops: tuple[float, ...]
    peak_flops: float
    launch_floor_s: float = 0.0

    def __post_init__(self):
        t, a = self.token_counts, self.achieved_flops
        if len(t) == 0:
            raise EmptyProfile("profile needs at least one breakpoint")
        if len(t) != len(a):
            raise ValueError("token_counts and achieved_flops length mismatch")
        if t[0] < 1:
            raise ValueError("token breakpoints must be >= 1")
        if any(t[i] >= t[i + 1] for i in range(len(t) - 1)):
            raise ValueError("token breakpoints must be strictly increasing")
        if any(x <= 0 or x > self.peak_flops * (1 + 1e-12) for x in a):
            raise ValueError("achieved FLOP/s must be in (0, peak]")
        if any(a[i] > a[i + 1] for i in range(len(a) - 1)):
            raise ValueError("achieved FLOP/s must be non-decreasing in tokens")
        ratios = [x / n for x, n in zip(a, t)]
        if any(ratios[i] < ratios[i + 1] * (1 - 1e-12) for i in range(len(ratios) - 1)):
            raise ValueError("achieved FLOP/s per token must be non-increasing "
                             "(required for cost monotonicity)")
        if self.launch_floor_s < 0:
            raise ValueError("launch_floor_s must be >= 0")

    def achieved_at(self, tokens: Tokens) -> Tokens:
        return np.interp(tokens, self.token_counts, self.achieved_flops)


@dataclass(frozen=True)
class ProfileSet:
    gpu: ComputeProfile
    cpu: ComputeProfile
    ndp: ComputeProfile

    def for_kind(self, kind: DeviceKind) -> ComputeProfile:
        return {DeviceKind.GPU: self.gpu, DeviceKind.CPU: self.cpu,
                DeviceKind.NDP: self.ndp}[kind]

    def scale_cpu(self, factor: float) -> "ProfileSet":
        """Scale CPU capability (peak and every breakpoint) by a factor, for
        CPU-capability sensitivity sweeps."""
        c = self.cpu
        scaled = ComputeProfile(c.token_counts,
                                tuple(a * factor for a in c.achieved_flops),
                                c.peak_flops * factor, c.launch_floor_s)
        return ProfileSet(self.gpu, scaled, self.ndp)


# Efficiency anchors for the analytic default profiles, as fractions of the
# device peak. GPU: 30% of peak at the 256-token knee (below it, achieved
# throughput scales with token count, i.e. constant-time weight-bound GEMV),
# full peak from 1024 tokens. CPU: ~1 TFLOPS-scale at single tokens up to
# full peak at 512 tokens, passing through the tens-of-TFLOPS range for
# tens-to-hundreds of tokens. NDP: flat at its (small) peak.
_GPU_ANCHORS = ((1.0, 0.30 / 256), (256.0, 0.30), (1024.0, 1.0))
_CPU_ANCHORS = ((1.0, 1.0 / 90.1), (8.0, 2.6 / 90.1), (64.0, 14.0 / 90.1),
                (256.0, 0.5), (512.0, 1.0))

DEFAULT_LAUNCH_FLOORS_S = {"gpu": 5e-6, "cpu": 2e-6, "ndp": 0.0}


def default_profiles(hw: HardwareSpec,
                     launch_floors_s: Optional[Mapping[str, float]] = None) -> ProfileSet:
    floors = dict(DEFAULT_LAUNCH_FLOORS_S)
    if launch_floors_s:
        floors.update(launch_floors_s)
    gpu = ComputeProfile(tuple(t for t, _ in _GPU_ANCHORS),
                         tuple(f * hw.gpu_peak_flops for _, f in _GPU_ANCHORS),
                         hw.gpu_peak_flops, floors["gpu"])
    cpu = ComputeProfile(tuple(t for t, _ in _CPU_ANCHORS),
                         tuple(f * hw.cpu_peak_flops for _, f in _CPU_ANCHORS),
                         hw.cpu_peak_flops, floors["cpu"])
    ndp = ComputeProfile((1.0,), (hw.ndp_peak_flops_per_dimm,),
                         hw.ndp_peak_flops_per_dimm, floors["ndp"])
    return ProfileSet(gpu, cpu, ndp)


def load_profiles_csv(path, hw: HardwareSpec,
                      launch_floors_s: Optional[Mapping[str, float]] = None) -> ProfileSet:
    """Load measured profiles from a `device_class,token_count,achieved_flops`
    CSV (strictly ascending token_count within each class)."""
    floors = dict(DEFAULT_LAUNCH_FLOORS_S)
    if launch_floors_s:
        floors.update(launch_floors_s)
    rows: dict[str, list[tuple[float, float]]] = {"gpu": [], "cpu": [], "ndp": []}
    with open(path, newline="") as f:
        for i, row in enumerate(csv.DictReader(f)):
            cls = row["device_class"].strip().lower()
            if cls not in rows:
                raise ValueError(f"{path}:{i + 2}: unknown device_class {cls!r}")
            rows[cls].append((float(row["token_count"]), float(row["achieved_flops"])))
    peaks = {"gpu": hw.gpu_peak_flops, "cpu": hw.cpu_peak_flops,
             "ndp": hw.ndp_peak_flops_per_dimm}
    profiles = {}
    for cls, pts in rows.items():
        if not pts:
            raise EmptyProfile(f"no {cls} rows in {path}")
        profiles[cls] = ComputeProfile(tuple(t for t, _ in pts),
                                       tuple(a for _, a in pts),
                                       peaks[cls], floors[cls])
    return ProfileSet(profiles["gpu"], profiles["cpu"], profiles["ndp"])


# ---------------------------------------------------------------------------
# Timing primitives
# ---------------------------------------------------------------------------

def compute_time(profile: ComputeProfile, tokens: Tokens, model: ModelSpec) -> Tokens:
    """Seconds to execute `tokens` through one expert on a device with the
    given profile: work / interpolated achieved throughput, plus the kernel
    launch floor. Zero tokens cost nothing."""
    if profile is None:
        raise EmptyProfile("no compute profile supplied")
    tokens_arr = np.asarray(tokens, dtype=float)
    work = tokens_arr * model.flops_per_token_per_expert
    t = work / profile.achieved_at(tokens_arr) + profile.launch_floor_s
    t = np.where(tokens_arr <= 0, 0.0, t)
    return float(t) if np.isscalar(tokens) or tokens_arr.ndim == 0 else t


def dram_read_time(weight_bytes: float, layout: Layout, hw: HardwareSpec) -> float:
    """Host-side DRAM read time for an expert's weights: aggregate bandwidth
    for striped layouts, a single DIMM's share for localized ones."""
    if layout.kind is LayoutKind.GPU_RESIDENT:
        raise LayoutNotReadable("gpu-resident experts have no host copy to read")
    if layout.kind is LayoutKind.STRIPED:
        return weight_bytes / hw.host_total_bandwidth
    return weight_bytes / hw.per_dimm_host_bandwidth


# ---------------------------------------------------------------------------
# Path costs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostBreakdown:
    """Per-expert cost on one path. total_s is the max of the applicable
    terms: the path pipelines compute against its transfers."""

    device: Device
    compute_s: float
    pcie_s: float = 0.0
    dram_s: float = 0.0

    @property
    def total_s(self) -> float:
        return max(self.compute_s, self.pcie_s, self.dram_s)


def cost_gpu_hit(tokens: Tokens, model: ModelSpec, profiles: ProfileSet,
                 layout: Layout = Layout.gpu_resident()) -> CostBreakdown:
    if layout.kind is not LayoutKind.GPU_RESIDENT:
        raise IneligibleLayout("gpu hit path requires a gpu-resident expert")
    return CostBreakdown(Device.gpu(), compute_time(profiles.gpu, tokens, model))


def cost_gpu_miss(tokens: Tokens, layout: Layout, model: ModelSpec,
                  hw: HardwareSpec, profiles: ProfileSet) -> CostBreakdown:
    if layout.kind is LayoutKind.GPU_RESIDENT:
        raise IneligibleLayout("gpu miss path requires a host-side layout")
    return CostBreakdown(
        Device.gpu(),
        compute_time(profiles.gpu, tokens, model),
        pcie_s=model.expert_weight_bytes / hw.pcie_bandwidth,
        dram_s=dram_read_time(model.expert_weight_bytes, layout, hw),
    )


def cost_cpu(tokens: Tokens, layout: Layout, model: ModelSpec,
             hw: HardwareSpec, profiles: ProfileSet) -> CostBreakdown:
    if layout.kind is LayoutKind.GPU_RESIDENT:
        raise IneligibleLayout("cpu path requires a host-side layout")
    return CostBreakdown(
        Device.cpu(),
        compute_time(profiles.cpu, tokens, model),
        dram_s=dram_read_time(model.expert_weight_bytes, layout, hw),
    )


def cost_ndp(tokens: Tokens, layout: Layout, model: ModelSpec,
             hw: HardwareSpec, profiles: ProfileSet) -> CostBreakdown:
    if layout.kind is not LayoutKind.LOCALIZED:
        raise IneligibleLayout("ndp path is restricted to localized experts")
    return CostBreakdown(
        Device.ndp(layout.dimm),
        compute_time(profiles.ndp, tokens, model),
        dram_s=model.expert_weight_bytes / hw.per_dimm_internal_bandwidth,
    )


def eligible_devices(layout: Layout, hw: HardwareSpec) -> list[Device]:
    """Devices an expert with this layout may be assigned to. Resident
    experts run only as GPU hits; localized experts additionally qualify for
    their home DIMM's NDP."""
    if layout.kind is LayoutKind.GPU_RESIDENT:
        return [Device.gpu()]
    devices = [Device.gpu(), Device.cpu()]
    if layout.kind is LayoutKind.LOCALIZED:
        devices.append(Device.ndp(layout.dimm))
    return devices


def cost_on_device(device: Device, tokens: Tokens, layout: Layout,
                   model: ModelSpec, hw: HardwareSpec,
                   profiles: ProfileSet) -> CostBreakdown:
    if device.kind is DeviceKind.GPU:
        if layout.kind is LayoutKind.GPU_RESIDENT:
            return cost_gpu_hit(tokens, model, profiles, layout)
        return cost_gpu_miss(tokens, layout, model, hw, profiles)
    if device.kind is DeviceKind.CPU:
        return cost_cpu(tokens, layout, model, hw, profiles)
    if layout.kind is not LayoutKind.LOCALIZED or layout.dimm != device.dimm:
        raise IneligibleLayout(
            f"expert with layout {layout.kind.value} cannot run on {device.label()}")
    return cost_ndp(tokens, layout, model, hw, profiles)


def best_host_cost(tokens: Tokens, layout: Layout, model: ModelSpec,
                   hw: HardwareSpec, profiles: ProfileSet) -> float:
    """Cheapest standalone cost over all devices eligible for this layout."""
    return min(cost_on_device(d, tokens, layout, model, hw, profiles).total_s
               for d in eligible_devices(layout, hw))


# ---------------------------------------------------------------------------
# Vectorized per-layer cost table (scheduler hot path)
# ---------------------------------------------------------------------------

@dataclass
class CostTable:
    """Standalone per-expert costs on each path for one layer's loads.
    Ineligible paths hold +inf. Component arrays are kept so CostBreakdowns
    and contention charges can be materialized without recomputation."""

    loads: np.ndarray
    resident: np.ndarray          # bool
    localized_dimm: np.ndarray    # int, -1 where not localized
    gpu_compute: np.ndarray
    cpu_compute: np.ndarray
    ndp_compute: np.ndarray
    pcie_s: float
    dram_s: np.ndarray            # host read time per expert's layout, inf if resident
    ndp_weight_s: float
    gpu_total: np.ndarray
    cpu_total: np.ndarray
    ndp_total: np.ndarray
    weight_bytes: int = 0

    def breakdown(self, expert: int, device: Device) -> CostBreakdown:
        if device.kind is DeviceKind.GPU:
            if self.resident[expert]:
                return CostBreakdown(device, float(self.gpu_compute[expert]))
            return CostBreakdown(device, float(self.gpu_compute[expert]),
                                 pcie_s=self.pcie_s, dram_s=float(self.dram_s[expert]))
        if device.kind is DeviceKind.CPU:
            return CostBreakdown(device, float(self.cpu_compute[expert]),
                                 dram_s=float(self.dram_s[expert]))
        return CostBreakdown(device, float(self.ndp_compute[expert]),
                             dram_s=self.ndp_weight_s)

    def total_on(self, expert: int, device: Device) -> float:
        if device.kind is DeviceKind.GPU:
            return float(self.gpu_total[expert])
        if device.kind is DeviceKind.CPU:
            return float(self.cpu_total[expert])
        return float(self.ndp_total[expert])


def layer_cost_table(loads: np.ndarray, layouts: Sequence[Layout],
                     model: ModelSpec, hw: HardwareSpec,
                     profiles: ProfileSet) -> CostTable:
    loads = np.asarray(loads, dtype=float)
    n = loads.shape[0]
    if len(layouts) != n:
        raise ValueError("loads and layouts length mismatch")
    resident = np.fromiter((lay.kind is LayoutKind.GPU_RESIDENT for lay in layouts),
                           dtype=bool, count=n)
    striped = np.fromiter((lay.kind is LayoutKind.STRIPED for lay in layouts),
                          dtype=bool, count=n)
    loc_dimm = np.fromiter(
        (lay.dimm if lay.kind is LayoutKind.LOCALIZED else -1 for lay in layouts),
        dtype=np.int64, count=n)

    gpu_c = compute_time(profiles.gpu, loads, model)
    cpu_c = compute_time(profiles.cpu, loads, model)
    ndp_c = compute_time(profiles.ndp, loads, model)

    w = model.expert_weight_bytes
    pcie = w / hw.pcie_bandwidth
    dram = np.full(n, np.inf)
    dram[striped] = w / hw.host_total_bandwidth
    dram[loc_dimm >= 0] = w / hw.per_dimm_host_bandwidth
    ndp_weight = w / hw.per_dimm_internal_bandwidth

    gpu_total = np.where(resident, gpu_c, np.maximum.reduce([gpu_c,
                                                             np.full(n, pcie),
                                                             dram]))
    cpu_total = np.where(resident, np.inf, np.maximum(cpu_c, dram))
    ndp_total = np.where(loc_dimm >= 0, np.maximum(ndp_c, ndp_weight), np.inf)
    return CostTable(loads, resident, loc_dimm, gpu_c, cpu_c, ndp_c,
                     pcie, dram, ndp_weight, gpu_total, cpu_total, ndp_total,
                     weight_bytes=w)


# ---------------------------------------------------------------------------
# DIMM contention from host-side weight reads
# ---------------------------------------------------------------------------

def contention_time(assignment: Mapping[int, Device], layouts: Sequence[Layout],
                    model: ModelSpec, hw: HardwareSpec) -> np.ndarray:
    """Per-DIMM busy seconds spent serving weight reads issued by the GPU
    (miss path) and CPU. A striped expert pulls weight_bytes/num_dimms from
    every DIMM; a localized one pulls all bytes from its home DIMM."""
    vec = np.zeros(hw.num_dimms)
    w = model.expert_weight_bytes
    shard_s = (w / hw.num_dimms) / hw.per_dimm_host_bandwidth
    local_s = w / hw.per_dimm_host_bandwidth
    for expert, device in assignment.items():
        if device.kind is DeviceKind.NDP:
            continue
        layout = layouts[expert]
        if layout.kind is LayoutKind.GPU_RESIDENT:
            continue  # hit path: no host read
        if layout.kind is LayoutKind.STRIPED:
            vec += shard_s
        else:
            vec[layout.dimm] += local_s
    return vec
