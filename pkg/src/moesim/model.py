"""Domain types shared by every other module: model shape, hardware rates,
expert layout/placement state, and configuration validation.

All quantities use fixed SI units: seconds, bytes, FLOP/s, tokens. Types are
immutable value objects once validated; per-layer placement collections are
owned and mutated single-threaded by the simulation engine.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

ExpertId = tuple[int, int]  # (layer, expert index within layer)


class InvalidConfig(ValueError):
    """Raised with the complete list of invariant violations, not just the first."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


# ---------------------------------------------------------------------------
# Layouts and devices
# ---------------------------------------------------------------------------

class LayoutKind(str, Enum):
    GPU_RESIDENT = "gpu_resident"
    STRIPED = "striped"
    LOCALIZED = "localized"


@dataclass(frozen=True)
class Layout:
    """Where an expert's weights live: cached in GPU HBM, striped across all
    DIMMs (readable at aggregate host bandwidth), or localized on one DIMM
    (required for near-data execution)."""

    kind: LayoutKind
    dimm: Optional[int] = None

    def __post_init__(self):
        if self.kind is LayoutKind.LOCALIZED:
            if self.dimm is None or self.dimm < 0:
                raise ValueError("localized layout requires a non-negative dimm id")
        elif self.dimm is not None:
            raise ValueError(f"{self.kind.value} layout must not carry a dimm id")

    @staticmethod
    def gpu_resident() -> "Layout":
        return Layout(LayoutKind.GPU_RESIDENT)

    @staticmethod
    def striped() -> "Layout":
        return Layout(LayoutKind.STRIPED)

    @staticmethod
    def localized(dimm: int) -> "Layout":
        return Layout(LayoutKind.LOCALIZED, dimm)

    @property
    def is_resident(self) -> bool:
        return self.kind is LayoutKind.GPU_RESIDENT

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value}
        if self.dimm is not None:
            d["dimm"] = self.dimm
        return d

    @staticmethod
    def from_dict(d: dict) -> "Layout":
        return Layout(LayoutKind(d["kind"]), d.get("dimm"))


class DeviceKind(str, Enum):
    GPU = "gpu"
    CPU = "cpu"
    NDP = "ndp"


@dataclass(frozen=True)
class Device:
    """A compute domain an expert can be assigned to. NDP devices are
    per-DIMM: an expert runs on the processor of the DIMM holding it."""

    kind: DeviceKind
    dimm: Optional[int] = None

    def __post_init__(self):
        if self.kind is DeviceKind.NDP:
            if self.dimm is None or self.dimm < 0:
                raise ValueError("ndp device requires a non-negative dimm id")
        elif self.dimm is not None:
            raise ValueError(f"{self.kind.value} device must not carry a dimm id")

    @staticmethod
    def gpu() -> "Device":
        return Device(DeviceKind.GPU)

    @staticmethod
    def cpu() -> "Device":
        return Device(DeviceKind.CPU)

    @staticmethod
    def ndp(dimm: int) -> "Device":
        return Device(DeviceKind.NDP, dimm)

    def label(self) -> str:
        if self.kind is DeviceKind.NDP:
            return f"ndp[{self.dimm}]"
        return self.kind.value


# Fixed tie-break order for scheduling decisions: NDP < CPU < GPU, and among
# NDP devices, lower dimm id first.
_DEVICE_ORDER = {DeviceKind.NDP: 0, DeviceKind.CPU: 1, DeviceKind.GPU: 2}


def device_order_key(device: Device) -> tuple[int, int]:
    return (_DEVICE_ORDER[device.kind], device.dimm if device.dimm is not None else -1)


# ---------------------------------------------------------------------------
# Model and hardware specifications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """Structural parameters of an MoE model. No weights, no gating network;
    token routing comes from traces.

    expert_weight_bytes / flops_per_token_per_expert default to the values
    derived from the gate/up/down projection dimensions; explicit overrides
    are permitted but must be positive.
    """

    num_layers: int
    num_routed_experts: int
    num_shared_experts: int
    top_k: int
    hidden_dim: int
    intermediate_dim: int
    bytes_per_param: int = 2
    expert_weight_bytes: Optional[int] = None
    flops_per_token_per_expert: Optional[float] = None
    name: str = ""

    def __post_init__(self):
        if self.expert_weight_bytes is None:
            object.__setattr__(self, "expert_weight_bytes", derive_expert_bytes(self))
        if self.flops_per_token_per_expert is None:
            object.__setattr__(
                self, "flops_per_token_per_expert",
                float(2 * 3 * self.hidden_dim * self.intermediate_dim))

    def violations(self) -> list[str]:
        v = []
        for f in ("num_layers", "num_routed_experts", "hidden_dim",
                  "intermediate_dim", "bytes_per_param"):
            if getattr(self, f) < 1:
                v.append(f"model.{f} must be >= 1, got {getattr(self, f)}")
        if self.num_shared_experts < 0:
            v.append(f"model.num_shared_experts must be >= 0, got {self.num_shared_experts}")
        if not (1 <= self.top_k <= self.num_routed_experts):
            v.append(f"model.top_k must satisfy 1 <= top_k <= num_routed_experts, "
                     f"got top_k={self.top_k}, N={self.num_routed_experts}")
        if self.expert_weight_bytes is not None and self.expert_weight_bytes <= 0:
            v.append(f"model.expert_weight_bytes must be positive, got {self.expert_weight_bytes}")
        if self.flops_per_token_per_expert is not None and self.flops_per_token_per_expert <= 0:
            v.append("model.flops_per_token_per_expert must be positive, "
                     f"got {self.flops_per_token_per_expert}")
        return v

    def total_routed_weight_bytes(self) -> int:
        return self.expert_weight_bytes * self.num_routed_experts * self.num_layers

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "num_layers": self.num_layers,
            "num_routed_experts": self.num_routed_experts,
            "num_shared_experts": self.num_shared_experts,
            "top_k": self.top_k,
            "hidden_dim": self.hidden_dim,
            "intermediate_dim": self.intermediate_dim,
            "bytes_per_param": self.bytes_per_param,
            "expert_weight_bytes": self.expert_weight_bytes,
            "flops_per_token_per_expert": self.flops_per_token_per_expert,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        return ModelSpec(**d)


def derive_expert_bytes(model: "ModelSpec") -> int:
    """Weight bytes for one expert's gate/up/down projections."""
    return 3 * model.hidden_dim * model.intermediate_dim * model.bytes_per_param


@dataclass(frozen=True)
class HardwareSpec:
    """Throughput, bandwidth, and capacity parameters of the three compute
    domains plus the interconnects between them.

    per_dimm_host_bandwidth defaults to host_total_bandwidth / num_dimms
    (localized reads see only a single DIMM's share of the host memory
    system); override to model channel pairing.
    gpu_hbm_expert_budget is a per-layer byte budget for cached routed
    experts; default is 8 expert weights' worth.
    """

    gpu_peak_flops: float = 819.6e12
    gpu_hbm_bandwidth: float = 2.04e12
    gpu_hbm_expert_budget: Optional[float] = None  # bytes per layer
    pcie_bandwidth: float = 64e9
    cpu_peak_flops: float = 90.1e12
    host_total_bandwidth: float = 307.2e9
    num_dimms: int = 16
    per_dimm_host_bandwidth: Optional[float] = None
    ndp_peak_flops_per_dimm: float = 256e9
    per_dimm_internal_bandwidth: float = 153.6e9
    dimm_link_bandwidth: float = 25e9
    dimm_link_max_parallel: int = 4

    def __post_init__(self):
        if self.per_dimm_host_bandwidth is None and self.num_dimms >= 1:
            object.__setattr__(self, "per_dimm_host_bandwidth",
                               self.host_total_bandwidth / self.num_dimms)

    def resolve_hbm_budget(self, model: ModelSpec) -> float:
        if self.gpu_hbm_expert_budget is not None:
            return self.gpu_hbm_expert_budget
        return 8.0 * model.expert_weight_bytes

    def violations(self) -> list[str]:
        v = []
        rates = ("gpu_peak_flops", "gpu_hbm_bandwidth", "pcie_bandwidth",
                 "cpu_peak_flops", "host_total_bandwidth",
                 "ndp_peak_flops_per_dimm", "per_dimm_internal_bandwidth",
                 "dimm_link_bandwidth")
        for f in rates:
            if getattr(self, f) <= 0:
                v.append(f"hardware.{f} must be strictly positive, got {getattr(self, f)}")
        if self.num_dimms < 1:
            v.append(f"hardware.num_dimms must be >= 1, got {self.num_dimms}")
        if self.dimm_link_max_parallel < 1:
            v.append("hardware.dimm_link_max_parallel must be >= 1, "
                     f"got {self.dimm_link_max_parallel}")
        if self.per_dimm_host_bandwidth is not None:
            if self.per_dimm_host_bandwidth <= 0:
                v.append("hardware.per_dimm_host_bandwidth must be strictly positive")
            elif self.per_dimm_host_bandwidth > self.host_total_bandwidth:
                v.append("hardware.per_dimm_host_bandwidth must not exceed "
                         "host_total_bandwidth")
        if self.gpu_hbm_expert_budget is not None and self.gpu_hbm_expert_budget < 0:
            v.append("hardware.gpu_hbm_expert_budget must be >= 0")
        return v

    def to_dict(self) -> dict:
        return {
            "gpu_peak_flops": self.gpu_peak_flops,
            "gpu_hbm_bandwidth": self.gpu_hbm_bandwidth,
            "gpu_hbm_expert_budget": self.gpu_hbm_expert_budget,
            "pcie_bandwidth": self.pcie_bandwidth,
            "cpu_peak_flops": self.cpu_peak_flops,
            "host_total_bandwidth": self.host_total_bandwidth,
            "num_dimms": self.num_dimms,
            "per_dimm_host_bandwidth": self.per_dimm_host_bandwidth,
            "ndp_peak_flops_per_dimm": self.ndp_peak_flops_per_dimm,
            "per_dimm_internal_bandwidth": self.per_dimm_internal_bandwidth,
            "dimm_link_bandwidth": self.dimm_link_bandwidth,
            "dimm_link_max_parallel": self.dimm_link_max_parallel,
        }

    @staticmethod
    def from_dict(d: dict) -> "HardwareSpec":
        return HardwareSpec(**d)


def reference_hardware(**overrides) -> HardwareSpec:
    """Single-GPU server reference point: 819.6 TFLOPS GPU with 2.04 TB/s HBM
    and 64 GB/s PCIe, 90.1 TFLOPS matrix-extension CPU on a 307.2 GB/s
    8-channel host memory system, 16 DIMMs each with a 256 GFLOPS near-data
    processor and 153.6 GB/s internal bandwidth, 25 GB/s inter-DIMM links."""
    return HardwareSpec(**overrides)


# Public structural configs of the evaluated models. Layer counts are the
# models' published values; they are inputs here, cross-checked against the
# known total routed-expert footprints (~422/423/190 GiB).
def deepseek_v2() -> ModelSpec:
    return ModelSpec(name="deepseek-v2", num_layers=60, num_routed_experts=160,
                     num_shared_experts=2, top_k=6, hidden_dim=5120,
                     intermediate_dim=1536, bytes_per_param=2)


def qwen3_235b() -> ModelSpec:
    return ModelSpec(name="qwen3-235b-a22b", num_layers=94, num_routed_experts=128,
                     num_shared_experts=0, top_k=8, hidden_dim=4096,
                     intermediate_dim=1536, bytes_per_param=2)


def glm45_air() -> ModelSpec:
    return ModelSpec(name="glm-4.5-air", num_layers=46, num_routed_experts=128,
                     num_shared_experts=1, top_k=8, hidden_dim=4096,
                     intermediate_dim=1408, bytes_per_param=2)


MODEL_PRESETS = {
    "deepseek-v2": deepseek_v2,
    "qwen3-235b-a22b": qwen3_235b,
    "glm-4.5-air": glm45_air,
}


# ---------------------------------------------------------------------------
# Expert classes and thresholds
# ---------------------------------------------------------------------------

class ExpertClass(str, Enum):
    HOT = "hot"
    WARM = "warm"
    COLD = "cold"


@dataclass(frozen=True)
class ClassifyThresholds:
    """Token-count class boundaries. Hot is load >= hot_min_tokens (the GPU
    efficiency knee), cold is load <= cold_max_tokens, warm is the remainder.
    Boundary ties fall to the colder class: the cold test is applied first."""

    hot_min_tokens: float = 256.0
    cold_max_tokens: float = 8.0

    def __post_init__(self):
        if self.cold_max_tokens < 0:
            raise ValueError("cold_max_tokens must be >= 0")
        if self.hot_min_tokens <= self.cold_max_tokens:
            raise ValueError("hot_min_tokens must exceed cold_max_tokens")

    def classify(self, load: float) -> ExpertClass:
        if load <= self.cold_max_tokens:
            return ExpertClass.COLD
        if load >= self.hot_min_tokens:
            return ExpertClass.HOT
        return ExpertClass.WARM

    def classify_array(self, loads: np.ndarray) -> np.ndarray:
        """Vectorized classification to int codes: 0=cold, 1=warm, 2=hot."""
        loads = np.asarray(loads)
        codes = np.ones(loads.shape, dtype=np.int8)
        codes[loads <= self.cold_max_tokens] = 0
        codes[(loads > self.cold_max_tokens) & (loads >= self.hot_min_tokens)] = 2
        return codes


CLASS_CODES = {0: ExpertClass.COLD, 1: ExpertClass.WARM, 2: ExpertClass.HOT}


# ---------------------------------------------------------------------------
# Per-expert runtime state
# ---------------------------------------------------------------------------

@dataclass
class ExpertState:
    """Placement and predictor state of one routed expert in one layer.

    host_layout remembers the host-side copy (striped/localized) while the
    expert is cached GPU-resident, so eviction can restore it.
    """

    expert_id: ExpertId
    layout: Layout
    ema_load: float = 0.0
    last_observed_load: float = 0.0
    host_layout: Optional[Layout] = None

    def violations(self, num_dimms: int) -> list[str]:
        v = []
        layer, idx = self.expert_id
        tag = f"expert ({layer},{idx})"
        if self.ema_load < 0:
            v.append(f"{tag}: ema_load must be >= 0, got {self.ema_load}")
        if self.last_observed_load < 0:
            v.append(f"{tag}: last_observed_load must be >= 0, got {self.last_observed_load}")
        for lab, lay in (("layout", self.layout), ("host_layout", self.host_layout)):
            if lay is not None and lay.kind is LayoutKind.LOCALIZED and lay.dimm >= num_dimms:
                v.append(f"{tag}: {lab} localized on dimm {lay.dimm} "
                         f"but num_dimms={num_dimms}")
        if self.host_layout is not None and self.host_layout.is_resident:
            v.append(f"{tag}: host_layout cannot itself be gpu_resident")
        return v


@dataclass(frozen=True)
class ExpertLoad:
    """Token count routed to one expert for one layer of one decode step."""

    expert_id: ExpertId
    tokens: int

    def __post_init__(self):
        if self.tokens < 0:
            raise ValueError(f"tokens must be >= 0, got {self.tokens}")


class LayerPlacements:
    """Placement state of all routed experts of one layer, array-backed for
    the scheduler/migration hot paths. Owned by the simulation engine and
    mutated single-threaded between decode steps."""

    def __init__(self, layer: int, layouts: Sequence[Layout],
                 ema: Optional[np.ndarray] = None,
                 last_observed: Optional[np.ndarray] = None,
                 host_layouts: Optional[Sequence[Optional[Layout]]] = None):
        n = len(layouts)
        self.layer = layer
        self.layouts: list[Layout] = list(layouts)
        self.ema = np.zeros(n) if ema is None else np.asarray(ema, dtype=float).copy()
        self.last_observed = (np.zeros(n) if last_observed is None
                              else np.asarray(last_observed, dtype=float).copy())
        self.host_layouts: list[Optional[Layout]] = (
            [None] * n if host_layouts is None else list(host_layouts))

    @property
    def num_experts(self) -> int:
        return len(self.layouts)

    def states(self) -> list[ExpertState]:
        return [ExpertState((self.layer, i), self.layouts[i],
                            float(self.ema[i]), float(self.last_observed[i]),
                            self.host_layouts[i])
                for i in range(self.num_experts)]

    @staticmethod
    def from_states(layer: int, states: Sequence[ExpertState]) -> "LayerPlacements":
        states = sorted(states, key=lambda s: s.expert_id)
        return LayerPlacements(
            layer,
            [s.layout for s in states],
            np.array([s.ema_load for s in states], dtype=float),
            np.array([s.last_observed_load for s in states], dtype=float),
            [s.host_layout for s in states],
        )

    def resident_mask(self) -> np.ndarray:
        return np.array([lay.is_resident for lay in self.layouts], dtype=bool)

    def copy(self) -> "LayerPlacements":
        return LayerPlacements(self.layer, self.layouts, self.ema,
                               self.last_observed, self.host_layouts)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate_config(model: ModelSpec, hw: HardwareSpec,
                    placement: Optional[Sequence[ExpertState]] = None):
    """Check every invariant of the model/hardware specs and an optional
    expert placement. Returns (model, hw, placement) unchanged if all hold,
    otherwise raises InvalidConfig carrying the complete violation list."""
    violations = model.violations() + hw.violations()
    if placement is not None:
        seen: set[ExpertId] = set()
        for st in placement:
            violations += st.violations(hw.num_dimms)
            layer, idx = st.expert_id
            if not (0 <= layer < model.num_layers):
                violations.append(f"expert ({layer},{idx}): layer out of range")
            if not (0 <= idx < model.num_routed_experts):
                violations.append(f"expert ({layer},{idx}): index out of range")
            if st.expert_id in seen:
                violations.append(f"expert ({layer},{idx}): duplicate placement entry")
            seen.add(st.expert_id)
    if violations:
        raise InvalidConfig(violations)
    return model, hw, placement
