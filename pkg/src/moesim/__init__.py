"""Trace-driven simulator and scheduling library for single-GPU MoE decode
serving with expert offloading across three compute domains: the GPU,
a matrix-extension CPU, and per-DIMM near-data processors."""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    ClassifyThresholds,
    Device,
    ExpertClass,
    ExpertLoad,
    ExpertState,
    HardwareSpec,
    InvalidConfig,
    Layout,
    LayerPlacements,
    ModelSpec,
    deepseek_v2,
    glm45_air,
    qwen3_235b,
    reference_hardware,
    validate_config,
)
from .cost import (  # noqa: F401
    ComputeProfile,
    CostBreakdown,
    ProfileSet,
    default_profiles,
)
from .scheduler import Assignment, MakespanModel, Policy  # noqa: F401
from .trace import ActivationTrace, SkewProfile, generate_trace, load_trace  # noqa: F401
from .config import ExperimentConfig, load_config  # noqa: F401
from .sim import RunReport, SimResult, compare, simulate, sweep  # noqa: F401
