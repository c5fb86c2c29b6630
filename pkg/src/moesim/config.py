"""Experiment configuration: one structured YAML/JSON file per experiment,
strictly validated (unknown keys are errors), with dotted-path overrides for
command-line flags.

Top-level keys: model, hardware, policy, placement, scheduler, predictor,
migration, trace, sim, cost, output_dir. See README for the full schema.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .cost import DEFAULT_LAUNCH_FLOORS_S, ProfileSet, default_profiles, load_profiles_csv
from .model import (
    MODEL_PRESETS,
    ClassifyThresholds,
    HardwareSpec,
    InvalidConfig,
    ModelSpec,
    validate_config,
)
from .scheduler import Policy


class ConfigError(ValueError):
    pass


PLACEMENT_MODES = ("auto", "striped", "localized", "class_based",
                   "hot_striped", "hot_localized")


@dataclass(frozen=True)
class SchedulerParams:
    refine_enabled: bool = True
    max_iters: int = 0            # 0 means 4x the number of loaded experts
    multi_candidate: bool = False


@dataclass(frozen=True)
class PredictorParams:
    alpha: float = 0.3
    hot_min_tokens: float = 256.0
    cold_max_tokens: float = 8.0

    def thresholds(self) -> ClassifyThresholds:
        return ClassifyThresholds(self.hot_min_tokens, self.cold_max_tokens)


@dataclass(frozen=True)
class MigrationParams:
    enabled: bool = True
    window_s: float = 0.68e-3     # per-layer overlap window from attention+MLP
    skew_threshold: float = 1.3   # max/mean predicted cold load triggering rebalance
    hysteresis: float = 1.25      # widens relayout trigger boundaries against flapping
    charge_to_latency: bool = False


@dataclass(frozen=True)
class GeneratorParams:
    batch: int = 512
    num_steps: int = 24
    zipf_exponent: float = 1.5
    locality: float = 0.9
    rerank_fraction: float = 0.3
    seed: int = 0


@dataclass(frozen=True)
class TraceSource:
    path: Optional[str] = None
    generator: Optional[GeneratorParams] = None

    def __post_init__(self):
        if (self.path is None) == (self.generator is None):
            raise ConfigError("trace must specify exactly one of path or generator")


@dataclass(frozen=True)
class SimParams:
    non_expert_gpu_s: float = 0.68e-3   # attention + MLP + shared experts per layer
    prefill_s_per_request: float = 0.0


@dataclass(frozen=True)
class CostParams:
    profile_csv: Optional[str] = None
    gpu_launch_floor_s: float = DEFAULT_LAUNCH_FLOORS_S["gpu"]
    cpu_launch_floor_s: float = DEFAULT_LAUNCH_FLOORS_S["cpu"]
    ndp_launch_floor_s: float = DEFAULT_LAUNCH_FLOORS_S["ndp"]

    def floors(self) -> dict[str, float]:
        return {"gpu": self.gpu_launch_floor_s, "cpu": self.cpu_launch_floor_s,
                "ndp": self.ndp_launch_floor_s}


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec
    hardware: HardwareSpec
    trace: TraceSource
    policy: Policy = Policy.TRI
    placement: str = "auto"
    scheduler: SchedulerParams = SchedulerParams()
    predictor: PredictorParams = PredictorParams()
    migration: MigrationParams = MigrationParams()
    sim: SimParams = SimParams()
    cost: CostParams = CostParams()
    output_dir: str = "runs"

    def __post_init__(self):
        if self.placement not in PLACEMENT_MODES:
            raise ConfigError(f"placement must be one of {PLACEMENT_MODES}, "
                              f"got {self.placement!r}")
        validate_config(self.model, self.hardware)

    def profiles(self) -> ProfileSet:
        if self.cost.profile_csv:
            return load_profiles_csv(self.cost.profile_csv, self.hardware,
                                     self.cost.floors())
        return default_profiles(self.hardware, self.cost.floors())

    def replace(self, **kwargs) -> "ExperimentConfig":
        return dataclasses.replace(self, **kwargs)


# ---------------------------------------------------------------------------
# Strict dict -> config parsing
# ---------------------------------------------------------------------------

def _take(d: dict, allowed: set[str], where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _build(cls, d: dict, where: str):
    _take(d, _fields(cls), where)
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def parse_model(d: dict | str) -> ModelSpec:
    if isinstance(d, str):
        if d not in MODEL_PRESETS:
            raise ConfigError(f"unknown model preset {d!r}; "
                              f"known: {sorted(MODEL_PRESETS)}")
        return MODEL_PRESETS[d]()
    d = dict(d)
    preset = d.pop("preset", None)
    if preset is not None:
        if preset not in MODEL_PRESETS:
            raise ConfigError(f"unknown model preset {preset!r}")
        base = MODEL_PRESETS[preset]().to_dict()
        _take(d, set(base), "model")
        base.update(d)
        d = base
    return _build(ModelSpec, d, "model")


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    _take(raw, {"model", "hardware", "policy", "placement", "scheduler",
                "predictor", "migration", "trace", "sim", "cost", "output_dir"},
          "config")
    if "model" not in raw or "trace" not in raw:
        raise ConfigError("config requires 'model' and 'trace' sections")

    model = parse_model(raw["model"])
    hardware = _build(HardwareSpec, dict(raw.get("hardware", {})), "hardware")

    trace_raw = dict(raw["trace"])
    _take(trace_raw, {"path", "generator"}, "trace")
    gen = trace_raw.get("generator")
    trace = TraceSource(
        path=trace_raw.get("path"),
        generator=_build(GeneratorParams, dict(gen), "trace.generator")
        if gen is not None else None)

    try:
        policy = Policy.parse(raw.get("policy", "tri"))
    except Exception as e:
        raise ConfigError(str(e)) from e

    return ExperimentConfig(
        model=model,
        hardware=hardware,
        trace=trace,
        policy=policy,
        placement=raw.get("placement", "auto"),
        scheduler=_build(SchedulerParams, dict(raw.get("scheduler", {})), "scheduler"),
        predictor=_build(PredictorParams, dict(raw.get("predictor", {})), "predictor"),
        migration=_build(MigrationParams, dict(raw.get("migration", {})), "migration"),
        sim=_build(SimParams, dict(raw.get("sim", {})), "sim"),
        cost=_build(CostParams, dict(raw.get("cost", {})), "cost"),
        output_dir=str(raw.get("output_dir", "runs")),
    )


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{p}: invalid YAML: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return config_from_dict(raw)


def apply_overrides(raw: dict, overrides: dict[str, Any]) -> dict:
    """Apply dotted-path overrides (e.g. {'migration.enabled': False}) onto a
    raw config dict, creating intermediate sections as needed."""
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = raw
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {dotted}: "
                                  f"{part} is not a section")
        node[parts[-1]] = value
    return raw
