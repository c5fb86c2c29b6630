"""Expert-activation traces: JSONL ingest with schema validation, a synthetic
generator reproducing hot/warm/cold skew with temporal locality, and
class-share statistics.

Trace file format (JSON lines): a header record
    {"model_id": ..., "batch": B, "num_experts": N, "top_k": K}
followed by one record per decode step
    {"step": t, "layers": [[l0, l1, ...], ...]}
where each per-layer vector has length N, non-negative integer entries, and
sums to B*K exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import ClassifyThresholds, ExpertClass, ModelSpec


class ParseError(ValueError):
    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class SchemaViolation(ValueError):
    def __init__(self, step: int, layer: int, reason: str):
        self.step = step
        self.layer = layer
        self.reason = reason
        super().__init__(f"step {step}, layer {layer}: {reason}")


@dataclass
class DecodeStep:
    step_index: int
    layers: np.ndarray  # shape (num_layers, num_experts), int64 token counts


@dataclass
class ActivationTrace:
    model_id: str
    batch_size: int
    num_experts: int
    top_k: int
    steps: list[DecodeStep] = field(default_factory=list)

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    @property
    def num_layers(self) -> int:
        return int(self.steps[0].layers.shape[0]) if self.steps else 0

    def tokens_per_layer_step(self) -> int:
        return self.batch_size * self.top_k

    def validate(self) -> None:
        if not self.steps:
            raise ParseError(0, "no steps")
        expected = self.tokens_per_layer_step()
        num_layers = self.steps[0].layers.shape[0]
        for step in self.steps:
            if step.layers.shape != (num_layers, self.num_experts):
                raise SchemaViolation(step.step_index, -1,
                                      f"layer matrix shape {step.layers.shape} != "
                                      f"({num_layers}, {self.num_experts})")
            if (step.layers < 0).any():
                layer = int(np.argwhere(step.layers < 0)[0][0])
                raise SchemaViolation(step.step_index, layer, "negative load")
            sums = step.layers.sum(axis=1)
            bad = np.nonzero(sums != expected)[0]
            if bad.size:
                layer = int(bad[0])
                raise SchemaViolation(step.step_index, layer,
                                      f"load sum {int(sums[layer])} != "
                                      f"batch*top_k = {expected}")

    def loads_array(self) -> np.ndarray:
        """All loads as one (steps, layers, experts) array."""
        return np.stack([s.layers for s in self.steps])


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def save_trace(trace: ActivationTrace, path) -> None:
    with open(path, "w") as f:
        header = {"model_id": trace.model_id, "batch": trace.batch_size,
                  "num_experts": trace.num_experts, "top_k": trace.top_k}
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for step in trace.steps:
            rec = {"step": step.step_index, "layers": step.layers.tolist()}
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_trace(path) -> ActivationTrace:
    """Parse and fully validate a trace file; raises ParseError for malformed
    input and SchemaViolation for records breaking the load invariants."""
    with open(path) as f:
        lines = f.read().splitlines()
    header = None
    line_no = 0
    for line_no, raw in enumerate(lines, start=1):
        if raw.strip():
            try:
                header = json.loads(raw)
            except json.JSONDecodeError as e:
                raise ParseError(line_no, f"invalid JSON: {e.msg}") from e
            break
    if header is None:
        raise ParseError(0, "empty file")
    for key in ("model_id", "batch", "num_experts", "top_k"):
        if key not in header:
            raise ParseError(line_no, f"header missing {key!r}")
    trace = ActivationTrace(str(header["model_id"]), int(header["batch"]),
                            int(header["num_experts"]), int(header["top_k"]))

    expected_step = 0
    for offset, raw in enumerate(lines[line_no:], start=line_no + 1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as e:
            raise ParseError(offset, f"invalid JSON: {e.msg}") from e
        if "step" not in rec or "layers" not in rec:
            raise ParseError(offset, "step record missing 'step' or 'layers'")
        if rec["step"] != expected_step:
            raise ParseError(offset, f"expected step {expected_step}, got {rec['step']}")
        layers = rec["layers"]
        if not layers:
            raise ParseError(offset, "step has no layers")
        for li, vec in enumerate(layers):
            if len(vec) != trace.num_experts:
                raise SchemaViolation(expected_step, li,
                                      f"layer vector length {len(vec)} != "
                                      f"num_experts {trace.num_experts}")
        arr = np.asarray(layers, dtype=np.int64)
        trace.steps.append(DecodeStep(expected_step, arr))
        expected_step += 1
    if not trace.steps:
        raise ParseError(line_no, "no steps")
    trace.validate()
    return trace


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

# Exponents at or above this are treated as the degenerate infinite-skew
# limit: every token routes to the K most popular experts.
DEGENERATE_ZIPF_EXPONENT = 50.0


@dataclass(frozen=True)
class SkewProfile:
    """Popularity skew and temporal-locality parameters for the generator.

    zipf_exponent shapes the rank-popularity law. Between consecutive steps
    the per-layer popularity ranking persists with probability `locality`;
    otherwise a random `rerank_fraction` of rank positions are shuffled.
    """

    zipf_exponent: float
    locality: float = 1.0
    rerank_fraction: float = 0.0

    def __post_init__(self):
        if self.zipf_exponent <= 0:
            raise ValueError("zipf_exponent must be > 0")
        for f in ("locality", "rerank_fraction"):
            x = getattr(self, f)
            if not (0.0 <= x <= 1.0):
                raise ValueError(f"{f} must be in [0, 1], got {x}")


def _stream(seed: int, layer: int, tick: int) -> np.random.Generator:
    # Deterministic substream per (layer, tick): tick 0 seeds the initial
    # ranking, tick t+1 drives step t.
    return np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                        spawn_key=(layer, tick)))


def _sample_layer_loads(rng: np.random.Generator, ranking: np.ndarray,
                        batch: int, top_k: int, exponent: float) -> np.ndarray:
    """Token loads for one layer: each of `batch` tokens picks top_k distinct
    experts by Gumbel-perturbed log popularity over the current ranking."""
    n = ranking.shape[0]
    loads = np.zeros(n, dtype=np.int64)
    if exponent >= DEGENERATE_ZIPF_EXPONENT:
        loads[ranking[:top_k]] = batch
        return loads
    log_w = np.empty(n)
    log_w[ranking] = -exponent * np.log(np.arange(1, n + 1))
    keys = log_w[None, :] + rng.gumbel(size=(batch, n))
    picks = np.argpartition(-keys, top_k - 1, axis=1)[:, :top_k]
    np.add.at(loads, picks.ravel(), 1)
    return loads


def generate_trace(model: ModelSpec, batch: int, num_steps: int,
                   profile: SkewProfile, seed: int) -> ActivationTrace:
    """Deterministic synthetic trace: per-layer Zipf-ranked popularity with
    persistence-probability `locality` between steps. Every step satisfies
    the conservation invariant by construction."""
    if batch < 1 or num_steps < 1:
        raise ValueError("batch and num_steps must be >= 1")
    n = model.num_routed_experts
    k = model.top_k
    rankings = [_stream(seed, layer, 0).permutation(n)
                for layer in range(model.num_layers)]
    steps = []
    for t in range(num_steps):
        layers = np.zeros((model.num_layers, n), dtype=np.int64)
        for layer in range(model.num_layers):
            rng = _stream(seed, layer, t + 1)
            if t > 0 and rng.random() >= profile.locality:
                m = math.ceil(profile.rerank_fraction * n)
                if m >= 2:
                    pos = rng.choice(n, size=m, replace=False)
                    rankings[layer][np.sort(pos)] = rankings[layer][pos]
            layers[layer] = _sample_layer_loads(rng, rankings[layer], batch, k,
                                                profile.zipf_exponent)
        steps.append(DecodeStep(t, layers))
    trace = ActivationTrace(model.name or "synthetic", batch, n, k, steps)
    trace.validate()
    return trace


# ---------------------------------------------------------------------------
# Class-share statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassShares:
    """Fractions of expert slots and of routed tokens falling into each load
    class, aggregated over every (step, layer, expert) slot of a trace."""

    expert_fraction: dict
    token_fraction: dict

    def __getitem__(self, cls: ExpertClass) -> tuple[float, float]:
        return self.expert_fraction[cls], self.token_fraction[cls]


def classify_stats(trace: ActivationTrace,
                   thresholds: ClassifyThresholds = ClassifyThresholds()) -> ClassShares:
    loads = trace.loads_array()
    codes = thresholds.classify_array(loads)
    slots = loads.size
    tokens = loads.sum()
    expert_frac = {}
    token_frac = {}
    for code, cls in ((0, ExpertClass.COLD), (1, ExpertClass.WARM), (2, ExpertClass.HOT)):
        mask = codes == code
        expert_frac[cls] = float(mask.sum()) / slots
        token_frac[cls] = float(loads[mask].sum()) / tokens
    return ClassShares(expert_frac, token_frac)
