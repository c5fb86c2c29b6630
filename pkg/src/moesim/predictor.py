"""Per-expert load prediction via exponential moving averages.

One EMA per (layer, expert), stored as flat arrays: prediction metadata stays
within a few bytes per expert. The first observation seeds the average, so a
constant load sequence is a fixed point from step one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import CLASS_CODES, ClassifyThresholds, ExpertClass, ExpertId


class TooFewSteps(ValueError):
    pass


class PredictorState:
    """EMA state over all (layer, expert) pairs. Single-writer: updates are
    sequential per decode step; planning reads a completed-step snapshot."""

    def __init__(self, num_layers: int, num_experts: int, alpha: float = 0.3):
        if not (0.0 < alpha <= 1.0):
            raise ValueError(f"alpha must be in (0, 1], got {alpha}")
        self.alpha = alpha
        self.num_layers = num_layers
        self.num_experts = num_experts
        self.ema = np.zeros((num_layers, num_experts))
        self.initialized = np.zeros((num_layers, num_experts), dtype=bool)

    def ema_of(self, expert_id: ExpertId) -> float:
        layer, idx = expert_id
        return float(self.ema[layer, idx])

    def metadata_bytes_per_expert(self) -> float:
        total = self.ema.nbytes + self.initialized.nbytes
        return total / (self.num_layers * self.num_experts)

    def copy(self) -> "PredictorState":
        c = PredictorState(self.num_layers, self.num_experts, self.alpha)
        c.ema = self.ema.copy()
        c.initialized = self.initialized.copy()
        return c

    def to_json(self) -> str:
        return json.dumps({
            "alpha": self.alpha,
            "num_layers": self.num_layers,
            "num_experts": self.num_experts,
            "ema": self.ema.tolist(),
            "initialized": self.initialized.astype(int).tolist(),
        }, sort_keys=True)

    @staticmethod
    def from_json(s: str) -> "PredictorState":
        d = json.loads(s)
        st = PredictorState(d["num_layers"], d["num_experts"], d["alpha"])
        st.ema = np.asarray(d["ema"], dtype=float)
        st.initialized = np.asarray(d["initialized"], dtype=bool)
        return st


def ema_update(state: PredictorState, layer: int, loads: np.ndarray) -> PredictorState:
    """Fold one layer's observed loads into the state:
    ema <- alpha*load + (1-alpha)*ema, with first observations seeding the
    average directly. Mutates and returns the state."""
    loads = np.asarray(loads, dtype=float)
    if loads.shape != (state.num_experts,):
        raise ValueError(f"loads must cover all {state.num_experts} routed experts")
    init = state.initialized[layer]
    prev = state.ema[layer]
    state.ema[layer] = np.where(init,
                                state.alpha * loads + (1.0 - state.alpha) * prev,
                                loads)
    state.initialized[layer] = True
    return state


def predict_classes_layer(state: PredictorState, layer: int,
                          thresholds: ClassifyThresholds) -> np.ndarray:
    """Class codes (0=cold, 1=warm, 2=hot) for one layer's experts from the
    current EMAs."""
    return thresholds.classify_array(state.ema[layer])


def predict_classes(state: PredictorState,
                    thresholds: ClassifyThresholds) -> dict[ExpertId, ExpertClass]:
    codes = thresholds.classify_array(state.ema)
    return {(layer, idx): CLASS_CODES[int(codes[layer, idx])]
            for layer in range(state.num_layers)
            for idx in range(state.num_experts)}


def decision_accuracy(trace, thresholds: ClassifyThresholds,
                      alpha: float = 0.3,
                      state_replay: Optional[PredictorState] = None) -> float:
    """Replay the EMA over a trace and measure how often the class predicted
    from step t-1 state matches the class of the actual loads at step t,
    over all (step, layer, expert) pairs with t >= 1."""
    if trace.num_steps < 2:
        raise TooFewSteps("decision accuracy needs at least 2 steps")
    state = state_replay if state_replay is not None else PredictorState(
        trace.num_layers, trace.num_experts, alpha)
    matches = 0
    total = 0
    for t, step in enumerate(trace.steps):
        if t > 0:
            predicted = thresholds.classify_array(state.ema)
            actual = thresholds.classify_array(step.layers)
            matches += int((predicted == actual).sum())
            total += actual.size
        for layer in range(trace.num_layers):
            ema_update(state, layer, step.layers[layer])
    return matches / total
