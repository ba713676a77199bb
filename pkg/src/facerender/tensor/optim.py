"""Bias-corrected ADAM over named parameter lists."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: Dict[int, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[int, np.ndarray] = field(default_factory=dict)

    def moments_for(self, index: int, shape) -> tuple:
        if index not in self.first_moment:
            self.first_moment[index] = np.zeros(shape, dtype=np.float64)
            self.second_moment[index] = np.zeros(shape, dtype=np.float64)
        return self.first_moment[index], self.second_moment[index]


def adam_step(params: List[Tensor], state: AdamState) -> None:
    """One in-place update from each parameter's populated ``grad``."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {i} ({p.name or 'unnamed'}) has no gradient")
        if p.grad.shape != p.data.shape:
            raise ValueError(f"adam_step: grad shape {p.grad.shape} != param shape {p.data.shape}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for i, p in enumerate(params):
        m, v = state.moments_for(i, p.data.shape)
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * (p.grad * p.grad)
        p.data -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)


def adam_state_arrays(state: AdamState, params: List[Tensor]) -> Dict[str, np.ndarray]:
    """Flatten optimizer state for checkpointing, keyed by parameter index."""
    out = {}
    for i, p in enumerate(params):
        m, v = state.moments_for(i, p.data.shape)
        out[f"adam_m.{i:04d}"] = m
        out[f"adam_v.{i:04d}"] = v
    return out


def load_adam_state_arrays(state: AdamState, params: List[Tensor], arrays: Dict[str, np.ndarray]) -> None:
    for i, p in enumerate(params):
        m = arrays[f"adam_m.{i:04d}"]
        v = arrays[f"adam_v.{i:04d}"]
        if m.shape != p.data.shape or v.shape != p.data.shape:
            raise ValueError(f"adam moment shape mismatch for parameter {i}: {m.shape} vs {p.data.shape}")
        state.first_moment[i] = m.astype(np.float64).copy()
        state.second_moment[i] = v.astype(np.float64).copy()
