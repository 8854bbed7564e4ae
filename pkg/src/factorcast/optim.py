"""Adaptive-moment (Adam) optimizer and parameter checkpoints."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Node

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    """Per-run optimizer state; accumulators are keyed by parameter name."""

    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("moment decay rates must lie in (0, 1)")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be > 0")


def adam_step(params: Mapping[str, Node], state: OptimizerState) -> bool:
    """Apply one bias-corrected Adam update in place.

    Gradients are read from each node's `.grad`. If any gradient is
    non-finite the whole step is skipped (state untouched) and a warning
    is logged. Returns True when the update was applied.
    """
    for name, p in params.items():
        if p.grad.shape != p.value.shape:
            raise ValueError(f"gradient shape mismatch for '{name}'")
        if not np.isfinite(np.sum(p.grad)):
            log.warning("non-finite gradient for %r: optimizer step skipped", name)
            return False

    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        p.value = p.value - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return True


def save_checkpoint(path, params: Mapping[str, "Node | np.ndarray"]) -> None:
    """Write named arrays to an .npz container (value-exact round trip)."""
    arrays = {name: (p.value if isinstance(p, Node) else np.asarray(p))
              for name, p in params.items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:  # explicit handle: keep the exact filename
        np.savez(fh, **arrays)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with np.load(Path(path)) as data:
        return {name: data[name].copy() for name in data.files}
