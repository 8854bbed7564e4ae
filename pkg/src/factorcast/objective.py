"""Training objective: task loss plus regularized evidence bound.

The total is

    total = lambda * prediction
          + scale * (w_rec * reconstruction + w_pred * predictability
                     + beta * w_kl * kl)

where `scale` shrinks every non-task term for long-horizon runs and `beta`
anneals the KL term over epochs. `kl_gaussian` returns the raw sum over
factors, components and time steps; the trainer may average it per term,
the definition here never does.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node

LONG_HORIZON_AUX_SCALE = 1e-3


@dataclass(frozen=True)
class ObjectiveWeights:
    """Fixed multipliers for the loss terms."""

    lambda_pred: float = 1.0
    reconstruction: float = 1.0
    predictability: float = 1.0
    kl: float = 0.5
    aux_scale: float = 1.0

    @classmethod
    def for_task(cls, kind: str, **overrides) -> "ObjectiveWeights":
        if kind == "long_horizon":
            overrides.setdefault("aux_scale", LONG_HORIZON_AUX_SCALE)
        elif kind != "stock_trend":
            raise ValueError(f"unknown task kind: {kind!r}")
        return cls(**overrides)


@dataclass(frozen=True)
class BetaSchedule:
    """Staged KL weight: low early, full strength late."""

    boundaries: tuple = (20, 30)
    values: tuple = (0.1, 0.5, 1.0)

    def __post_init__(self):
        if len(self.values) != len(self.boundaries) + 1:
            raise ValueError("beta schedule needs one more value than boundary")
        if list(self.boundaries) != sorted(self.boundaries):
            raise ValueError("beta schedule boundaries must be increasing")

    def beta_at(self, epoch: int) -> float:
        for bound, value in zip(self.boundaries, self.values):
            if epoch < bound:
                return value
        return self.values[-1]


def kl_gaussian(mu_q, sigma_q, mu_p, sigma_p) -> Node:
    """KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2)), summed over all entries.

    Posterior arguments may be nodes; prior arguments are constants. Raises
    when either scale is not strictly positive.
    """
    mu_q, sigma_q = ad.as_node(mu_q), ad.as_node(sigma_q)
    mu_p = np.asarray(mu_p, dtype=np.float64)
    sigma_p = np.asarray(sigma_p, dtype=np.float64)
    if np.any(sigma_q.value <= 0) or np.any(sigma_p <= 0):
        raise ValueError("kl_gaussian: scales must be strictly positive")
    var_p = sigma_p ** 2
    diff = mu_q - mu_p
    per_entry = (np.log(sigma_p) - ad.log(sigma_q)
                 + (ad.square(sigma_q) + ad.square(diff)) / (2.0 * var_p)
                 - 0.5)
    return ad.reduce_sum(per_entry)


def mse(prediction, target) -> Node:
    """Mean squared error over all entries."""
    prediction = ad.as_node(prediction)
    target = np.asarray(target, dtype=np.float64) if not isinstance(target, Node) else target
    diff = prediction - target
    return ad.reduce_mean(ad.square(diff))


@dataclass
class LossParts:
    """The four raw terms before weighting."""

    prediction: Node
    reconstruction: Node
    predictability: Node
    kl: Node

    def scalars(self) -> dict[str, float]:
        return {name: float(getattr(self, name).value)
                for name in ("prediction", "reconstruction", "predictability", "kl")}


def total_objective(parts: LossParts, weights: ObjectiveWeights, beta: float) -> Node:
    """Combine the terms; see the module docstring for the formula."""
    for name in ("prediction", "reconstruction", "predictability", "kl"):
        term = getattr(parts, name)
        value = term.value if isinstance(term, Node) else term
        if not np.all(np.isfinite(value)):
            raise ad.NonFiniteError(f"{name} loss is non-finite")
    aux = (weights.reconstruction * parts.reconstruction
           + weights.predictability * parts.predictability
           + (beta * weights.kl) * parts.kl)
    return weights.lambda_pred * parts.prediction + weights.aux_scale * aux


# ---------------------------------------------------------------------------
# batch normalization (scalar statistics, exactly invertible)
# ---------------------------------------------------------------------------

VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class BatchStats:
    mean: float
    std: float


def batch_stats(x: np.ndarray) -> BatchStats:
    """Scalar mean and floored std over every entry of the batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("batch_stats: empty input")
    var = float(np.var(x))
    return BatchStats(mean=float(np.mean(x)), std=float(np.sqrt(max(var, VARIANCE_FLOOR))))


def batch_normalize(x: np.ndarray, stats: BatchStats) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - stats.mean) / stats.std


def batch_denormalize(x, stats: BatchStats):
    """Inverse of `batch_normalize`; works on arrays and on nodes."""
    if isinstance(x, Node):
        return x * stats.std + stats.mean
    return np.asarray(x, dtype=np.float64) * stats.std + stats.mean
