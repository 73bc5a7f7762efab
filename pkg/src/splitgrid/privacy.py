"""Laplace and Gaussian output perturbation for Split-1 activations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .fedformer import SplitOneActivations
from .tensor import Tensor


class SensitivityUndefinedError(ConfigError):
    """Batch-axis sensitivity needs at least two rows."""


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float = 1.0
    delta: float = 0.0
    enabled: bool = False
    sensitivity_override: float | None = None

    def __post_init__(self):
        if self.enabled and not self.epsilon > 0:
            raise ConfigError("dp.epsilon must be > 0 when dp.enabled")
        if not 0.0 <= self.delta < 1.0:
            raise ConfigError("dp.delta must lie in [0, 1)")


def batch_sensitivity(acts) -> float:
    """Largest Euclidean distance between any two flattened rows of the batch."""
    arr = acts.data if isinstance(acts, Tensor) else np.asarray(acts, dtype=np.float64)
    if arr.shape[0] < 2:
        raise SensitivityUndefinedError(
            f"sensitivity across the batch axis needs >= 2 rows, got {arr.shape[0]}"
        )
    rows = arr.reshape(arr.shape[0], -1)
    best = 0.0
    for i in range(rows.shape[0] - 1):
        d = np.sqrt(np.sum((rows[i + 1 :] - rows[i]) ** 2, axis=1))
        best = max(best, float(d.max()))
    return best


def laplace_mechanism(acts: np.ndarray, epsilon: float, s: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. Laplace(scale = s / epsilon) noise to every element."""
    if not epsilon > 0:
        raise ConfigError("epsilon must be positive")
    if s < 0:
        raise ConfigError("sensitivity must be non-negative")
    acts = np.asarray(acts, dtype=np.float64)
    if s == 0.0:
        return acts.copy()
    return acts + rng.laplace(0.0, s / epsilon, size=acts.shape)


def gaussian_sigma(epsilon: float, delta: float, s: float) -> float:
    return math.sqrt(2.0 * s * s / (epsilon * epsilon) * math.log(2.0 / delta))


def gaussian_mechanism(
    acts: np.ndarray, epsilon: float, delta: float, s: float, rng: np.random.Generator
) -> np.ndarray:
    """Add i.i.d. N(0, (2 s^2 / eps^2) ln(2 / delta)) noise to every element."""
    if not epsilon > 0:
        raise ConfigError("epsilon must be positive")
    if delta == 0.0:
        raise ConfigError("delta = 0 requests pure DP; use laplace_mechanism")
    if not 0.0 < delta < 1.0:
        raise ConfigError("delta must lie in (0, 1)")
    acts = np.asarray(acts, dtype=np.float64)
    if s == 0.0:
        return acts.copy()
    return acts + rng.normal(0.0, gaussian_sigma(epsilon, delta, s), size=acts.shape)


def _noise(arr: np.ndarray, budget: PrivacyBudget, rng: np.random.Generator) -> np.ndarray:
    s = budget.sensitivity_override if budget.sensitivity_override is not None else batch_sensitivity(arr)
    if budget.delta > 0:
        return gaussian_mechanism(arr, budget.epsilon, budget.delta, s, rng)
    return laplace_mechanism(arr, budget.epsilon, s, rng)


def protect_activations(
    acts: SplitOneActivations, budget: PrivacyBudget, rng: np.random.Generator
) -> SplitOneActivations:
    """Noise ``enc_out`` and ``dec_seasonal`` independently; ``dec_trend`` passes through.

    The trend is a moving average of the target series and is released
    unperturbed, so it carries no formal guarantee.

    The noise is an additive constant on the tape, so gradients with respect
    to the noised tensors flow unchanged into the clean forward graph.
    """
    if not budget.enabled:
        return acts
    noised = []
    for t in (acts.enc_out, acts.dec_seasonal):
        perturbed = _noise(t.data, budget, rng)
        noised.append(t + Tensor(perturbed - t.data))
    return SplitOneActivations(noised[0], noised[1], acts.dec_trend)
