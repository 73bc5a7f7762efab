"""Mutual-information audits of the activations a client shares."""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np

from .data import TimeSeriesWindow, stack_windows
from .errors import ConfigError
from .fedformer import ModelConfig, SplitOneParams, split1_forward
from .mine import MineConfig, MiTrace, train_mine
from .privacy import PrivacyBudget, protect_activations

MI_TARGETS = ("self", "clean", "noisy", "noise")


def audit_streams(
    params: SplitOneParams,
    cfg: ModelConfig,
    windows: Sequence[TimeSeriesWindow],
    target: str = "clean",
    every_kth: int = 10,
    batch_size: int = 32,
    noise_scale: float = 2.0,
    budget: PrivacyBudget | None = None,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Aligned ``(x, y)`` samples for one audit.

    ``x`` is the flattened ``concat(X, X_t)`` of each window.  ``y`` is, per
    ``target``: ``x`` itself, the clean ``enc_out``, ``enc_out`` plus noise
    (the DP mechanism of ``budget`` if given, otherwise Laplace with scale
    ``noise_scale``), or the noise alone.  Only every ``every_kth`` batch is used.
    """
    if target not in MI_TARGETS:
        raise ConfigError(f"unknown MI target {target!r}; choose one of {', '.join(MI_TARGETS)}")
    if every_kth < 1:
        raise ConfigError("every_kth must be >= 1")
    if not windows:
        raise ConfigError("MI audit needs at least one window")
    rng = np.random.default_rng([seed, 31])
    xs, ys = [], []
    starts = range(0, len(windows), batch_size)
    for i, start in enumerate(starts):
        if i % every_kth:
            continue
        wb = stack_windows(list(windows[start : start + batch_size]))
        b = len(wb)
        x = np.concatenate([wb.X.reshape(b, -1), wb.X_t.reshape(b, -1)], axis=1)
        if target == "self":
            y = x
        else:
            acts = split1_forward(wb, params, cfg)
            enc = acts.enc_out.data
            if target == "clean":
                y = enc
            elif target == "noise":
                y = rng.laplace(0.0, noise_scale, size=enc.shape)
            elif budget is not None and budget.enabled:
                y = protect_activations(acts.detached(), budget, rng).enc_out.data
            else:
                y = enc + rng.laplace(0.0, noise_scale, size=enc.shape)
        xs.append(x)
        ys.append(y.reshape(b, -1))
    return np.concatenate(xs), np.concatenate(ys)


def estimate_mi_pipeline(
    params: SplitOneParams,
    cfg: ModelConfig,
    windows: Sequence[TimeSeriesWindow],
    target: str = "clean",
    every_kth: int = 10,
    batch_size: int = 32,
    noise_scale: float = 2.0,
    budget: PrivacyBudget | None = None,
    config: MineConfig | None = None,
    seed: int = 0,
) -> MiTrace:
    """Train MINE between client inputs and one choice of shared tensor."""
    x, y = audit_streams(params, cfg, windows, target, every_kth, batch_size, noise_scale, budget, seed)
    mine_cfg = replace(config or MineConfig(), seed=seed)
    _, trace = train_mine(x, y, mine_cfg)
    return trace


__all__ = ["MI_TARGETS", "audit_streams", "estimate_mi_pipeline"]
