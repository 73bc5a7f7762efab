"""Mutual information neural estimation with the Donsker-Varadhan bound.

A small statistics network ``T(x, y)`` is trained by gradient ascent on

    mean T(x, y) - log mean exp T(x, y_shuffled)

where shuffling ``y`` across the batch samples the product of marginals.
The gradient of the log-partition term uses a moving-average denominator to
reduce minibatch bias.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, NumericError
from .optim import AdamState, adam_step
from .tensor import Tensor, backward, elu, exp, matmul

log = logging.getLogger(__name__)


@dataclass
class MineConfig:
    iterations: int = 10_000
    batch_size: int = 100
    lr: float = 1e-3
    eval_every: int = 500
    ema_decay: float = 0.99
    hidden: tuple[int, int] = (100, 50)
    project_dim: int | None = None
    seed: int = 0


class MineNetwork:
    """Three dense layers (100, 50, 1 units) with ELU after the first two."""

    def __init__(self, dim_x: int, dim_y: int, hidden=(100, 50), seed: int = 0):
        rng = np.random.default_rng(seed)
        sizes = [dim_x + dim_y, *hidden, 1]
        self.dim_x, self.dim_y = dim_x, dim_y
        self.params: dict[str, Tensor] = {}
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            self.params[f"W{i}"] = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True)
            self.params[f"b{i}"] = Tensor(rng.uniform(-bound, bound, (fan_out,)), requires_grad=True)
        self.n_layers = len(sizes) - 1

    def forward(self, x: np.ndarray, y: np.ndarray) -> Tensor:
        h = Tensor(np.concatenate([x, y], axis=1))
        for i in range(self.n_layers):
            h = matmul(h, self.params[f"W{i}"]) + self.params[f"b{i}"]
            if i < self.n_layers - 1:
                h = elu(h)
        return h.reshape(-1)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.forward(x, y).data


@dataclass
class MiTrace:
    epochs: list[int] = field(default_factory=list)
    means: list[float] = field(default_factory=list)
    stds: list[float] = field(default_factory=list)

    def append(self, epoch: int, mean: float, std: float) -> None:
        if std < 0:
            raise ConfigError("trace std must be non-negative")
        self.epochs.append(epoch)
        self.means.append(float(mean))
        self.stds.append(float(std))

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def final(self) -> float:
        if not self.means:
            raise ConfigError("empty MI trace")
        return self.means[-1]

    @property
    def final_std(self) -> float:
        return self.stds[-1]

    def to_csv(self, path: str | Path, label: str | None = None) -> None:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow((["series"] if label else []) + ["epoch", "mean", "std"])
            for row in self.rows():
                w.writerow(([label] if label else []) + list(row))

    def rows(self):
        for e, m, s in zip(self.epochs, self.means, self.stds):
            yield e, f"{m:.12g}", f"{s:.12g}"


def shuffle_marginal(y_batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Permute rows so that pairing with x is broken."""
    y_batch = np.asarray(y_batch)
    if y_batch.shape[0] < 2:
        raise ConfigError("shuffling needs a batch of at least two rows")
    return y_batch[rng.permutation(y_batch.shape[0])]


def _logmeanexp(v: np.ndarray) -> float:
    c = float(np.max(v))
    if not math.isfinite(c):
        return math.nan
    return c + math.log(float(np.mean(np.exp(v - c))))


def dv_bound(T: Callable, x_batch, y_batch, y_shuffled) -> float:
    """``mean T(x, y) - log mean exp T(x, y_shuffled)`` with max-subtraction."""
    x_batch, y_batch, y_shuffled = (np.asarray(a, dtype=np.float64) for a in (x_batch, y_batch, y_shuffled))
    if not (len(x_batch) == len(y_batch) == len(y_shuffled)):
        raise ConfigError("joint and marginal batches must be the same size")
    joint = np.asarray(T(x_batch, y_batch), dtype=np.float64).reshape(-1)
    marg = np.asarray(T(x_batch, y_shuffled), dtype=np.float64).reshape(-1)
    value = float(np.mean(joint)) - _logmeanexp(marg)
    if not math.isfinite(value):
        raise NumericError("Donsker-Varadhan bound is not finite")
    return value


def _as_2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(a.shape[0], -1)


def _standardize(a: np.ndarray) -> np.ndarray:
    sd = a.std(axis=0)
    sd[sd == 0] = 1.0
    return (a - a.mean(axis=0)) / sd


def random_projection(a: np.ndarray, dim: int, seed: int) -> np.ndarray:
    """Fixed Gaussian projection to ``dim`` columns (no-op when already narrower)."""
    if a.shape[1] <= dim:
        return a
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal((a.shape[1], dim)) / math.sqrt(dim)
    return a @ proj


def evaluate_bound(net: MineNetwork, x: np.ndarray, y: np.ndarray, batch: int, rng) -> tuple[float, float]:
    """Mean and std of the bound over consecutive evaluation batches."""
    values = []
    n = x.shape[0]
    for start in range(0, n - batch + 1, batch):
        xb, yb = x[start : start + batch], y[start : start + batch]
        values.append(dv_bound(net, xb, yb, shuffle_marginal(yb, rng)))
    if not values:
        values.append(dv_bound(net, x, y, shuffle_marginal(y, rng)))
    return float(np.mean(values)), float(np.std(values))


def train_mine(x_stream, y_stream, config: MineConfig | None = None, **overrides) -> tuple[MineNetwork, MiTrace]:
    """Fit a statistics network on aligned samples and return it with its estimate trace."""
    cfg = config or MineConfig()
    for k, v in overrides.items():
        setattr(cfg, k, v)
    x, y = _as_2d(x_stream), _as_2d(y_stream)
    if x.shape[0] != y.shape[0]:
        raise ConfigError(f"x and y streams are misaligned: {x.shape[0]} vs {y.shape[0]} samples")
    if x.shape[0] < 2:
        raise ConfigError("MINE needs at least two samples")
    if cfg.project_dim:
        x = random_projection(x, cfg.project_dim, cfg.seed + 7919)
        y = random_projection(y, cfg.project_dim, cfg.seed + 104729)
    x, y = _standardize(x), _standardize(y)

    n = x.shape[0]
    batch = min(cfg.batch_size, n)
    rng = np.random.default_rng(cfg.seed)
    eval_rng = np.random.default_rng(cfg.seed + 1)
    net = MineNetwork(x.shape[1], y.shape[1], cfg.hidden, seed=cfg.seed)
    state = AdamState()
    trace = MiTrace()
    log_ema = None
    alpha = 1.0 - cfg.ema_decay

    for it in range(1, cfg.iterations + 1):
        idx = rng.choice(n, size=batch, replace=False)
        xb, yb = x[idx], y[idx]
        yb_m = shuffle_marginal(yb, rng)
        t_joint = net.forward(xb, yb)
        t_marg = net.forward(xb, yb_m)
        c = float(np.max(t_marg.data))
        scaled = exp(t_marg - c).mean()
        log_batch = c + math.log(float(scaled.data))
        if not math.isfinite(log_batch):
            log.warning("MINE aborted at iteration %d: non-finite partition estimate", it)
            break
        log_ema = (
            log_batch
            if log_ema is None
            else float(np.logaddexp(math.log(cfg.ema_decay) + log_ema, math.log(alpha) + log_batch))
        )
        # d/dθ of mean e^T divided by the running average of the partition
        loss = t_joint.mean() * -1.0 + scaled * math.exp(c - log_ema)
        backward(loss)
        grads = {k: p.grad for k, p in net.params.items()}
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            log.warning("MINE aborted at iteration %d: non-finite gradient", it)
            break
        adam_step(net.params, grads, state, cfg.lr)
        for p in net.params.values():
            p.grad = None
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            try:
                m, s = evaluate_bound(net, x, y, batch, eval_rng)
            except NumericError:
                log.warning("MINE aborted at iteration %d: non-finite bound", it)
                break
            trace.append(it, m, s)
    return net, trace


def mi_gate(trace: MiTrace, threshold: float) -> str:
    """``forward`` when the latest estimate is at or below ``threshold``, else ``withhold``."""
    if len(trace) == 0:
        raise ConfigError("cannot gate on an empty trace")
    return "forward" if trace.final <= threshold else "withhold"


def calibrate_threshold(noise_floor: MiTrace, margin: float = 1.0) -> float:
    return noise_floor.final + margin
