"""End-to-end workflows shared by the command line and the acceptance suite."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .audit import MI_TARGETS, estimate_mi_pipeline
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (
    LoadSeries,
    Metrics,
    Neighborhood,
    agglomerative_cluster,
    load_series_csv,
    make_windows,
    metrics,
    normalize,
    split_train_val_test,
    synth_generator,
)
from .errors import ConfigError, DataError
from .mine import MiTrace
from .privacy import PrivacyBudget
from .protocol.parties import ClientData
from .protocol.training import (
    TrainedModels,
    TrainingStrategy,
    TrainResult,
    predict_windows,
    prepare_clients,
    run_training,
    split_mse,
)

log = logging.getLogger(__name__)


def load_series(rc: RunConfig) -> list[LoadSeries]:
    d = rc.values["data"]
    if d["source"] == "synth":
        return synth_generator(
            d["synth_clients"],
            d["synth_days"],
            d["synth_profile"],
            seed=d["synth_seed"],
            noise=d["synth_noise"],
            groups=d["synth_groups"],
        )
    return load_series_csv(d["path"])


def neighborhoods(rc: RunConfig, series: Sequence[LoadSeries]) -> list[Neighborhood]:
    """Cluster every client, held-out ones included, into ``data.n_gs`` neighbourhoods."""
    return agglomerative_cluster(series, rc.values["data"]["n_gs"])


def client_data(
    rc: RunConfig, series: Sequence[LoadSeries], nbs: Sequence[Neighborhood], stride: int | None = None
) -> dict[int, list[ClientData]]:
    d = rc.values["data"]
    return prepare_clients(series, nbs, rc.model, stride or d["stride"], held_out=d["held_out"])


@dataclass
class Workspace:
    """Series, neighbourhoods and prepared client data for one configuration."""

    series: list[LoadSeries]
    nbs: list[Neighborhood]
    data: dict[int, list[ClientData]]

    @classmethod
    def build(cls, rc: RunConfig) -> "Workspace":
        series = load_series(rc)
        unknown = set(rc.values["data"]["held_out"]) - {s.client_id for s in series}
        if unknown:
            raise ConfigError(f"data.held_out names unknown clients {sorted(unknown)}")
        nbs = neighborhoods(rc, series)
        return cls(series, nbs, client_data(rc, series, nbs))


def train(
    rc: RunConfig, ws: Workspace | None = None, budget: PrivacyBudget | None = None, seed: int | None = None
) -> tuple[TrainResult, Workspace]:
    ws = ws or Workspace.build(rc)
    result = run_training(rc.plan(budget, seed), ws.data, rc.strategy, rc.model)
    return result, ws


# checkpoints per party role ---------------------------------------------------------
def save_models(directory: str | Path, models: TrainedModels, ws: Workspace, seed: int) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = models.arrays()
    written = []
    for g in sorted(models.split1):
        prefix = f"gs{g}/split1/"
        part = {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}
        clients = [d.client_id for d in ws.data.get(g, [])]
        meta = {"role": "grid_station", "gs": g, "clients": clients, "seed": seed}
        path = directory / f"gs{g}_split1.sgck"
        save_checkpoint(path, models.cfg, part, meta)
        written.append(path)
    sp = {k: v for k, v in arrays.items() if "/split2/" in k}
    meta = {"role": "service_provider", "strategy": models.strategy.value, "seed": seed}
    path = directory / "sp_split2.sgck"
    save_checkpoint(path, models.cfg, sp, meta)
    written.append(path)
    return written


def load_models(directory: str | Path, rc: RunConfig) -> TrainedModels:
    directory = Path(directory)
    sp_path = directory / "sp_split2.sgck"
    if not sp_path.is_file():
        raise DataError(f"no service-provider checkpoint in {directory}")
    cfg, sp_arrays, meta = load_checkpoint(sp_path, expect=rc.model)
    strategy = TrainingStrategy.parse(meta["strategy"])
    arrays = dict(sp_arrays)
    for path in sorted(directory.glob("gs*_split1.sgck")):
        _, part, m = load_checkpoint(path, expect=rc.model)
        arrays.update({f"gs{m['gs']}/split1/{k}": v for k, v in part.items()})
    return TrainedModels.from_arrays(cfg, strategy, arrays)


# evaluation ---------------------------------------------------------------------------
def _metrics_or_nan(target: np.ndarray, pred: np.ndarray) -> Metrics:
    if target.size == 0:
        return Metrics(math.nan, math.nan, math.nan)
    try:
        return metrics(target, pred)
    except DataError:
        err = target - pred
        return Metrics(float(np.mean(np.abs(err))), float(np.mean(err**2)), math.nan)


def evaluate_own(models: TrainedModels, data: dict[int, list[ClientData]], split: str = "test") -> list[dict]:
    """Per-client, per-station and overall metrics with each client's own station models."""
    rows, all_p, all_t = [], [], []
    for g in sorted(data):
        gp, gt = [], []
        for d in data[g]:
            p, t = predict_windows(models, getattr(d, split), g)
            m = _metrics_or_nan(t, p)
            rows.append({"level": "client", "gs": g, "client": d.client_id, **m.__dict__})
            gp.append(p)
            gt.append(t)
        p, t = np.concatenate(gp), np.concatenate(gt)
        rows.append({"level": "gs", "gs": g, "client": "", **_metrics_or_nan(t, p).__dict__})
        all_p.append(p)
        all_t.append(t)
    m = _metrics_or_nan(np.concatenate(all_t), np.concatenate(all_p))
    overall = {"level": "all", "gs": "", "client": "", **m.__dict__}
    overall["mse"] = split_mse(models, data, split)
    rows.append(overall)
    return rows


def evaluate_cross(models: TrainedModels, data: dict[int, list[ClientData]], split: str = "test") -> list[list[float]]:
    """``k x k`` MSE: row = station whose models predict, column = neighbourhood whose data is used."""
    stations = sorted(data)
    matrix = []
    for model_gs in stations:
        row = []
        for data_gs in stations:
            sq, n = 0.0, 0
            for d in data[data_gs]:
                p, t = predict_windows(models, getattr(d, split), model_gs)
                sq += float(np.sum((p - t) ** 2))
                n += p.size
            row.append(sq / n if n else math.nan)
        matrix.append(row)
    return matrix


def evaluate_unseen(models: TrainedModels, rc: RunConfig, ws: Workspace) -> list[dict]:
    """Held-out clients, all of their windows, with the models of the neighbourhood they cluster into."""
    held = rc.values["data"]["held_out"]
    if not held:
        warnings.warn("unseen-clients scope: no clients are held out (data.held_out is empty)")
        return []
    by_id = {s.client_id: s for s in ws.series}
    home = {cid: nb.gs_index for nb in ws.nbs for cid in nb.client_ids}
    cfg = models.cfg
    rows = []
    for cid in held:
        g = home[cid]
        windows = make_windows(normalize(by_id[cid]), cfg.seq_len, cfg.pred_len, rc.values["data"]["stride"])
        p, t = predict_windows(models, windows, g)
        rows.append({"level": "client", "gs": g, "client": cid, **_metrics_or_nan(t, p).__dict__})
    return rows


# audits and sweeps --------------------------------------------------------------------
def audit_windows(rc: RunConfig, ws: Workspace, gs: int | None = None) -> list:
    """Training windows (stride 1) of every client at one station, in client order."""
    gs = rc.values["mine"]["gs"] if gs is None else gs
    if gs not in ws.data:
        raise ConfigError(f"mine.gs={gs} is not a grid station (have {sorted(ws.data)})")
    cfg = rc.model
    by_id = {s.client_id: s for s in ws.series}
    out = []
    for d in ws.data[gs]:
        windows = make_windows(normalize(by_id[d.client_id]), cfg.seq_len, cfg.pred_len, 1)
        out.extend(split_train_val_test(windows)[0])
    return out


def audit_mi(
    rc: RunConfig,
    models: TrainedModels,
    ws: Workspace,
    targets: Sequence[str] = MI_TARGETS,
    seed: int | None = None,
    budget: PrivacyBudget | None = None,
) -> dict[str, MiTrace]:
    seed = rc.seed if seed is None else seed
    gs = rc.values["mine"]["gs"]
    windows = audit_windows(rc, ws, gs)
    m = rc.values["mine"]
    return {
        t: estimate_mi_pipeline(
            models.split1[gs],
            models.cfg,
            windows,
            t,
            every_kth=m["every_kth"],
            batch_size=rc.values["train"]["batch_size"],
            noise_scale=m["noise_scale"],
            budget=budget,
            config=rc.mine(seed),
            seed=seed,
        )
        for t in targets
    }


def dp_sweep(
    rc: RunConfig,
    eps_list: Sequence[float],
    delta_list: Sequence[float] = (0.0,),
    seeds: Sequence[int] | None = None,
    with_mi: bool = True,
) -> list[dict]:
    """Train and audit once per ``(epsilon, delta, seed)``; ``epsilon = inf`` disables DP."""
    if not eps_list or not delta_list:
        raise ConfigError("dp-sweep needs at least one epsilon and one delta")
    seeds = [rc.seed] if seeds is None else list(seeds)
    ws = Workspace.build(rc)
    rows = []
    for eps in eps_list:
        for delta in delta_list:
            budget = PrivacyBudget(enabled=False) if math.isinf(eps) else PrivacyBudget(eps, delta, enabled=True)
            for seed in seeds:
                result, _ = train(rc, ws, budget, seed)
                m = [r for r in evaluate_own(result.models, ws.data) if r["level"] == "all"][0]
                row = {"epsilon": eps, "delta": delta, "seed": seed, "mae": m["mae"], "mse": m["mse"], "r2": m["r2"]}
                if with_mi:
                    target = "clean" if math.isinf(eps) else "noisy"
                    trace = audit_mi(rc, result.models, ws, [target], seed, budget)[target]
                    row.update(mi_mean=trace.final, mi_std=trace.final_std)
                log.info("sweep eps=%s delta=%s seed=%d mse=%.5f", eps, delta, seed, row["mse"])
                rows.append(row)
    return rows
