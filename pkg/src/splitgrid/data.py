"""Load series ingestion, normalisation, clustering, windowing and metrics."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

HOUR = np.timedelta64(1, "h")
SYNTH_START = np.datetime64("2016-07-01T00:00", "h")


@dataclass
class LoadSeries:
    client_id: str
    timestamps: np.ndarray  # datetime64[h]
    values: np.ndarray
    normalization: tuple[float, float] | None = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[h]")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.timestamps.shape != self.values.shape:
            raise DataError(f"client {self.client_id}: timestamps and values differ in length")
        if self.timestamps.size > 1 and np.any(np.diff(self.timestamps) != HOUR):
            raise DataError(f"client {self.client_id}: timestamps are not strictly hourly")

    def __len__(self) -> int:
        return self.values.size


@dataclass
class TimeSeriesWindow:
    X: np.ndarray  # [L, Z]
    X_t: np.ndarray  # [L, U]
    Y_t: np.ndarray  # [L/2 + O, U]
    target: np.ndarray  # [O, Z]
    start: int = 0


@dataclass
class WindowBatch:
    X: np.ndarray
    X_t: np.ndarray
    Y_t: np.ndarray
    target: np.ndarray

    def __len__(self) -> int:
        return self.X.shape[0]

    def rows(self, sl: slice) -> "WindowBatch":
        return WindowBatch(self.X[sl], self.X_t[sl], self.Y_t[sl], self.target[sl])


def stack_windows(windows: Sequence[TimeSeriesWindow]) -> WindowBatch:
    if not windows:
        raise DataError("cannot stack an empty list of windows")
    return WindowBatch(
        np.stack([w.X for w in windows]),
        np.stack([w.X_t for w in windows]),
        np.stack([w.Y_t for w in windows]),
        np.stack([w.target for w in windows]),
    )


@dataclass
class Neighborhood:
    gs_index: int
    client_ids: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class Metrics:
    mae: float
    mse: float
    r2: float


# ingestion -------------------------------------------------------------------------
def _parse_time(text: str, row: int) -> datetime:
    text = text.strip()
    for fmt in ("%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M"):
        try:
            return datetime.strptime(text, fmt)
        except ValueError:
            continue
    raise DataError(f"row {row}: unparseable timestamp {text!r}")


def load_series_csv(path: str | Path) -> list[LoadSeries]:
    """Read ``timestamp, client_1, client_2, ...`` (comma or semicolon delimited)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    lines = text.splitlines()
    if not lines:
        raise DataError(f"{path} is empty")
    delim = ";" if lines[0].count(";") > lines[0].count(",") else ","
    reader = csv.reader(lines, delimiter=delim)
    header = next(reader)
    clients = [h.strip() for h in header[1:]]
    if not clients:
        raise DataError(f"{path}: header has no client columns")
    stamps: list[datetime] = []
    rows: list[list[float]] = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec or all(not c.strip() for c in rec):
            continue
        if len(rec) != len(header):
            raise DataError(f"row {lineno}: expected {len(header)} fields, got {len(rec)}")
        ts = _parse_time(rec[0], lineno)
        if stamps:
            step = ts - stamps[-1]
            if step == timedelta(0):
                raise DataError(f"row {lineno}: duplicate timestamp {rec[0].strip()}")
            if step != timedelta(hours=1):
                raise DataError(f"row {lineno}: gap or disorder before {rec[0].strip()} (step {step})")
        stamps.append(ts)
        try:
            rows.append([float(c.replace(",", ".") if delim == ";" else c) for c in rec[1:]])
        except ValueError:
            raise DataError(f"row {lineno}: non-numeric reading") from None
    if not rows:
        raise DataError(f"{path} has a header but no readings")
    ts_arr = np.array(stamps, dtype="datetime64[h]")
    values = np.array(rows, dtype=np.float64)
    return [LoadSeries(cid, ts_arr.copy(), values[:, j].copy()) for j, cid in enumerate(clients)]


def write_series_csv(series: Sequence[LoadSeries], path: str | Path) -> None:
    path = Path(path)
    ts = series[0].timestamps
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date"] + [s.client_id for s in series])
        for i, t in enumerate(ts):
            stamp = t.astype(datetime).strftime("%Y-%m-%d %H:%M:%S")
            w.writerow([stamp] + [repr(float(s.values[i])) for s in series])


# normalisation ---------------------------------------------------------------------
def normalize(series: LoadSeries) -> LoadSeries:
    """Zero mean, unit population variance; stats are stored for the inverse."""
    mu = float(np.mean(series.values))
    sd = float(np.std(series.values))
    if sd == 0.0 or not np.isfinite(sd):
        raise DataError(f"client {series.client_id}: zero-variance series cannot be normalised")
    return replace(series, values=(series.values - mu) / sd, normalization=(mu, sd))


def denormalize(series: LoadSeries) -> LoadSeries:
    if series.normalization is None:
        return series
    mu, sd = series.normalization
    return replace(series, values=series.values * sd + mu, normalization=None)


# clustering ------------------------------------------------------------------------
def agglomerative_cluster(series: Sequence[LoadSeries], k: int = 3) -> list[Neighborhood]:
    """Average-linkage agglomeration on Euclidean distance until ``k`` clusters remain.

    Each series is normalised, then all are truncated to the shortest length.  Ties go to the pair with the
    smallest (row, column) position in input order.  Neighbourhoods are
    numbered by their earliest member.
    """
    n = len(series)
    if k < 1 or n < k:
        raise ConfigError(f"cannot form {k} clusters from {n} series")
    length = min(len(s) for s in series)
    data = np.stack([normalize(s).values[:length] for s in series])
    # direct differences rather than the Gram trick: cancellation noise would perturb tie-breaks
    d = np.stack([np.sqrt(np.sum((data - data[i]) ** 2, axis=1)) for i in range(n)])
    members = {i: [i] for i in range(n)}
    active = np.ones(n, dtype=bool)
    np.fill_diagonal(d, np.inf)
    while len(members) > k:
        masked = np.where(active[:, None] & active[None, :], d, np.inf)
        masked = np.triu(masked, 1) + np.tril(np.full((n, n), np.inf))
        i, j = np.unravel_index(int(np.argmin(masked)), masked.shape)
        ni, nj = len(members[i]), len(members[j])
        merged = (ni * d[i] + nj * d[j]) / (ni + nj)
        d[i, :] = merged
        d[:, i] = merged
        d[i, i] = np.inf
        active[j] = False
        d[j, :] = np.inf
        d[:, j] = np.inf
        members[i] = sorted(members[i] + members.pop(j))
    groups = sorted(members.values(), key=lambda g: g[0])
    return [Neighborhood(g, [series[m].client_id for m in grp]) for g, grp in enumerate(groups)]


# time features and windows --------------------------------------------------------
def time_feature_encode(timestamp) -> np.ndarray:
    """``(month, day-of-month, weekday, hour)`` each mapped affinely onto [-0.5, 0.5]."""
    t = np.datetime64(timestamp, "h").astype(datetime)
    return np.array(
        [
            (t.month - 1) / 11.0 - 0.5,
            (t.day - 1) / 30.0 - 0.5,
            t.weekday() / 6.0 - 0.5,
            t.hour / 23.0 - 0.5,
        ]
    )


def time_features(timestamps: np.ndarray) -> np.ndarray:
    return np.stack([time_feature_encode(t) for t in timestamps]) if len(timestamps) else np.zeros((0, 4))


def make_windows(series: LoadSeries, seq_len: int, pred_len: int, stride: int = 1) -> list[TimeSeriesWindow]:
    if stride < 1:
        raise ConfigError("window stride must be >= 1")
    n = len(series)
    if n < seq_len + pred_len:
        warnings.warn(f"client {series.client_id}: {n} points is shorter than L+O={seq_len + pred_len}")
        return []
    feats = time_features(series.timestamps)
    vals = series.values[:, None]
    half = seq_len // 2
    out = []
    for j in range(0, n - seq_len - pred_len + 1, stride):
        out.append(
            TimeSeriesWindow(
                X=vals[j : j + seq_len],
                X_t=feats[j : j + seq_len],
                Y_t=feats[j + half : j + seq_len + pred_len],
                target=vals[j + seq_len : j + seq_len + pred_len],
                start=j,
            )
        )
    return out


def split_train_val_test(windows: Sequence) -> tuple[list, list, list]:
    """Chronological 7:1:2 split.

    Train and validation take floors, validation at least one window when any
    are left after train; test takes the remainder (9 windows give 6/1/2).
    """
    n = len(windows)
    n_train = n * 7 // 10
    n_val = min(n - n_train, max(1, n // 10))
    windows = list(windows)
    return windows[:n_train], windows[n_train : n_train + n_val], windows[n_train + n_val :]


# metrics ---------------------------------------------------------------------------
def metrics(y_true, y_pred) -> Metrics:
    y = np.asarray(y_true, dtype=np.float64)
    yh = np.asarray(y_pred, dtype=np.float64)
    if y.shape != yh.shape:
        raise ConfigError(f"metric inputs differ in shape: {y.shape} vs {yh.shape}")
    err = y - yh
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise DataError("R^2 is undefined for a constant target")
    return Metrics(
        mae=float(np.mean(np.abs(err))),
        mse=float(np.mean(err**2)),
        r2=1.0 - float(np.sum(err**2)) / ss_tot,
    )


# synthetic data ---------------------------------------------------------------------
def synth_generator(
    n_clients: int,
    days: int,
    profile: str = "sinusoid-mix",
    seed: int = 0,
    noise: float = 0.1,
    weekly: float = 0.3,
    groups: int = 2,
) -> list[LoadSeries]:
    """Hourly synthetic loads with daily and weekly cycles.

    ``cluster-separable`` plants ``groups`` families whose daily harmonic
    differs (24 h, 12 h, 8 h, ...); client ``i`` belongs to family ``i % groups``.
    Phases are computed from ``t mod period`` so noiseless series repeat exactly.
    """
    if profile not in ("sinusoid-mix", "cluster-separable"):
        raise ConfigError(f"unknown synthetic profile {profile!r}")
    rng = np.random.default_rng(seed)
    hours = days * 24
    t = np.arange(hours)
    stamps = SYNTH_START + t.astype("timedelta64[h]")
    out = []
    for i in range(n_clients):
        base = rng.uniform(1.0, 3.0)
        amp = rng.uniform(0.5, 1.5)
        phase = rng.uniform(0, 2 * np.pi)
        w_amp = weekly * rng.uniform(0.5, 1.5)
        w_phase = rng.uniform(0, 2 * np.pi)
        if profile == "cluster-separable":
            period = 24 // (1 + i % groups)
            day = amp * np.sin(2 * np.pi * (t % period) / period + 0.1 * phase)
        else:
            day = amp * np.sin(2 * np.pi * (t % 24) / 24 + phase) + 0.3 * amp * np.sin(
                2 * np.pi * (t % 12) / 12 + 2 * phase
            )
        week = w_amp * np.sin(2 * np.pi * (t % 168) / 168 + w_phase) if w_amp else 0.0
        eps = noise * rng.standard_normal(hours) if noise else 0.0
        out.append(LoadSeries(f"MT_{i + 1:03d}", stamps.copy(), base + day + week + eps))
    return out
