"""Command-line entry point: ``splitgrid <command> [options]``.

Every command writes CSV files plus ``manifest_<command>.txt`` into ``--out``.
Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric or protocol failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import math
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Iterable, Sequence

from . import __version__
from .config import PRESETS, RunConfig, load_run_config, render_config
from .data import agglomerative_cluster, write_series_csv
from .errors import ConfigError, SplitGridError
from .experiments import (
    Workspace,
    audit_mi,
    dp_sweep,
    evaluate_cross,
    evaluate_own,
    evaluate_unseen,
    load_models,
    load_series,
    save_models,
    train,
)
from .overhead import OverheadParams, report_csv, shares_and_latency

log = logging.getLogger("splitgrid")

SCOPES = ("own", "cross-neighbourhood", "unseen-clients")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.17g}"
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def write_manifest(out: Path, command: str, rc: RunConfig, outputs: Sequence[Path]) -> Path:
    lines = [
        f"command: {command}",
        f"splitgrid_version: {__version__}",
        f"preset: {rc.preset}",
        f"config_hash: {rc.hash()}",
        f"seed: {rc.seed}",
        f"data_seed: {rc.values['data']['synth_seed']}",
    ]
    lines.append("outputs:")
    for p in sorted(outputs):
        digest = hashlib.sha256(p.read_bytes()).hexdigest()
        lines.append(f"  {p.relative_to(out).as_posix()} sha256={digest}")
    path = out / f"manifest_{command}.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _parse_sets(items: Sequence[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _floats(text: str, name: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"{name} must be a comma-separated list of numbers") from None
    if not vals:
        raise ConfigError(f"{name} is empty")
    return vals


def _ints(text: str, name: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"{name} must be a comma-separated list of integers") from None


# commands -----------------------------------------------------------------------------
def cmd_synth(rc: RunConfig, args) -> list[Path]:
    path = rc.out / "series.csv"
    d = rc.values["data"]
    if d["source"] != "synth":
        raise ConfigError("synth needs data.source = synth")
    write_series_csv(load_series(rc), path)
    return [path]


def cmd_cluster(rc: RunConfig, args) -> list[Path]:
    series = load_series(rc)
    nbs = agglomerative_cluster(series, rc.values["data"]["n_gs"])
    rows = [(nb.gs_index, cid) for nb in nbs for cid in nb.client_ids]
    return [write_csv(rc.out / "neighborhoods.csv", ["gs", "client_id"], rows)]


def cmd_train(rc: RunConfig, args) -> list[Path]:
    result, ws = train(rc)
    out = rc.out
    hist = write_csv(
        out / "history.csv",
        ["epoch", "lr", "train_mse", "val_mse", "test_mse"],
        [(r.epoch, r.lr, r.train_mse, r.val_mse, r.test_mse) for r in result.history],
    )
    nb = write_csv(
        out / "neighborhoods.csv", ["gs", "client_id"], [(n.gs_index, c) for n in ws.nbs for c in n.client_ids]
    )
    cfg_path = out / "config.ini"
    cfg_path.write_text(render_config(rc), encoding="utf-8")
    ckpts = save_models(out / "checkpoints", result.models, ws, rc.seed)
    return [hist, nb, cfg_path, *ckpts]


def cmd_evaluate(rc: RunConfig, args) -> list[Path]:
    ckpt = Path(args.checkpoint) if args.checkpoint else rc.out / "checkpoints"
    models = load_models(ckpt, rc)
    ws = Workspace.build(rc)
    path = rc.out / f"metrics_{args.scope}.csv"
    if args.scope == "own":
        rows = evaluate_own(models, ws.data, args.split)
        return [write_csv(path, ["level", "gs", "client", "mae", "mse", "r2"], [list(r.values()) for r in rows])]
    if args.scope == "cross-neighbourhood":
        matrix = evaluate_cross(models, ws.data, args.split)
        stations = sorted(ws.data)
        header = ["model_gs"] + [f"data_gs{g}" for g in stations]
        return [write_csv(path, header, [[g, *row] for g, row in zip(stations, matrix)])]
    rows = evaluate_unseen(models, rc, ws)
    return [write_csv(path, ["level", "gs", "client", "mae", "mse", "r2"], [list(r.values()) for r in rows])]


def cmd_dp_sweep(rc: RunConfig, args) -> list[Path]:
    eps = _floats(args.eps, "--eps")
    deltas = _floats(args.delta, "--delta")
    seeds = _ints(args.seeds, "--seeds") if args.seeds else None
    rows = dp_sweep(rc, eps, deltas, seeds, with_mi=not args.no_mi)
    header = ["epsilon", "delta", "seed", "mae", "mse", "r2"] + ([] if args.no_mi else ["mi_mean", "mi_std"])
    return [write_csv(rc.out / "dp_sweep.csv", header, [[r[h] for h in header] for r in rows])]


def cmd_audit_mi(rc: RunConfig, args) -> list[Path]:
    ckpt = Path(args.checkpoint) if args.checkpoint else rc.out / "checkpoints"
    models = load_models(ckpt, rc)
    ws = Workspace.build(rc)
    traces = audit_mi(rc, models, ws)
    rows = [(name, e, m, s) for name, tr in traces.items() for e, m, s in zip(tr.epochs, tr.means, tr.stds)]
    return [write_csv(rc.out / "mi_traces.csv", ["series", "iteration", "mean", "std"], rows)]


def cmd_overhead(rc: RunConfig, args) -> list[Path]:
    params = OverheadParams()
    names = {f.name: f.type for f in fields(OverheadParams)}
    for item in args.param or []:
        key, sep, value = item.partition("=")
        if not sep or key not in names:
            raise ConfigError(f"--param expects one of {', '.join(names)} as KEY=VALUE, got {item!r}")
        caster = float if key == "backward_factor" else int
        try:
            params = replace(params, **{key: caster(value)})
        except ValueError:
            raise ConfigError(f"--param {key}: cannot parse {value!r}") from None
    report = shares_and_latency(
        params, args.gs_speedup, args.gs_time_budget, None if args.computed_share else args.assumed_share
    )
    text = report_csv(report)
    path = rc.out / "overhead.csv"
    path.write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return [path]


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "dp-sweep": cmd_dp_sweep,
    "audit-mi": cmd_audit_mi,
    "overhead": cmd_overhead,
    "cluster": cmd_cluster,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="configuration file (sectioned key = value)")
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk", help="default values to start from")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--threads", type=int, help="worker threads for per-station pipelines")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="splitgrid", description="Split-learning load forecasting simulator")
    parser.add_argument("--version", action="version", version=f"splitgrid {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train split models; writes history and checkpoints")
    ev = sub.add_parser("evaluate", parents=[common], help="metrics of a trained checkpoint")
    ev.add_argument("--checkpoint", help="checkpoint directory (default: OUT/checkpoints)")
    ev.add_argument("--scope", choices=SCOPES, default="own")
    ev.add_argument("--split", choices=["train", "val", "test"], default="test")
    dp = sub.add_parser("dp-sweep", parents=[common], help="train and audit across privacy budgets")
    dp.add_argument("--eps", default="0.5,1,2.5,5,10", help="comma-separated epsilons; 'inf' disables DP")
    dp.add_argument("--delta", default="0", help="comma-separated deltas; 0 selects Laplace noise")
    dp.add_argument("--seeds", help="comma-separated seeds (default: run.seed)")
    dp.add_argument("--no-mi", action="store_true", help="skip the MI audit columns")
    au = sub.add_parser("audit-mi", parents=[common], help="MI traces for self, noise, clean and noisy targets")
    au.add_argument("--checkpoint", help="checkpoint directory (default: OUT/checkpoints)")
    ov = sub.add_parser("overhead", parents=[common], help="communication, computation and latency report")
    ov.add_argument("--param", action="append", metavar="KEY=VALUE", help="override an overhead parameter")
    ov.add_argument("--gs-speedup", type=float, default=5.0)
    ov.add_argument("--gs-time-budget", type=float, default=10.0)
    ov.add_argument("--assumed-share", type=float, default=0.05)
    ov.add_argument("--computed-share", action="store_true", help="use the computed round share for latency")
    sub.add_parser("cluster", parents=[common], help="group clients into neighbourhoods")
    sub.add_parser("synth", parents=[common], help="write a synthetic load CSV")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        rc = load_run_config(args.config, args.preset, _parse_sets(args.set), args.seed, args.threads, args.out)
        rc.out.mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[args.command](rc, args)
        name = args.command.replace("-", "_")
        if args.command == "evaluate":
            name += "_" + args.scope.replace("-", "_")
        write_manifest(rc.out, name, rc, outputs)
    except SplitGridError as exc:
        print(f"splitgrid: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"splitgrid: error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
