"""Run configuration: a sectioned key-value file with a typed schema and named presets.

Example::

    [data]
    source = synth
    synth_clients = 4

    [train]
    strategy = SplitPersonal
    epochs = 3

Every key has a declared type; unknown sections or keys and values that do
not parse are reported as ``section.key``.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigError
from .fedformer import ModelConfig
from .mine import MineConfig
from .privacy import PrivacyBudget
from .protocol.training import ClientSelection, TrainingStrategy, TrainPlan


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


def _str_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


SCHEMA: dict[str, dict[str, Callable[[str], Any]]] = {
    "data": {
        "source": str,
        "path": str,
        "synth_clients": int,
        "synth_days": int,
        "synth_profile": str,
        "synth_noise": float,
        "synth_groups": int,
        "synth_seed": int,
        "stride": int,
        "n_gs": int,
        "held_out": _str_list,
    },
    "model": {
        "seq_len": int,
        "pred_len": int,
        "d_model": int,
        "d_ff": int,
        "modes": int,
        "heads": int,
        "decomp_kernel": int,
    },
    "train": {
        "strategy": str,
        "epochs": int,
        "clients_per_gs": int,
        "client_selection": str,
        "batch_size": int,
        "lr": float,
        "lr_decay": float,
        "patience": int,
        "weights_per_epoch": _bool,
        "timeout": float,
    },
    "dp": {"enabled": _bool, "epsilon": float, "delta": float},
    "mine": {
        "iterations": int,
        "batch_size": int,
        "lr": float,
        "eval_every": int,
        "project_dim": _opt_int,
        "every_kth": int,
        "noise_scale": float,
        "gs": int,
    },
    "run": {"seed": int, "threads": int},
}

PRESETS: dict[str, dict[str, dict[str, Any]]] = {
    "paper": {
        "data": {
            "source": "csv",
            "path": "",
            "synth_clients": 30,
            "synth_days": 365,
            "synth_profile": "sinusoid-mix",
            "synth_noise": 0.1,
            "synth_groups": 3,
            "synth_seed": 0,
            "stride": 1,
            "n_gs": 3,
            "held_out": [],
        },
        "model": {
            "seq_len": 96,
            "pred_len": 96,
            "d_model": 512,
            "d_ff": 2048,
            "modes": 47,
            "heads": 1,
            "decomp_kernel": 25,
        },
        "train": {
            "strategy": "SplitGlobal",
            "epochs": 10,
            "clients_per_gs": 10,
            "client_selection": "Fixed",
            "batch_size": 32,
            "lr": 1e-4,
            "lr_decay": 0.5,
            "patience": 3,
            "weights_per_epoch": False,
            "timeout": 600.0,
        },
        "dp": {"enabled": False, "epsilon": 1.0, "delta": 0.0},
        "mine": {
            "iterations": 10000,
            "batch_size": 100,
            "lr": 1e-3,
            "eval_every": 500,
            "project_dim": 256,
            "every_kth": 10,
            "noise_scale": 2.0,
            "gs": 0,
        },
        "run": {"seed": 0, "threads": 1},
    },
    "desk": {
        "data": {
            "source": "synth",
            "path": "",
            "synth_clients": 4,
            "synth_days": 60,
            "synth_profile": "cluster-separable",
            "synth_noise": 0.05,
            "synth_groups": 2,
            "synth_seed": 0,
            "stride": 8,
            "n_gs": 2,
            "held_out": [],
        },
        "model": {
            "seq_len": 48,
            "pred_len": 24,
            "d_model": 32,
            "d_ff": 64,
            "modes": 8,
            "heads": 1,
            "decomp_kernel": 13,
        },
        "train": {
            "strategy": "SplitGlobal",
            "epochs": 5,
            "clients_per_gs": 2,
            "client_selection": "Fixed",
            "batch_size": 8,
            "lr": 2e-3,
            "lr_decay": 0.5,
            "patience": 3,
            "weights_per_epoch": False,
            "timeout": 60.0,
        },
        "dp": {"enabled": False, "epsilon": 1.0, "delta": 0.0},
        "mine": {
            "iterations": 2000,
            "batch_size": 100,
            "lr": 1e-3,
            "eval_every": 400,
            "project_dim": 64,
            "every_kth": 1,
            "noise_scale": 2.0,
            "gs": 0,
        },
        "run": {"seed": 0, "threads": 1},
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]]
    preset: str = "desk"
    config_path: str | None = None
    out: Path = field(default_factory=lambda: Path("out"))

    def get(self, section: str, key: str) -> Any:
        return self.values[section][key]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    @property
    def threads(self) -> int:
        return self.values["run"]["threads"]

    @property
    def model(self) -> ModelConfig:
        m = self.values["model"]
        try:
            return ModelConfig(n_series=1, n_time_features=4, seed=self.seed, **m)
        except TypeError as exc:
            raise ConfigError(f"model: {exc}") from None

    @property
    def budget(self) -> PrivacyBudget:
        d = self.values["dp"]
        return PrivacyBudget(epsilon=d["epsilon"], delta=d["delta"], enabled=d["enabled"])

    @property
    def strategy(self) -> TrainingStrategy:
        return TrainingStrategy.parse(self.values["train"]["strategy"])

    def plan(self, budget: PrivacyBudget | None = None, seed: int | None = None) -> TrainPlan:
        t = self.values["train"]
        return TrainPlan(
            epochs=t["epochs"],
            clients_per_gs=t["clients_per_gs"],
            client_selection=ClientSelection.parse(t["client_selection"]),
            batch_size=t["batch_size"],
            lr=t["lr"],
            lr_decay=t["lr_decay"],
            early_stop_patience=t["patience"],
            dp=self.budget if budget is None else budget,
            seed=self.seed if seed is None else seed,
            threads=self.threads,
            weights_per_epoch=t["weights_per_epoch"],
            timeout=t["timeout"],
        )

    def mine(self, seed: int | None = None) -> MineConfig:
        m = self.values["mine"]
        return MineConfig(
            iterations=m["iterations"],
            batch_size=m["batch_size"],
            lr=m["lr"],
            eval_every=m["eval_every"],
            project_dim=m["project_dim"],
            seed=self.seed if seed is None else seed,
        )

    def canonical(self) -> str:
        """Effective settings as sorted JSON, without the thread count."""
        vals = {s: dict(v) for s, v in self.values.items()}
        vals["run"] = {k: v for k, v in vals["run"].items() if k != "threads"}
        return json.dumps(vals, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    def validate(self) -> None:
        d = self.values["data"]
        if d["source"] not in ("synth", "csv"):
            raise ConfigError(f"data.source must be 'synth' or 'csv', got {d['source']!r}")
        if d["source"] == "csv":
            if not d["path"]:
                raise ConfigError("data.path is required when data.source = csv")
            if not Path(d["path"]).is_file():
                raise ConfigError(f"data.path {d['path']!r} does not exist")
        if d["n_gs"] < 1:
            raise ConfigError("data.n_gs must be >= 1")
        if d["stride"] < 1:
            raise ConfigError("data.stride must be >= 1")
        self.model
        self.strategy
        self.plan()
        if self.values["mine"]["every_kth"] < 1:
            raise ConfigError("mine.every_kth must be >= 1")


def _parse_value(section: str, key: str, text: str) -> Any:
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    try:
        return SCHEMA[section][key](text)
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: cannot parse {text!r} ({exc})") from None


def load_run_config(
    path: str | Path | None = None,
    preset: str = "desk",
    overrides: dict[str, str] | None = None,
    seed: int | None = None,
    threads: int | None = None,
    out: str | Path | None = None,
) -> RunConfig:
    """Preset defaults, then the file, then ``section.key=value`` overrides, then CLI flags."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose {', '.join(PRESETS)}")
    values = {s: dict(v) for s, v in PRESETS[preset].items()}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        for section in parser.sections():
            for key, text in parser.items(section):
                values[section][key] = _parse_value(section, key, text)
    for dotted, text in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        values.setdefault(section, {})
        values[section][key] = _parse_value(section, key, text)
    if seed is not None:
        values["run"]["seed"] = seed
    if threads is not None:
        values["run"]["threads"] = threads
    rc = RunConfig(values, preset, str(path) if path else None, Path(out) if out else Path("out"))
    rc.validate()
    return rc


def render_config(rc: RunConfig) -> str:
    """The effective configuration in file syntax, without the thread count."""
    lines = []
    for section, vals in rc.values.items():
        lines.append(f"[{section}]")
        for k, v in vals.items():
            if section == "run" and k == "threads":
                continue
            if isinstance(v, list):
                v = ", ".join(v)
            elif v is None:
                v = "none"
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
