"""Training orchestration: client selection, batch rounds, epochs and early stopping."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from ..data import LoadSeries, Neighborhood, make_windows, normalize, split_train_val_test
from ..errors import ConfigError, DataError
from ..fedformer import (
    ModelConfig,
    SplitOneParams,
    SplitTwoParams,
    init_split1,
    init_split2,
    split1_forward,
    split2_forward,
)
from ..privacy import PrivacyBudget
from ..tensor import Tensor
from .bus import InProcessBus, MessageAudit
from .messages import PartyId
from .parties import (
    ClientData,
    ClientParty,
    GridStationParty,
    ServiceProviderParty,
    Split1Trace,
)

log = logging.getLogger(__name__)


class TrainingStrategy(str, Enum):
    GLOBAL = "SplitGlobal"
    PERSONAL = "SplitPersonal"

    @classmethod
    def parse(cls, text: str) -> "TrainingStrategy":
        if isinstance(text, cls):
            return text
        for s in cls:
            if s.value.lower() == str(text).strip().lower():
                return s
        raise ConfigError(f"unknown strategy {text!r}; choose SplitGlobal or SplitPersonal")


class ClientSelection(str, Enum):
    FIXED = "Fixed"
    RANDOM = "RandomPerEpoch"

    @classmethod
    def parse(cls, text: str) -> "ClientSelection":
        if isinstance(text, cls):
            return text
        for s in cls:
            if s.value.lower() == str(text).strip().lower():
                return s
        raise ConfigError(f"unknown client selection {text!r}; choose Fixed or RandomPerEpoch")


@dataclass
class TrainPlan:
    epochs: int = 10
    clients_per_gs: int = 10
    client_selection: ClientSelection = ClientSelection.FIXED
    batch_size: int = 32
    lr: float = 1e-4
    lr_decay: float = 0.5
    early_stop_patience: int = 3
    dp: PrivacyBudget = field(default_factory=PrivacyBudget)
    seed: int = 0
    threads: int = 1
    weights_per_epoch: bool = False
    timeout: float = 30.0

    def __post_init__(self):
        self.client_selection = ClientSelection.parse(self.client_selection)
        if self.clients_per_gs < 1:
            raise ConfigError("train.clients_per_gs must be >= 1")
        if self.early_stop_patience < 0:
            raise ConfigError("train.early_stop_patience must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("train.epochs and train.batch_size must be >= 1")
        if not self.lr > 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("train.lr must be > 0 and train.lr_decay in (0, 1]")
        if self.threads < 1:
            raise ConfigError("--threads must be >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay**epoch


def select_clients(
    gs: int, pool: Sequence[int], K: int, mode: ClientSelection | str, seed: int, epoch: int = 0
) -> list[int]:
    """Pick K clients of ``pool``; Fixed ignores ``epoch``, RandomPerEpoch redraws each epoch."""
    mode = ClientSelection.parse(mode)
    pool = sorted(pool)
    if len(pool) < K:
        raise ConfigError(f"grid station {gs} has {len(pool)} clients, fewer than K={K}")
    if len(pool) == K:
        return pool
    key = [seed, 11, gs] if mode == ClientSelection.FIXED else [seed, 12, gs, epoch]
    chosen = np.random.default_rng(key).choice(len(pool), size=K, replace=False)
    return sorted(pool[i] for i in chosen)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_mse: float
    val_mse: float
    test_mse: float


@dataclass
class TrainedModels:
    """Per-station Split-1 and Split-2 parameters; global Split-2 is one shared object."""

    cfg: ModelConfig
    strategy: TrainingStrategy
    split1: dict[int, SplitOneParams]
    split2: dict[int, SplitTwoParams]

    def arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}

        def put(prefix, ps):
            for k in sorted(ps.tensors):
                out[f"{prefix}/{k}"] = ps.tensors[k].data
            for k in sorted(ps.modes):
                out[f"{prefix}/modes/{k}"] = ps.modes[k]

        for g in sorted(self.split1):
            put(f"gs{g}/split1", self.split1[g])
        if self.strategy == TrainingStrategy.GLOBAL:
            put("sp/split2", self.split2[min(self.split2)])
        else:
            for g in sorted(self.split2):
                put(f"gs{g}/split2", self.split2[g])
        return out

    @classmethod
    def from_arrays(cls, cfg: ModelConfig, strategy: TrainingStrategy, arrays: dict[str, np.ndarray]):
        groups: dict[str, tuple[dict, dict]] = {}
        for name, arr in arrays.items():
            owner, half, rest = name.split("/", 2)
            t, m = groups.setdefault(f"{owner}/{half}", ({}, {}))
            if rest.startswith("modes/"):
                m[rest[6:]] = arr.astype(np.int64)
            else:
                t[rest] = Tensor(arr, requires_grad=True)
        stations = sorted(int(k[2:].split("/")[0]) for k in groups if k.startswith("gs") and k.endswith("split1"))
        split1 = {g: SplitOneParams(*groups[f"gs{g}/split1"]) for g in stations}
        if strategy == TrainingStrategy.GLOBAL:
            shared = SplitTwoParams(*groups["sp/split2"])
            split2 = {g: shared for g in stations}
        else:
            split2 = {g: SplitTwoParams(*groups[f"gs{g}/split2"]) for g in stations}
        return cls(cfg, strategy, split1, split2)


@dataclass
class TrainResult:
    models: TrainedModels
    history: list[EpochRecord]
    audit: MessageAudit
    stopped_early: bool = False


def initial_models(
    cfg: ModelConfig, stations: Sequence[int], strategy: TrainingStrategy, seed: int
) -> TrainedModels:
    split1 = {g: init_split1(cfg, np.random.SeedSequence([seed, 1, g])) for g in stations}
    if strategy == TrainingStrategy.GLOBAL:
        shared = init_split2(cfg, np.random.SeedSequence([seed, 2]))
        split2 = {g: shared for g in stations}
    else:
        split2 = {g: init_split2(cfg, np.random.SeedSequence([seed, 2, g])) for g in stations}
    return TrainedModels(cfg, strategy, split1, split2)


class Federation:
    """All parties of one run wired to a shared bus."""

    def __init__(
        self,
        cfg: ModelConfig,
        data: dict[int, list[ClientData]],
        plan: TrainPlan,
        models: TrainedModels,
        audit: MessageAudit | None = None,
    ):
        if not data or not any(data.values()):
            raise ConfigError("no client data supplied")
        self.cfg = cfg
        self.plan = plan
        self.models = models
        self.audit = audit if audit is not None else MessageAudit()
        self.bus = InProcessBus(self.audit, timeout=plan.timeout)
        self.clients: dict[PartyId, ClientParty] = {}
        for g in sorted(data):
            for d in data[g]:
                if d.gs_index != g:
                    raise ConfigError(f"client {d.client_id} is filed under station {g} but says {d.gs_index}")
                party = ClientParty(d, cfg, self.bus, plan.dp, plan.seed, self.audit)
                self.clients[party.pid] = party
        self.stations = {g: GridStationParty(g, models.split1[g], self.bus) for g in sorted(data)}
        self.provider = ServiceProviderParty(
            models.split2, models.strategy == TrainingStrategy.GLOBAL, cfg, self.bus
        )

    def pool(self, gs: int) -> list[int]:
        return sorted(p.client_index for p in self.clients if p.gs_index == gs)

    def _map(self, fn: Callable, items: list):
        if self.plan.threads == 1 or len(items) < 2:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.plan.threads) as pool:
            return list(pool.map(fn, items))

    def batch_round(
        self, epoch: int, b: int, selected: dict[int, list[int]], lr: float, active_gs: Sequence[int] | None = None
    ) -> None:
        """One pass of steps 1-8 for batch ``b`` across the active stations."""
        stations = sorted(selected if active_gs is None else active_gs)
        ids = {g: [PartyId.client(g, k) for k in selected[g]] for g in stations}
        traces: dict[int, dict[PartyId, Split1Trace]] = {}
        send_weights = not self.plan.weights_per_epoch or b == 0

        def up(g):
            gs = self.stations[g]
            if send_weights:
                gs.broadcast_weights(epoch, b, ids[g])
            tr = {}
            for c in ids[g]:
                t = self.clients[c].forward(epoch, b, self.plan.batch_size, receive_weights=send_weights)
                if t is not None:
                    tr[c] = t
            gs.forward_activations(epoch, b, ids[g])
            return tr

        for g, tr in zip(stations, self._map(up, stations)):
            traces[g] = tr
        # barrier: step 4 once every station has reported
        self._map(lambda g: self.provider.forward(g, epoch, b), stations)

        def down(g):
            gs = self.stations[g]
            gs.route_predictions(epoch, b)
            for c in ids[g]:
                self.clients[c].loss_step(epoch, b)
            gs.relay_loss_gradients(epoch, b)

        self._map(down, stations)
        # barrier: step 7
        sp_grads = dict(zip(stations, self._map(lambda g: self.provider.backward(g, epoch, b), stations)))
        self._map(lambda g: self.stations[g].backward_and_update(epoch, b, traces[g], lr), stations)
        self.provider.update(sp_grads, {g: len(ids[g]) for g in stations}, lr)


def predict_batch(models: TrainedModels, windows, gs_index: int) -> np.ndarray:
    if gs_index not in models.split1:
        raise LookupError(f"unknown grid station {gs_index}")
    acts = split1_forward(windows, models.split1[gs_index], models.cfg)
    return split2_forward(acts, models.split2[gs_index], models.cfg).data


def predict(models: TrainedModels, window, gs_index: int) -> np.ndarray:
    """Forecast ``[O, Z]`` for one window with the models of station ``gs_index``."""
    return predict_batch(models, [window], gs_index)[0]


def predict_windows(models: TrainedModels, windows: Sequence, gs_index: int, chunk: int = 64):
    """Predictions and targets for a list of windows, evaluated in chunks."""
    preds, targets = [], []
    for i in range(0, len(windows), chunk):
        part = list(windows[i : i + chunk])
        preds.append(predict_batch(models, part, gs_index))
        targets.append(np.stack([w.target for w in part]))
    if not preds:
        shape = (0, models.cfg.pred_len, models.cfg.n_series)
        return np.zeros(shape), np.zeros(shape)
    return np.concatenate(preds), np.concatenate(targets)


def split_mse(models: TrainedModels, data: dict[int, list[ClientData]], split: str) -> float:
    """Noise-free MSE pooled over every client's ``split`` windows."""
    sq, count = 0.0, 0
    for g in sorted(data):
        for d in data[g]:
            pred, target = predict_windows(models, getattr(d, split), g)
            sq += float(np.sum((pred - target) ** 2))
            count += pred.size
    return sq / count if count else float("nan")


def run_training(
    plan: TrainPlan,
    data: dict[int, list[ClientData]],
    strategy: TrainingStrategy | str,
    cfg: ModelConfig,
    models: TrainedModels | None = None,
    epoch_callback: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    strategy = TrainingStrategy.parse(strategy)
    if not data or not any(data.values()):
        raise ConfigError("training needs at least one client with data")
    stations = sorted(data)
    models = models or initial_models(cfg, stations, strategy, plan.seed)
    fed = Federation(cfg, data, plan, models)
    history: list[EpochRecord] = []
    best = np.inf
    wait = 0
    stopped = False
    for epoch in range(plan.epochs):
        selected = {
            g: select_clients(g, fed.pool(g), plan.clients_per_gs, plan.client_selection, plan.seed, epoch)
            for g in stations
        }
        parties = [fed.clients[PartyId.client(g, k)] for g in stations for k in selected[g]]
        n_batches = min(p.data.n_batches(plan.batch_size) for p in parties)
        if n_batches == 0:
            raise DataError(f"a selected client has fewer than batch_size={plan.batch_size} training windows")
        for p in parties:
            p.start_epoch(epoch)
            p.losses.clear()
        lr = plan.lr_at(epoch)
        for b in range(n_batches):
            fed.batch_round(epoch, b, selected, lr)
        train_mse = float(np.mean([loss for p in parties for loss in p.losses]))
        rec = EpochRecord(epoch + 1, lr, train_mse, split_mse(models, data, "val"), split_mse(models, data, "test"))
        history.append(rec)
        log.info(
            "epoch %d lr %.3g train %.5f val %.5f test %.5f", rec.epoch, lr, train_mse, rec.val_mse, rec.test_mse
        )
        if epoch_callback:
            epoch_callback(rec)
        if rec.val_mse < best:
            best, wait = rec.val_mse, 0
        else:
            wait += 1
            if wait >= plan.early_stop_patience:
                stopped = epoch + 1 < plan.epochs
                break
    if not fed.audit.clean:
        raise DataError("message audit found raw client data on the wire: " + "; ".join(fed.audit.violations[:3]))
    return TrainResult(models, history, fed.audit, stopped)


def prepare_clients(
    series: Sequence[LoadSeries],
    neighborhoods: Sequence[Neighborhood],
    cfg: ModelConfig,
    stride: int = 1,
    held_out: Sequence[str] = (),
) -> dict[int, list[ClientData]]:
    """Normalise each series, window it and split 7:1:2; ``held_out`` clients are skipped."""
    by_id = {s.client_id: s for s in series}
    skip = set(held_out)
    out: dict[int, list[ClientData]] = {}
    for nb in neighborhoods:
        rows = []
        for k, cid in enumerate(c for c in nb.client_ids if c not in skip):
            if cid not in by_id:
                raise DataError(f"neighbourhood {nb.gs_index} lists unknown client {cid}")
            windows = make_windows(normalize(by_id[cid]), cfg.seq_len, cfg.pred_len, stride)
            train, val, test = split_train_val_test(windows)
            rows.append(ClientData(nb.gs_index, k, cid, train, val, test))
        out[nb.gs_index] = rows
    return out


__all__ = [
    "ClientData",
    "ClientSelection",
    "EpochRecord",
    "Federation",
    "TrainPlan",
    "TrainResult",
    "TrainedModels",
    "TrainingStrategy",
    "initial_models",
    "predict",
    "predict_batch",
    "predict_windows",
    "prepare_clients",
    "run_training",
    "select_clients",
    "split_mse",
]
