"""Client, grid-station and service-provider state machines.

Each party owns its parameters and talks to the others only through the
bus.  The one exception is :class:`Split1Trace`: the client's forward tape is
handed to its grid station in-process so the station can backpropagate
Split-1 on the client's behalf.  On a real deployment the station would
recompute the forward pass instead; the result is identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..data import TimeSeriesWindow, WindowBatch, stack_windows
from ..errors import NumericError, ProtocolError
from ..fedformer import (
    ACTIVATION_NAMES,
    ModelConfig,
    SplitOneActivations,
    SplitOneParams,
    SplitTwoParams,
    split1_forward,
    split2_forward,
)
from ..optim import AdamState, adam_step
from ..privacy import PrivacyBudget, protect_activations
from ..tensor import Tensor, concat, vjp
from .bus import InProcessBus, MessageAudit
from .messages import GRADIENT_TENSORS, MessageKind, PartyId, PartyMessage


def pack_split1(params: SplitOneParams) -> dict[str, np.ndarray]:
    out = {f"param/{k}": t.data for k, t in params.tensors.items()}
    out.update({f"modes/{k}": v.astype(np.float64) for k, v in params.modes.items()})
    return out


def unpack_split1(tensors: dict[str, np.ndarray]) -> SplitOneParams:
    p, m = {}, {}
    for name, arr in tensors.items():
        kind, _, key = name.partition("/")
        if kind == "param":
            p[key] = Tensor(arr, requires_grad=True)
        else:
            m[key] = arr.astype(np.int64)
    return SplitOneParams(p, m)


def average_client_gradients(grads: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Elementwise mean over clients, summed in list order."""
    if not grads:
        raise ProtocolError("no client gradients to average")
    names = list(grads[0])
    for i, g in enumerate(grads[1:], start=1):
        if set(g) != set(names):
            raise ProtocolError(f"client {i} gradient names differ from client 0")
        for n in names:
            if g[n].shape != grads[0][n].shape:
                raise ProtocolError(f"gradient {n!r}: client {i} shape {g[n].shape} vs {grads[0][n].shape}")
    out = {}
    for n in names:
        acc = np.array(grads[0][n], dtype=np.float64)
        for g in grads[1:]:
            acc = acc + g[n]
        out[n] = acc / len(grads)
    return out


@dataclass
class ClientData:
    """Private windows held by one smart meter."""

    gs_index: int
    client_index: int
    client_id: str
    train: list[TimeSeriesWindow] = field(default_factory=list)
    val: list[TimeSeriesWindow] = field(default_factory=list)
    test: list[TimeSeriesWindow] = field(default_factory=list)

    def n_batches(self, batch_size: int) -> int:
        return len(self.train) // batch_size


@dataclass
class Split1Trace:
    client: PartyId
    params: SplitOneParams
    outputs: tuple[Tensor, Tensor, Tensor]

    def gradients(self, seeds: list[np.ndarray]) -> dict[str, np.ndarray]:
        names = sorted(self.params.tensors)
        grads = vjp(self.outputs, seeds, [self.params.tensors[n] for n in names])
        return dict(zip(names, grads))


class ClientParty:
    def __init__(
        self,
        data: ClientData,
        cfg: ModelConfig,
        bus: InProcessBus,
        budget: PrivacyBudget,
        seed: int,
        audit: MessageAudit | None = None,
    ):
        self.data = data
        self.cfg = cfg
        self.bus = bus
        self.budget = budget
        self.seed = seed
        self.audit = audit
        self.pid = PartyId.client(data.gs_index, data.client_index)
        self.gs = PartyId.grid_station(data.gs_index)
        self.silent = False
        self.losses: list[float] = []
        self._order = np.arange(len(data.train))
        self._params: SplitOneParams | None = None
        self._target: np.ndarray | None = None

    def start_epoch(self, epoch: int) -> None:
        rng = np.random.default_rng([self.seed, 13, self.data.gs_index, self.data.client_index, epoch])
        self._order = rng.permutation(len(self.data.train))

    def batch(self, b: int, batch_size: int) -> WindowBatch:
        idx = self._order[b * batch_size : (b + 1) * batch_size]
        return stack_windows([self.data.train[i] for i in idx])

    def forward(self, epoch: int, b: int, batch_size: int, receive_weights: bool = True) -> Split1Trace | None:
        """Steps 1-2: take the station's weights, run Split-1, ship (optionally noised) activations."""
        if receive_weights or self._params is None:
            msg = self.bus.recv(self.pid, MessageKind.SPLIT1_WEIGHTS, self.gs)
            self._params = unpack_split1(msg.tensors)
        batch = self.batch(b, batch_size)
        if self.audit is not None:
            self.audit.forbid(batch.X, batch.target)
        if self.silent:
            return None
        acts = split1_forward(batch, self._params, self.cfg)
        rng = np.random.default_rng([self.seed, 2, self.data.gs_index, self.data.client_index, epoch, b])
        shipped = protect_activations(acts, self.budget, rng)
        self.bus.send(
            PartyMessage(
                MessageKind.ACTIVATIONS,
                self.pid,
                self.gs,
                epoch,
                b,
                {n: t.data for n, t in zip(ACTIVATION_NAMES, shipped.as_tuple())},
            )
        )
        self._target = batch.target
        return Split1Trace(self.pid, self._params, shipped.as_tuple())

    def loss_step(self, epoch: int, b: int) -> None:
        """Step 6: MSE against private targets; only d loss / d prediction leaves the client."""
        msg = self.bus.recv(self.pid, MessageKind.PREDICTIONS, self.gs)
        diff = msg.tensors["prediction"] - self._target
        loss = float(np.mean(diff * diff))
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at {self.pid}, epoch {epoch}, batch {b}")
        self.losses.append(loss)
        self.bus.send(
            PartyMessage(
                MessageKind.LOSS_GRADIENTS, self.pid, self.gs, epoch, b, {"loss_grad": 2.0 * diff / diff.size}
            )
        )


class GridStationParty:
    def __init__(self, gs_index: int, params: SplitOneParams, bus: InProcessBus):
        self.gs_index = gs_index
        self.pid = PartyId.grid_station(gs_index)
        self.params = params
        self.bus = bus
        self.adam = AdamState()
        self._sizes: list[tuple[PartyId, int]] = []

    def broadcast_weights(self, epoch: int, b: int, clients: list[PartyId]) -> None:
        payload = pack_split1(self.params)
        for c in clients:
            self.bus.send(PartyMessage(MessageKind.SPLIT1_WEIGHTS, self.pid, c, epoch, b, payload))

    def forward_activations(self, epoch: int, b: int, clients: list[PartyId]) -> None:
        """Step 3: concatenate client activations in client order and pass them up."""
        parts = [self.bus.recv(self.pid, MessageKind.ACTIVATIONS, c) for c in clients]
        self._sizes = [(c, m.tensors["enc_out"].shape[0]) for c, m in zip(clients, parts)]
        merged = {n: np.concatenate([m.tensors[n] for m in parts], axis=0) for n in ACTIVATION_NAMES}
        self.bus.send(PartyMessage(MessageKind.ACTIVATIONS, self.pid, PartyId.provider(), epoch, b, merged))

    def _split(self, arr: np.ndarray) -> list[tuple[PartyId, np.ndarray]]:
        out, start = [], 0
        for c, n in self._sizes:
            out.append((c, arr[start : start + n]))
            start += n
        return out

    def route_predictions(self, epoch: int, b: int) -> None:
        msg = self.bus.recv(self.pid, MessageKind.PREDICTIONS, PartyId.provider())
        for c, part in self._split(msg.tensors["prediction"]):
            self.bus.send(PartyMessage(MessageKind.PREDICTIONS, self.pid, c, epoch, b, {"prediction": part}))

    def relay_loss_gradients(self, epoch: int, b: int) -> None:
        parts = [self.bus.recv(self.pid, MessageKind.LOSS_GRADIENTS, c).tensors["loss_grad"] for c, _ in self._sizes]
        self.bus.send(
            PartyMessage(
                MessageKind.LOSS_GRADIENTS,
                self.pid,
                PartyId.provider(),
                epoch,
                b,
                {"loss_grad": np.concatenate(parts, axis=0)},
            )
        )

    def backward_and_update(self, epoch: int, b: int, traces: dict[PartyId, Split1Trace], lr: float) -> None:
        """Step 7-8: split the provider's activation gradients, backprop per client, average, ADAM."""
        msg = self.bus.recv(self.pid, MessageKind.ACTIVATION_GRADIENTS, PartyId.provider())
        per_name = {n: dict(self._split(msg.tensors[n])) for n in GRADIENT_TENSORS}
        grads = []
        for c, _ in self._sizes:
            seeds = [per_name[n][c] for n in GRADIENT_TENSORS]
            grads.append(traces[c].gradients(seeds))
        adam_step(self.params.tensors, average_client_gradients(grads), self.adam, lr)


class ServiceProviderParty:
    """Holds one shared Split-2 (global) or one per station (personal)."""

    def __init__(self, models: dict[int, SplitTwoParams], shared: bool, cfg: ModelConfig, bus: InProcessBus):
        self.pid = PartyId.provider()
        self.models = models
        self.shared = shared
        self.cfg = cfg
        self.bus = bus
        keys = ["global"] if shared else sorted(models)
        self.adam = {k: AdamState() for k in keys}
        self._tapes: dict[int, tuple[SplitOneActivations, Tensor]] = {}

    def forward(self, gs: int, epoch: int, b: int) -> None:
        station = PartyId.grid_station(gs)
        msg = self.bus.recv(self.pid, MessageKind.ACTIVATIONS, station)
        leaves = SplitOneActivations(*(Tensor(msg.tensors[n], requires_grad=True) for n in ACTIVATION_NAMES))
        pred = split2_forward(leaves, self.models[gs], self.cfg)
        self._tapes[gs] = (leaves, pred)
        self.bus.send(PartyMessage(MessageKind.PREDICTIONS, self.pid, station, epoch, b, {"prediction": pred.data}))

    def backward(self, gs: int, epoch: int, b: int) -> dict[str, np.ndarray]:
        """Step 7: backprop one station's slice; returns the summed Split-2 gradients."""
        station = PartyId.grid_station(gs)
        seed = self.bus.recv(self.pid, MessageKind.LOSS_GRADIENTS, station).tensors["loss_grad"]
        leaves, pred = self._tapes.pop(gs)
        model = self.models[gs]
        names = sorted(model.tensors)
        grads = vjp([pred], [seed], [*leaves.as_tuple(), *(model.tensors[n] for n in names)])
        self.bus.send(
            PartyMessage(
                MessageKind.ACTIVATION_GRADIENTS,
                self.pid,
                station,
                epoch,
                b,
                dict(zip(GRADIENT_TENSORS, grads[:3])),
            )
        )
        return dict(zip(names, grads[3:]))

    def update(self, grads: dict[int, dict[str, np.ndarray]], n_clients: dict[int, int], lr: float) -> None:
        """Step 8: mean over client slices, reduced in station order."""
        order = sorted(grads)
        if self.shared:
            total = {n: g.copy() for n, g in grads[order[0]].items()}
            for g in order[1:]:
                for n in total:
                    total[n] = total[n] + grads[g][n]
            count = sum(n_clients[g] for g in order)
            avg = {n: v / count for n, v in total.items()}
            adam_step(self.models[order[0]].tensors, avg, self.adam["global"], lr)
        else:
            for g in order:
                avg = {n: v / n_clients[g] for n, v in grads[g].items()}
                adam_step(self.models[g].tensors, avg, self.adam[g], lr)
