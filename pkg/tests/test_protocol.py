import socket
import struct
import threading

import numpy as np
import pytest

from splitgrid.data import Neighborhood, TimeSeriesWindow, WindowBatch, synth_generator
from splitgrid.errors import ConfigError, DataError, ProtocolError, VersionError
from splitgrid.fedformer import monolithic_forward
from splitgrid.protocol import (
    ClientData,
    ClientSelection,
    Federation,
    InProcessBus,
    MessageAudit,
    MessageKind,
    PartyId,
    PartyMessage,
    Role,
    TrainedModels,
    TrainingStrategy,
    TrainPlan,
    average_client_gradients,
    decode_frame,
    encode_frame,
    initial_models,
    predict,
    prepare_clients,
    run_training,
    select_clients,
)
from splitgrid.protocol.messages import recv_frame, send_frame
from splitgrid.tensor import backward

from conftest import DESK, TINY

BETA1 = 0.9


def sample_message(rng):
    return PartyMessage(
        MessageKind.ACTIVATIONS,
        PartyId.client(1, 3),
        PartyId.grid_station(1),
        epoch=4,
        batch=7,
        tensors={
            "enc_out": rng.standard_normal((2, 16, 6)),
            "dec_seasonal": rng.standard_normal((2, 16, 6)),
            "dec_trend": rng.standard_normal((2, 16, 1)),
        },
    )


class TestFrames:
    def test_round_trip(self, rng):
        msg = sample_message(rng)
        back = decode_frame(encode_frame(msg))
        assert (back.kind, back.sender, back.receiver, back.epoch, back.batch) == (
            msg.kind, msg.sender, msg.receiver, 4, 7
        )
        for name, arr in msg.tensors.items():
            np.testing.assert_array_equal(back.tensors[name], arr)

    def test_socket_round_trip_is_bit_exact(self, rng):
        frame = encode_frame(sample_message(rng))
        a, b = socket.socketpair()
        with a, b:
            sender = threading.Thread(target=send_frame, args=(a, frame))
            sender.start()
            got = recv_frame(b)
            sender.join()
        assert got == frame

    def test_bad_magic(self, rng):
        frame = bytearray(encode_frame(sample_message(rng)))
        frame[:4] = b"XXXX"
        with pytest.raises(ProtocolError, match="magic"):
            decode_frame(bytes(frame))

    def test_bad_version(self, rng):
        frame = bytearray(encode_frame(sample_message(rng)))
        frame[4] = 9
        with pytest.raises(VersionError):
            decode_frame(bytes(frame))

    @pytest.mark.parametrize("cut", [3, 10, 30, 60, -1])
    def test_truncated(self, rng, cut):
        frame = encode_frame(sample_message(rng))
        with pytest.raises(ProtocolError):
            decode_frame(frame[:cut])

    def test_trailing_bytes(self, rng):
        with pytest.raises(ProtocolError, match="trailing"):
            decode_frame(encode_frame(sample_message(rng)) + b"\0")

    def test_unknown_kind(self, rng):
        frame = bytearray(encode_frame(sample_message(rng)))
        frame[5] = 99
        with pytest.raises(ProtocolError):
            decode_frame(bytes(frame))

    def test_scalar_tensor(self):
        msg = PartyMessage(MessageKind.CONTROL_SYNC, PartyId.provider(), PartyId.grid_station(0), tensors={"control": np.array(2.5)})
        assert decode_frame(encode_frame(msg)).tensors["control"] == 2.5


class TestWhitelist:
    @pytest.mark.parametrize(
        "kind,name",
        [
            (MessageKind.PREDICTIONS, "target"),
            (MessageKind.LOSS_GRADIENTS, "X"),
            (MessageKind.SPLIT1_WEIGHTS, "raw"),
            (MessageKind.ACTIVATION_GRADIENTS, "enc_out"),
        ],
    )
    def test_rejects_names(self, kind, name):
        with pytest.raises(ProtocolError):
            PartyMessage(kind, PartyId.provider(), PartyId.grid_station(0), tensors={name: np.zeros(1)})

    def test_activations_need_all_three(self):
        with pytest.raises(ProtocolError):
            PartyMessage(MessageKind.ACTIVATIONS, PartyId.client(0, 0), PartyId.grid_station(0), tensors={"enc_out": np.zeros(1)})

    def test_audit_flags_raw_data(self, rng):
        audit = MessageAudit()
        raw = rng.standard_normal((2, 3))
        audit.forbid(raw)
        msg = PartyMessage(MessageKind.PREDICTIONS, PartyId.provider(), PartyId.grid_station(0), tensors={"prediction": raw.copy()})
        audit(encode_frame(msg), msg)
        assert not audit.clean and "raw client data" in audit.violations[0]


class TestPartyId:
    def test_invariants(self):
        with pytest.raises(ProtocolError):
            PartyId(Role.CLIENT, 0)
        with pytest.raises(ProtocolError):
            PartyId(Role.GRID_STATION, 0, 1)
        with pytest.raises(ProtocolError):
            PartyId(Role.SERVICE_PROVIDER, 0)

    def test_names_and_order(self):
        assert str(PartyId.client(2, 5)) == "client(gs=2, k=5)"
        assert sorted([PartyId.provider(), PartyId.client(1, 0), PartyId.grid_station(0)])[0].role == Role.CLIENT


class TestBus:
    def test_delivers_by_kind_and_sender(self, rng):
        bus = InProcessBus()
        gs = PartyId.grid_station(0)
        for k in (1, 0):
            bus.send(PartyMessage(MessageKind.PREDICTIONS, gs, PartyId.client(0, k), tensors={"prediction": np.full(1, k)}))
        got = bus.recv(PartyId.client(0, 0), MessageKind.PREDICTIONS, gs)
        assert got.tensors["prediction"][0] == 0
        assert bus.pending() == 1

    def test_timeout_names_party(self):
        bus = InProcessBus(timeout=0.05)
        with pytest.raises(ProtocolError, match=r"client\(gs=0, k=1\)"):
            bus.recv(PartyId.grid_station(0), MessageKind.ACTIVATIONS, PartyId.client(0, 1))


class TestSelection:
    def test_fixed_ignores_epoch(self):
        picks = {tuple(select_clients(0, range(10), 3, "Fixed", seed=1, epoch=e)) for e in range(5)}
        assert len(picks) == 1

    def test_random_per_epoch_changes(self):
        picks = {tuple(select_clients(0, range(10), 3, "RandomPerEpoch", seed=1, epoch=e)) for e in range(5)}
        assert len(picks) > 1

    def test_whole_pool(self):
        assert select_clients(0, [4, 2, 9], 3, ClientSelection.FIXED, seed=0) == [2, 4, 9]

    def test_sorted_subset(self):
        out = select_clients(1, range(20), 5, "fixed", seed=3)
        assert out == sorted(out) and len(set(out)) == 5 and set(out) <= set(range(20))

    def test_too_few(self):
        with pytest.raises(ConfigError):
            select_clients(0, [0, 1], 3, "Fixed", seed=0)

    def test_strategy_parse(self):
        assert TrainingStrategy.parse("splitpersonal") is TrainingStrategy.PERSONAL
        with pytest.raises(ConfigError):
            TrainingStrategy.parse("Central")


class TestAverageGradients:
    def test_single_client(self, rng):
        g = {"w": rng.standard_normal((2, 2))}
        np.testing.assert_array_equal(average_client_gradients([g])["w"], g["w"])

    def test_opposites(self, rng):
        g = rng.standard_normal(4)
        np.testing.assert_array_equal(average_client_gradients([{"w": g}, {"w": -g}])["w"], 0.0)

    def test_hand_mean(self):
        sets = [{"a": np.array([1.0, 2.0]), "b": np.array([3.0])}, {"a": np.array([4.0, 5.0]), "b": np.array([6.0])},
                {"a": np.array([7.0, -1.0]), "b": np.array([0.0])}]
        out = average_client_gradients(sets)
        np.testing.assert_allclose(out["a"], [4.0, 2.0])
        np.testing.assert_allclose(out["b"], [3.0])

    def test_mismatch(self):
        with pytest.raises(ProtocolError):
            average_client_gradients([{"a": np.zeros(2)}, {"a": np.zeros(3)}])
        with pytest.raises(ProtocolError):
            average_client_gradients([{"a": np.zeros(2)}, {"b": np.zeros(2)}])


def one_station(K, cfg=DESK, days=30, seed=1, stride=4):
    series = synth_generator(4, days, seed=seed)
    nb = [Neighborhood(0, [s.client_id for s in series[:K]])]
    return prepare_clients(series, nb, cfg, stride=stride)


def single_machine_gradients(cfg, batches, seed):
    """First-moment-free reference: gradients of the mean of per-client mean losses."""
    ref = initial_models(cfg, [0], TrainingStrategy.GLOBAL, seed)
    cat = WindowBatch(*(np.concatenate([getattr(b, f) for b in batches]) for f in ("X", "X_t", "Y_t", "target")))
    pred = monolithic_forward(cat, ref.split1[0], ref.split2[0], cfg)
    backward(((pred - cat.target) ** 2).mean())
    return {k: t.grad for k, t in ref.split1[0].tensors.items()}, {k: t.grad for k, t in ref.split2[0].tensors.items()}


def protocol_gradients(fed):
    """Gradients recovered from the first ADAM moment after one step."""
    g1 = {k: v / (1 - BETA1) for k, v in fed.stations[0].adam.first_moment.items()}
    g2 = {k: v / (1 - BETA1) for k, v in fed.provider.adam["global"].first_moment.items()}
    return g1, g2


def assert_close_dicts(a, b, rtol):
    # some gradients vanish analytically (a bias followed by decomposition); the floor covers their roundoff
    for k in b:
        np.testing.assert_allclose(a[k], b[k], rtol=rtol, atol=1e-12, err_msg=k)


class TestEquivalence:
    @pytest.mark.parametrize("K", [1, 2, 4])
    def test_matches_single_machine(self, K):
        data = one_station(K)
        plan = TrainPlan(epochs=1, clients_per_gs=K, batch_size=4, lr=1e-3)
        models = initial_models(DESK, [0], TrainingStrategy.GLOBAL, 0)
        fed = Federation(DESK, data, plan, models)
        for p in fed.clients.values():
            p.start_epoch(0)
        batches = [fed.clients[PartyId.client(0, k)].batch(0, 4) for k in range(K)]
        fed.batch_round(0, 0, {0: list(range(K))}, 1e-3)
        ref1, ref2 = single_machine_gradients(DESK, batches, 0)
        got1, got2 = protocol_gradients(fed)
        assert_close_dicts(got2, ref2, 1e-9)
        assert_close_dicts(got1, ref1, 1e-9)
        assert fed.audit.clean

    def test_identical_clients_equal_single_client(self):
        base = one_station(1)[0][0]
        twin = ClientData(0, 1, "twin", base.train, base.val, base.test)
        plan = TrainPlan(epochs=1, clients_per_gs=2, batch_size=4, lr=1e-3)
        grads = []
        for data, sel in (({0: [base]}, [0]), ({0: [base, twin]}, [0, 1])):
            fed = Federation(DESK, data, plan, initial_models(DESK, [0], TrainingStrategy.GLOBAL, 0))
            for p in fed.clients.values():
                p.start_epoch(0)
                p._order = np.arange(len(base.train))
            fed.batch_round(0, 0, {0: sel}, 1e-3)
            grads.append(protocol_gradients(fed))
        assert_close_dicts(grads[1][0], grads[0][0], 1e-12)
        assert_close_dicts(grads[1][1], grads[0][1], 1e-12)

    def test_zero_run_leaves_parameters(self, rng):
        windows = [
            TimeSeriesWindow(
                np.zeros((TINY.seq_len, 1)),
                rng.uniform(-0.5, 0.5, (TINY.seq_len, 4)),
                rng.uniform(-0.5, 0.5, (TINY.dec_len, 4)),
                np.zeros((TINY.pred_len, 1)),
            )
            for _ in range(8)
        ]
        data = {0: [ClientData(0, 0, "z", windows, windows[:1], windows[:1])]}
        models = initial_models(TINY, [0], TrainingStrategy.GLOBAL, 0)
        for ps in (models.split1[0], models.split2[0]):
            for t in ps.tensors.values():
                t.data = np.zeros_like(t.data)
        fed = Federation(TINY, data, TrainPlan(clients_per_gs=1, batch_size=4), models)
        fed.clients[PartyId.client(0, 0)].start_epoch(0)
        fed.batch_round(0, 0, {0: [0]}, 0.1)
        for ps in (models.split1[0], models.split2[0]):
            for t in ps.tensors.values():
                np.testing.assert_array_equal(t.data, 0.0)
        assert fed.stations[0].adam.step_count == 1
        assert fed.provider.adam["global"].step_count == 1


class TestStrategies:
    def test_personal_isolation(self, tiny_federation):
        _, _, data = tiny_federation
        plan = TrainPlan(clients_per_gs=2, batch_size=8, lr=1e-2)
        models = initial_models(TINY, sorted(data), TrainingStrategy.PERSONAL, 0)
        before = {k: v.copy() for k, v in models.split2[1].arrays().items()}
        before0 = {k: v.copy() for k, v in models.split2[0].arrays().items()}
        fed = Federation(TINY, data, plan, models)
        for p in fed.clients.values():
            p.start_epoch(0)
        selected = {g: fed.pool(g) for g in data}
        fed.batch_round(0, 0, selected, 1e-2, active_gs=[0])
        for k, v in models.split2[1].arrays().items():
            np.testing.assert_array_equal(v, before[k])
        assert any(not np.array_equal(v, before0[k]) for k, v in models.split2[0].arrays().items())

    def test_global_shares_one_split2(self, tiny_federation):
        _, _, data = tiny_federation
        models = initial_models(TINY, sorted(data), TrainingStrategy.GLOBAL, 0)
        assert models.split2[0] is models.split2[1]


def short_plan(**kw):
    base = dict(epochs=2, clients_per_gs=2, batch_size=8, lr=5e-3, seed=0)
    base.update(kw)
    return TrainPlan(**base)


class TestRunTraining:
    def test_thread_count_does_not_change_result(self, tiny_federation):
        _, _, data = tiny_federation
        runs = [run_training(short_plan(threads=t), data, "SplitGlobal", TINY) for t in (1, 3)]
        assert runs[0].history == runs[1].history
        a, b = runs[0].models.arrays(), runs[1].models.arrays()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_replay_identical_history(self, tiny_federation):
        _, _, data = tiny_federation
        h = [run_training(short_plan(), data, "SplitPersonal", TINY).history for _ in range(2)]
        assert h[0] == h[1]

    def test_audit_is_clean(self, tiny_federation):
        _, _, data = tiny_federation
        result = run_training(short_plan(epochs=1), data, "SplitGlobal", TINY)
        assert result.audit.clean
        kinds = {r[0] for r in result.audit.records}
        assert MessageKind.ACTIVATIONS in kinds and MessageKind.LOSS_GRADIENTS in kinds
        assert all(not set(r[3]) & {"X", "target", "X_t"} for r in result.audit.records)

    def test_audit_is_clean_with_dp(self, tiny_federation):
        from splitgrid.privacy import PrivacyBudget

        _, _, data = tiny_federation
        result = run_training(short_plan(epochs=1, dp=PrivacyBudget(1.0, 0.0, enabled=True)), data, "SplitGlobal", TINY)
        assert result.audit.clean

    @pytest.mark.parametrize(
        "patience,vals,epochs",
        [
            (0, [1.0, 1.0, 0.5], 2),
            (2, [1.0, 1.2, 0.9, 0.95, 0.95, 0.5], 5),
            (1, [1.0, 0.9, 0.8], 3),
        ],
    )
    def test_early_stopping(self, tiny_federation, monkeypatch, patience, vals, epochs):
        import splitgrid.protocol.training as training

        _, _, data = tiny_federation
        script = iter(vals)
        real = training.split_mse
        monkeypatch.setattr(training, "split_mse", lambda m, d, split: next(script) if split == "val" else real(m, d, split))
        plan = short_plan(epochs=len(vals), early_stop_patience=patience)
        result = run_training(plan, data, "SplitGlobal", TINY)
        assert [r.val_mse for r in result.history] == vals[:epochs]
        assert result.stopped_early == (epochs < len(vals))

    def test_learning_rate_schedule(self, tiny_federation):
        _, _, data = tiny_federation
        result = run_training(short_plan(epochs=3, lr=4e-3, lr_decay=0.5), data, "SplitGlobal", TINY)
        assert [r.lr for r in result.history] == [4e-3, 2e-3, 1e-3]

    def test_training_reduces_loss(self):
        data = one_station(2, days=20, seed=3, stride=2)
        result = run_training(TrainPlan(epochs=3, clients_per_gs=2, batch_size=8, lr=2e-3), data, "SplitGlobal", DESK)
        assert result.history[-1].train_mse < result.history[0].train_mse

    def test_too_few_windows(self, tiny_federation):
        _, _, data = tiny_federation
        with pytest.raises(DataError, match="batch_size"):
            run_training(short_plan(batch_size=500), data, "SplitGlobal", TINY)

    def test_silent_client_aborts_round(self, tiny_federation):
        _, _, data = tiny_federation
        fed = Federation(TINY, data, short_plan(timeout=0.1), initial_models(TINY, [0, 1], TrainingStrategy.GLOBAL, 0))
        for p in fed.clients.values():
            p.start_epoch(0)
        fed.clients[PartyId.client(0, 1)].silent = True
        with pytest.raises(ProtocolError, match=r"no ACTIVATIONS from client\(gs=0, k=1\)"):
            fed.batch_round(0, 0, {0: [0, 1], 1: [0, 1]}, 1e-3)


class TestPredict:
    def test_shape_and_unknown_station(self, tiny_federation):
        _, _, data = tiny_federation
        models = initial_models(TINY, [0, 1], TrainingStrategy.GLOBAL, 0)
        window = data[0][0].test[0]
        assert predict(models, window, 0).shape == (TINY.pred_len, 1)
        with pytest.raises(LookupError):
            predict(models, window, 7)

    def test_matches_monolithic(self, tiny_federation):
        _, _, data = tiny_federation
        models = initial_models(TINY, [0, 1], TrainingStrategy.PERSONAL, 0)
        window = data[1][0].test[0]
        ref = monolithic_forward(window, models.split1[1], models.split2[1], TINY).data[0]
        np.testing.assert_array_equal(predict(models, window, 1), ref)

    @pytest.mark.parametrize("strategy", list(TrainingStrategy))
    def test_arrays_round_trip(self, strategy):
        models = initial_models(TINY, [0, 1], strategy, 4)
        back = TrainedModels.from_arrays(TINY, strategy, models.arrays())
        for k, v in models.arrays().items():
            np.testing.assert_array_equal(back.arrays()[k], v)
