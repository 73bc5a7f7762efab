import numpy as np
import pytest

from splitgrid.data import WindowBatch
from splitgrid.errors import ConfigError, DimensionError
from splitgrid.fedformer import (
    ModelConfig,
    data_embedding,
    fea_forward,
    feb_forward,
    ffn_forward,
    init_split1,
    init_split2,
    monolithic_forward,
    select_modes,
    series_decomp,
    split1_forward,
    split2_forward,
)
from splitgrid.tensor import Tensor, vjp

from conftest import TINY


def random_batch(cfg, b, rng):
    return WindowBatch(
        X=rng.standard_normal((b, cfg.seq_len, cfg.n_series)),
        X_t=rng.uniform(-0.5, 0.5, (b, cfg.seq_len, cfg.n_time_features)),
        Y_t=rng.uniform(-0.5, 0.5, (b, cfg.dec_len, cfg.n_time_features)),
        target=rng.standard_normal((b, cfg.pred_len, cfg.n_series)),
    )


def zero_batch(cfg, b):
    return WindowBatch(
        X=np.zeros((b, cfg.seq_len, cfg.n_series)),
        X_t=np.zeros((b, cfg.seq_len, cfg.n_time_features)),
        Y_t=np.zeros((b, cfg.dec_len, cfg.n_time_features)),
        target=np.zeros((b, cfg.pred_len, cfg.n_series)),
    )


class TestModelConfig:
    def test_decoder_length(self):
        assert ModelConfig(seq_len=96, pred_len=96, d_model=8, d_ff=8).dec_len == 144

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(modes=8, seq_len=16),
            dict(seq_len=15),
            dict(d_model=0),
            dict(decomp_kernel=4),
            dict(decomp_kernel=17, seq_len=16, modes=3),
            dict(heads=4, d_model=6),
        ],
    )
    def test_invalid_configurations(self, kwargs):
        base = dict(seq_len=16, pred_len=8, d_model=6, d_ff=10, modes=3, decomp_kernel=5)
        base.update(kwargs)
        with pytest.raises(ConfigError):
            ModelConfig(**base)


class TestSeriesDecomp:
    def test_constant_series(self):
        x = Tensor(np.full((1, 10, 1), 2.5))
        s, t = series_decomp(x, 3)
        np.testing.assert_allclose(t.data, 2.5, rtol=0, atol=1e-15)
        np.testing.assert_allclose(s.data, 0.0, atol=1e-15)

    def test_additive_within_one_ulp(self, rng):
        x = rng.standard_normal((3, 40, 2)) * 100
        s, t = series_decomp(Tensor(x), 7)
        ulp = np.spacing(np.maximum(np.abs(x), np.abs(t.data)))
        assert np.all(np.abs((s.data + t.data) - x) <= ulp)

    def test_ramp_matches_sliding_mean(self):
        ramp = np.arange(10.0)
        _, t = series_decomp(Tensor(ramp[None, :, None]), 3)
        padded = np.concatenate([[ramp[0]], ramp, [ramp[-1]]])
        ref = np.array([padded[i : i + 3].mean() for i in range(10)])
        np.testing.assert_allclose(t.data[0, :, 0], ref, atol=1e-14)

    def test_even_width_rejected(self):
        with pytest.raises(ConfigError):
            series_decomp(Tensor(np.ones((1, 8, 1))), 4)


class TestSelectModes:
    def test_sorted_unique_in_range(self):
        for length in (16, 20, 96, 144):
            m = select_modes(np.random.default_rng(length), length, 5)
            assert np.all(np.diff(m) > 0)
            assert m.min() >= 1 and m.max() <= length // 2 - 1

    def test_too_many_modes(self):
        with pytest.raises(ConfigError):
            select_modes(np.random.default_rng(0), 8, 4)


class TestInitialisation:
    def test_bounds(self):
        p1, p2 = init_split1(TINY, 0), init_split2(TINY, 1)
        kernel_bound = 1.0 / (TINY.d_model * TINY.modes)
        for p in (p1, p2):
            for name, t in p.tensors.items():
                if name.endswith(("R_re", "R_im")):
                    assert np.abs(t.data).max() <= kernel_bound
                elif name.endswith(("W", "Wq", "Wk", "Wv", "W1", "W2")) or ".trend" in name:
                    assert np.abs(t.data).max() <= 1.0 / np.sqrt(t.shape[0])

    def test_same_seed_same_parameters(self):
        a, b = init_split1(TINY, 5), init_split1(TINY, 5)
        for k in a.tensors:
            np.testing.assert_array_equal(a[k].data, b[k].data)
        for k in a.modes:
            np.testing.assert_array_equal(a.modes[k], b.modes[k])

    def test_mode_sets_valid(self):
        p1 = init_split1(TINY, 0)
        assert p1.modes["enc1.feb"].max() < TINY.seq_len // 2
        assert p1.modes["dec.feb"].max() < TINY.dec_len // 2
        assert all(len(m) == TINY.modes for m in p1.modes.values())


class TestEmbedding:
    def test_zero_input_gives_zero(self):
        x_emb, s_emb, trend = data_embedding(zero_batch(TINY, 2), init_split1(TINY, 0), TINY)
        for t in (x_emb, s_emb, trend):
            np.testing.assert_array_equal(t.data, 0.0)

    def test_constant_series_trend(self):
        batch = zero_batch(TINY, 1)
        batch.X[:] = 1.75
        _, _, trend = data_embedding(batch, init_split1(TINY, 0), TINY)
        np.testing.assert_allclose(trend.data, 1.75, atol=1e-14)

    def test_trend_halves_from_decomposition(self, rng):
        batch = random_batch(TINY, 2, rng)
        _, _, trend = data_embedding(batch, init_split1(TINY, 0), TINY)
        _, ref = series_decomp(Tensor(batch.X), TINY.decomp_kernel)
        half = TINY.seq_len // 2
        np.testing.assert_array_equal(trend.data[:, :half], ref.data[:, half:])
        np.testing.assert_allclose(trend.data[:, half:], np.repeat(batch.X.mean(axis=1, keepdims=True), TINY.pred_len, 1))

    def test_shape_mismatch(self, rng):
        batch = random_batch(TINY, 1, rng)
        batch.Y_t = batch.Y_t[:, :-1]
        with pytest.raises(DimensionError):
            data_embedding(batch, init_split1(TINY, 0), TINY)


def feb_oracle(x, W, R, modes):
    q = x @ W
    spec = np.fft.fft(q, axis=1)[:, modes, :]
    mixed = np.einsum("bme,efm->bmf", spec, R)
    half = np.zeros((x.shape[0], x.shape[1] // 2 + 1, W.shape[1]), dtype=complex)
    half[:, modes, :] = mixed
    return np.fft.irfft(half, x.shape[1], axis=1)


class TestFeb:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.x = rng.standard_normal((2, 8, 2))
        self.W = rng.standard_normal((2, 2))
        self.R = rng.standard_normal((1, 2, 2, 2)) + 1j * rng.standard_normal((1, 2, 2, 2))
        self.modes = np.array([1, 3])

    def run(self, x=None, R=None):
        x = self.x if x is None else x
        R = self.R if R is None else R
        return feb_forward(Tensor(x), Tensor(self.W), Tensor(R.real), Tensor(R.imag), self.modes).data

    def test_matches_stepwise_oracle(self):
        np.testing.assert_allclose(self.run(), feb_oracle(self.x, self.W, self.R[0], self.modes), atol=1e-12)

    def test_zero_kernel(self):
        np.testing.assert_array_equal(self.run(R=np.zeros_like(self.R)), 0.0)

    def test_zero_input(self):
        np.testing.assert_allclose(self.run(x=np.zeros_like(self.x)), 0.0, atol=1e-15)

    def test_mode_out_of_range(self):
        with pytest.raises(ConfigError):
            feb_forward(Tensor(self.x), Tensor(self.W), Tensor(self.R.real), Tensor(self.R.imag), np.array([1, 4]))


def fea_oracle(x_en, x_de, Wq, Wk, Wv, mq, mkv):
    q = np.fft.fft(x_de @ Wq, axis=1)[:, mq]
    k = np.fft.fft(x_en @ Wk, axis=1)[:, mkv]
    v = np.fft.fft(x_en @ Wv, axis=1)[:, mkv]
    scores = np.einsum("bxe,bye->bxy", q, k)
    scores = np.tanh(scores.real) + 1j * np.tanh(scores.imag)
    mixed = scores @ v
    half = np.zeros((x_de.shape[0], x_de.shape[1] // 2 + 1, Wv.shape[1]), dtype=complex)
    half[:, mq] = mixed
    return np.fft.irfft(half, x_de.shape[1], axis=1)


class TestFea:
    def setup_method(self):
        rng = np.random.default_rng(11)
        self.x_en = rng.standard_normal((2, 8, 2))
        self.x_de = rng.standard_normal((2, 8, 2))
        self.W = [rng.standard_normal((2, 2)) for _ in range(3)]
        self.mq, self.mkv = np.array([1, 2]), np.array([2, 3])

    def run(self, x_en, x_de, W):
        return fea_forward(Tensor(x_en), Tensor(x_de), *(Tensor(w) for w in W), self.mq, self.mkv).data

    def test_matches_stepwise_oracle(self):
        np.testing.assert_allclose(
            self.run(self.x_en, self.x_de, self.W), fea_oracle(self.x_en, self.x_de, *self.W, self.mq, self.mkv), atol=1e-12
        )

    def test_zero_value_projection(self):
        W = [self.W[0], self.W[1], np.zeros((2, 2))]
        np.testing.assert_allclose(self.run(self.x_en, self.x_de, W), 0.0, atol=1e-15)

    def test_zero_inputs(self):
        z = np.zeros_like(self.x_en)
        np.testing.assert_allclose(self.run(z, z, self.W), 0.0, atol=1e-15)


class TestFfn:
    def test_matches_two_matmuls(self, rng):
        from scipy.special import erf

        x = rng.standard_normal((1, 1, 4))
        W1, b1, W2, b2 = rng.standard_normal((4, 6)), rng.standard_normal(6), rng.standard_normal((6, 4)), rng.standard_normal(4)
        h = x @ W1 + b1
        ref = (0.5 * h * (1 + erf(h / np.sqrt(2)))) @ W2 + b2
        out = ffn_forward(Tensor(x), Tensor(W1), Tensor(b1), Tensor(W2), Tensor(b2)).data
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_zero_weights(self, rng):
        x = rng.standard_normal((2, 3, 4))
        zeros = [np.zeros((4, 6)), np.zeros(6), np.zeros((6, 4)), np.zeros(4)]
        np.testing.assert_array_equal(ffn_forward(Tensor(x), *(Tensor(z) for z in zeros)).data, 0.0)

    def test_zero_input_zero_bias(self, rng):
        args = [rng.standard_normal((4, 6)), np.zeros(6), rng.standard_normal((6, 4)), np.zeros(4)]
        out = ffn_forward(Tensor(np.zeros((1, 2, 4))), *(Tensor(a) for a in args)).data
        np.testing.assert_array_equal(out, 0.0)


class TestSplitForward:
    def test_activation_shapes(self, rng):
        acts = split1_forward(random_batch(TINY, 3, rng), init_split1(TINY, 0), TINY)
        assert acts.enc_out.shape == (3, TINY.seq_len, TINY.d_model)
        assert acts.dec_seasonal.shape == (3, TINY.dec_len, TINY.d_model)
        assert acts.dec_trend.shape == (3, TINY.dec_len, TINY.n_series)

    def test_zero_window_zero_params(self):
        acts = split1_forward(zero_batch(TINY, 2), init_split1(TINY, 0).zeros_like(), TINY)
        for t in acts.as_tuple():
            np.testing.assert_array_equal(t.data, 0.0)

    def test_zero_activations_zero_params(self):
        acts = split1_forward(zero_batch(TINY, 2), init_split1(TINY, 0).zeros_like(), TINY)
        pred = split2_forward(acts, init_split2(TINY, 1).zeros_like(), TINY)
        assert pred.shape == (2, TINY.pred_len, TINY.n_series)
        np.testing.assert_array_equal(pred.data, 0.0)

    def test_replay_is_bit_identical(self, rng):
        batch = random_batch(TINY, 2, rng)
        a = split1_forward(batch, init_split1(TINY, 3), TINY)
        b = split1_forward(batch, init_split1(TINY, 3), TINY)
        for x, y in zip(a.as_tuple(), b.as_tuple()):
            np.testing.assert_array_equal(x.data, y.data)

    def test_split2_rejects_wrong_activation_shape(self, rng):
        acts = split1_forward(random_batch(TINY, 2, rng), init_split1(TINY, 0), TINY).detached()
        acts.dec_trend = Tensor(np.zeros((2, TINY.dec_len, 2)))
        with pytest.raises(DimensionError):
            split2_forward(acts, init_split2(TINY, 1), TINY)


class TestSplitEqualsMonolithic:
    def test_prediction_and_gradients(self, rng):
        batch = random_batch(TINY, 3, rng)
        p1, p2 = init_split1(TINY, 0), init_split2(TINY, 1)
        mono = monolithic_forward(batch, p1, p2, TINY)
        seed = rng.standard_normal(mono.shape)
        params = list(p1.tensors.values()) + list(p2.tensors.values())
        g_mono = vjp([mono], [seed], params)

        acts = split1_forward(batch, p1, TINY)
        sent = acts.detached(requires_grad=True)
        pred = split2_forward(sent, p2, TINY)
        np.testing.assert_allclose(pred.data, mono.data, rtol=0, atol=1e-9)
        g2 = vjp([pred], [seed], list(p2.tensors.values()) + list(sent.as_tuple()))
        n2 = len(p2.tensors)
        act_grads = g2[n2:]
        g1 = vjp(list(acts.as_tuple()), act_grads, list(p1.tensors.values()))
        for a, b in zip(g1 + g2[:n2], g_mono):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)
