"""Split FEDformer: Fourier-basis encoder/decoder cut into a client half and a provider half.

Split-1 (client/grid-station side) holds the data embedding, the first
encoder FEB block, the first decoder FEB block with its decomposition and
the first trend projection.  Split-2 (service-provider side) holds the rest
of the first encoder layer, a complete second encoder layer and the
remaining decoder blocks.  ``monolithic_forward`` chains both halves on one
tape and is the reference the split path is tested against.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace

import numpy as np

from .data import WindowBatch, TimeSeriesWindow, stack_windows
from .errors import ConfigError, DimensionError
from .tensor import (
    ComplexTensor,
    Tensor,
    apply_along,
    complex_einsum,
    complex_take,
    concat,
    conv1d,
    dft,
    gelu,
    hermitian_zero_pad,
    idft,
    tanh,
)


@dataclass(frozen=True)
class ModelConfig:
    seq_len: int = 96
    pred_len: int = 96
    n_series: int = 1
    n_time_features: int = 4
    d_model: int = 512
    d_ff: int = 2048
    modes: int = 47
    heads: int = 1
    decomp_kernel: int = 25
    conv_width: int = 3
    seed: int = 0

    def __post_init__(self):
        dims = ("seq_len", "pred_len", "n_series", "n_time_features", "d_model", "d_ff", "modes", "heads")
        for name in dims:
            if getattr(self, name) <= 0:
                raise ConfigError(f"model.{name} must be positive")
        if self.seq_len % 2:
            raise ConfigError("model.seq_len must be even")
        if 2 * self.modes >= self.seq_len:
            raise ConfigError(f"model.modes={self.modes} must be < seq_len/2={self.seq_len // 2}")
        if self.modes > (self.seq_len - 1) // 2 or self.modes > (self.dec_len - 1) // 2:
            raise ConfigError("model.modes exceeds the non-DC, non-Nyquist bins available")
        if self.d_model % self.heads:
            raise ConfigError("model.d_model must be divisible by model.heads")
        if self.decomp_kernel % 2 == 0 or self.decomp_kernel < 1:
            raise ConfigError("model.decomp_kernel must be a positive odd integer")
        if self.decomp_kernel > self.seq_len:
            raise ConfigError("model.decomp_kernel must not exceed seq_len")
        if self.conv_width % 2 == 0:
            raise ConfigError("model.conv_width must be odd")

    @property
    def dec_len(self) -> int:
        return self.seq_len // 2 + self.pred_len


@dataclass
class ParamSet:
    """Named trainable tensors plus frozen integer mode-index sets."""

    tensors: dict[str, Tensor]
    modes: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self):
        return type(self)(
            {k: Tensor(t.data, requires_grad=t.requires_grad) for k, t in self.tensors.items()},
            {k: v.copy() for k, v in self.modes.items()},
        )

    def zeros_like(self):
        return type(self)(
            {k: Tensor(np.zeros_like(t.data), requires_grad=t.requires_grad) for k, t in self.tensors.items()},
            {k: v.copy() for k, v in self.modes.items()},
        )

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))


class SplitOneParams(ParamSet):
    pass


class SplitTwoParams(ParamSet):
    pass


@dataclass
class SplitOneActivations:
    enc_out: Tensor
    dec_seasonal: Tensor
    dec_trend: Tensor

    def __post_init__(self):
        batch = {self.enc_out.shape[0], self.dec_seasonal.shape[0], self.dec_trend.shape[0]}
        if len(batch) != 1:
            raise DimensionError("activation tensors disagree on batch size")

    def as_tuple(self) -> tuple[Tensor, Tensor, Tensor]:
        return self.enc_out, self.dec_seasonal, self.dec_trend

    def detached(self, requires_grad: bool = False) -> "SplitOneActivations":
        return SplitOneActivations(*(Tensor(t.data, requires_grad=requires_grad) for t in self.as_tuple()))


ACTIVATION_NAMES = ("enc_out", "dec_seasonal", "dec_trend")


# initialisation ----------------------------------------------------------------
def _uniform(rng, shape, bound) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _linear(rng, fan_in, fan_out) -> Tensor:
    return _uniform(rng, (fan_in, fan_out), 1.0 / np.sqrt(fan_in))


def select_modes(rng: np.random.Generator, length: int, count: int) -> np.ndarray:
    """Draw ``count`` distinct bins uniformly from 1..length/2-1, sorted."""
    pool = np.arange(1, (length + 1) // 2)
    if count > pool.size:
        raise ConfigError(f"cannot keep {count} modes from a length-{length} sequence")
    return np.sort(rng.choice(pool, size=count, replace=False)).astype(np.int64)


def _feb_params(rng, cfg: ModelConfig, prefix: str, length: int, tensors, modes):
    e = cfg.d_model // cfg.heads
    bound = 1.0 / (cfg.d_model * cfg.modes)
    modes[f"{prefix}"] = select_modes(rng, length, cfg.modes)
    tensors[f"{prefix}.W"] = _linear(rng, cfg.d_model, cfg.d_model)
    tensors[f"{prefix}.R_re"] = _uniform(rng, (cfg.heads, e, e, cfg.modes), bound)
    tensors[f"{prefix}.R_im"] = _uniform(rng, (cfg.heads, e, e, cfg.modes), bound)


def _ffn_params(rng, cfg: ModelConfig, prefix: str, tensors):
    tensors[f"{prefix}.W1"] = _linear(rng, cfg.d_model, cfg.d_ff)
    tensors[f"{prefix}.b1"] = _uniform(rng, (cfg.d_ff,), 1.0 / np.sqrt(cfg.d_model))
    tensors[f"{prefix}.W2"] = _linear(rng, cfg.d_ff, cfg.d_model)
    tensors[f"{prefix}.b2"] = _uniform(rng, (cfg.d_model,), 1.0 / np.sqrt(cfg.d_ff))


def init_split1(cfg: ModelConfig, seed: int | np.random.SeedSequence | None = None) -> SplitOneParams:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    t: dict[str, Tensor] = {}
    m: dict[str, np.ndarray] = {}
    t["emb.conv"] = _uniform(
        rng, (cfg.conv_width, cfg.n_series, cfg.d_model), 1.0 / np.sqrt(cfg.conv_width * cfg.n_series)
    )
    t["emb.time_x"] = _linear(rng, cfg.n_time_features, cfg.d_model)
    t["emb.time_y"] = _linear(rng, cfg.n_time_features, cfg.d_model)
    _feb_params(rng, cfg, "enc1.feb", cfg.seq_len, t, m)
    _feb_params(rng, cfg, "dec.feb", cfg.dec_len, t, m)
    t["dec.trend1"] = _linear(rng, cfg.d_model, cfg.n_series)
    return SplitOneParams(t, m)


def init_split2(cfg: ModelConfig, seed: int | np.random.SeedSequence | None = None) -> SplitTwoParams:
    rng = np.random.default_rng(cfg.seed + 1 if seed is None else seed)
    t: dict[str, Tensor] = {}
    m: dict[str, np.ndarray] = {}
    _ffn_params(rng, cfg, "enc1.ffn", t)
    _feb_params(rng, cfg, "enc2.feb", cfg.seq_len, t, m)
    _ffn_params(rng, cfg, "enc2.ffn", t)
    m["dec.fea.q"] = select_modes(rng, cfg.dec_len, cfg.modes)
    m["dec.fea.kv"] = select_modes(rng, cfg.seq_len, cfg.modes)
    t["dec.fea.Wq"] = _linear(rng, cfg.d_model, cfg.d_model)
    t["dec.fea.Wk"] = _linear(rng, cfg.d_model, cfg.d_model)
    t["dec.fea.Wv"] = _linear(rng, cfg.d_model, cfg.d_model)
    _ffn_params(rng, cfg, "dec.ffn", t)
    t["dec.trend2"] = _linear(rng, cfg.d_model, cfg.n_series)
    t["dec.trend3"] = _linear(rng, cfg.d_model, cfg.n_series)
    t["dec.out_proj"] = _linear(rng, cfg.d_model, cfg.n_series)
    return SplitTwoParams(t, m)


# building blocks -----------------------------------------------------------------
@functools.lru_cache(maxsize=64)
def moving_average_matrix(length: int, width: int) -> np.ndarray:
    """Averaging operator of odd ``width`` with replicated end points."""
    if width % 2 == 0:
        raise ConfigError(f"moving-average width must be odd, got {width}")
    half = width // 2
    mat = np.zeros((length, length))
    rows = np.arange(length)
    for j in range(-half, half + 1):
        np.add.at(mat, (rows, np.clip(rows + j, 0, length - 1)), 1.0 / width)
    mat.setflags(write=False)
    return mat


def series_decomp(x: Tensor, kernel: int, axis: int = -2) -> tuple[Tensor, Tensor]:
    """Return ``(seasonal, trend)`` with ``trend`` a replicate-padded moving average."""
    if kernel % 2 == 0:
        raise ConfigError(f"decomposition kernel must be odd, got {kernel}")
    if kernel > x.shape[axis]:
        raise ConfigError(f"decomposition kernel {kernel} longer than series {x.shape[axis]}")
    trend = apply_along(x, moving_average_matrix(x.shape[axis], kernel), axis)
    return x - trend, trend


def _split_heads(z: ComplexTensor, heads: int) -> ComplexTensor:
    b, m, d = z.shape
    return ComplexTensor(z.real.reshape(b, m, heads, d // heads), z.imag.reshape(b, m, heads, d // heads))


def _merge_heads(z: ComplexTensor) -> ComplexTensor:
    b, m, h, e = z.shape
    return ComplexTensor(z.real.reshape(b, m, h * e), z.imag.reshape(b, m, h * e))


def _check_modes(modes: np.ndarray, length: int) -> None:
    if modes.size == 0 or modes.min() < 1 or 2 * modes.max() >= length:
        raise ConfigError(f"mode indices {modes.tolist()} out of range for length {length}")


def feb_forward(x: Tensor, W: Tensor, R_re: Tensor, R_im: Tensor, modes: np.ndarray) -> Tensor:
    """Frequency enhanced block: project, DFT, keep ``modes``, mix with R, pad, inverse DFT."""
    if x.ndim != 3:
        raise DimensionError(f"feb expects [B, S, D], got {x.shape}")
    length = x.shape[1]
    modes = np.asarray(modes, dtype=np.int64)
    _check_modes(modes, length)
    if len(modes) != R_re.shape[-1]:
        raise ConfigError(f"kernel holds {R_re.shape[-1]} modes, {len(modes)} selected")
    heads = R_re.shape[0]
    q = x @ W
    spectrum = dft(q, axis=1)
    kept = _split_heads(complex_take(spectrum, modes, axis=1), heads)
    mixed = _merge_heads(complex_einsum("bmhe,hefm->bmhf", kept, ComplexTensor(R_re, R_im)))
    return idft(hermitian_zero_pad(mixed, modes, length, axis=1), length, axis=1)


def fea_forward(
    x_en: Tensor,
    x_de: Tensor,
    W_q: Tensor,
    W_k: Tensor,
    W_v: Tensor,
    modes_q: np.ndarray,
    modes_kv: np.ndarray,
    heads: int = 1,
) -> Tensor:
    """Frequency enhanced cross attention; tanh acts on real and imaginary parts separately."""
    len_q, len_kv = x_de.shape[1], x_en.shape[1]
    modes_q = np.asarray(modes_q, dtype=np.int64)
    modes_kv = np.asarray(modes_kv, dtype=np.int64)
    _check_modes(modes_q, len_q)
    _check_modes(modes_kv, len_kv)
    if len(modes_q) != len(modes_kv):
        raise ConfigError("query and key/value mode sets differ in size")
    q = _split_heads(complex_take(dft(x_de @ W_q, axis=1), modes_q, axis=1), heads)
    k = _split_heads(complex_take(dft(x_en @ W_k, axis=1), modes_kv, axis=1), heads)
    v = _split_heads(complex_take(dft(x_en @ W_v, axis=1), modes_kv, axis=1), heads)
    scores = complex_einsum("bxhe,byhe->bhxy", q, k)
    scores = ComplexTensor(tanh(scores.real), tanh(scores.imag))
    mixed = _merge_heads(complex_einsum("bhxy,byhe->bxhe", scores, v))
    return idft(hermitian_zero_pad(mixed, modes_q, len_q, axis=1), len_q, axis=1)


def ffn_forward(x: Tensor, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor) -> Tensor:
    return gelu(x @ W1 + b1) @ W2 + b2


def _ffn(x: Tensor, p: ParamSet, prefix: str) -> Tensor:
    return ffn_forward(x, p[f"{prefix}.W1"], p[f"{prefix}.b1"], p[f"{prefix}.W2"], p[f"{prefix}.b2"])


def _feb(x: Tensor, p: ParamSet, prefix: str) -> Tensor:
    return feb_forward(x, p[f"{prefix}.W"], p[f"{prefix}.R_re"], p[f"{prefix}.R_im"], p.modes[prefix])


def _as_batch(window) -> WindowBatch:
    if isinstance(window, WindowBatch):
        return window
    if isinstance(window, TimeSeriesWindow):
        return stack_windows([window])
    return stack_windows(list(window))


def data_embedding(batch: WindowBatch, p: SplitOneParams, cfg: ModelConfig) -> tuple[Tensor, Tensor, Tensor]:
    X, X_t, Y_t = Tensor(batch.X), Tensor(batch.X_t), Tensor(batch.Y_t)
    b, length, z = X.shape
    if length != cfg.seq_len or z != cfg.n_series:
        raise DimensionError(f"input series {X.shape} does not match config L={cfg.seq_len}, Z={cfg.n_series}")
    if X_t.shape != (b, cfg.seq_len, cfg.n_time_features):
        raise DimensionError(f"input time features {X_t.shape} do not match config")
    if Y_t.shape != (b, cfg.dec_len, cfg.n_time_features):
        raise DimensionError(f"decoder time features {Y_t.shape}, expected L_d={cfg.dec_len}")
    half = length // 2
    seasonal, trend = series_decomp(X, cfg.decomp_kernel)
    x_emb = conv1d(X, p["emb.conv"]) + X_t @ p["emb.time_x"]
    s_in = concat([seasonal[:, half:, :], Tensor(np.zeros((b, cfg.pred_len, z)))], axis=1)
    s_emb = conv1d(s_in, p["emb.conv"]) + Y_t @ p["emb.time_y"]
    level = X.mean(axis=1, keepdims=True) * Tensor(np.ones((1, cfg.pred_len, 1)))
    trend_ini = concat([trend[:, half:, :], level], axis=1)
    return x_emb, s_emb, trend_ini


def split1_forward(window, p: SplitOneParams, cfg: ModelConfig) -> SplitOneActivations:
    batch = _as_batch(window)
    x_emb, s_emb, trend_ini = data_embedding(batch, p, cfg)
    enc_out, _ = series_decomp(x_emb + _feb(x_emb, p, "enc1.feb"), cfg.decomp_kernel)
    dec_seasonal, trend1 = series_decomp(s_emb + _feb(s_emb, p, "dec.feb"), cfg.decomp_kernel)
    dec_trend = trend_ini + trend1 @ p["dec.trend1"]
    return SplitOneActivations(enc_out, dec_seasonal, dec_trend)


def split2_forward(acts: SplitOneActivations, p: SplitTwoParams, cfg: ModelConfig) -> Tensor:
    enc_out, dec_seasonal, dec_trend = acts.as_tuple()
    b = enc_out.shape[0]
    expected = {
        "enc_out": (b, cfg.seq_len, cfg.d_model),
        "dec_seasonal": (b, cfg.dec_len, cfg.d_model),
        "dec_trend": (b, cfg.dec_len, cfg.n_series),
    }
    for name, t in zip(ACTIVATION_NAMES, acts.as_tuple()):
        if t.shape != expected[name]:
            raise DimensionError(f"{name} has shape {t.shape}, expected {expected[name]}")
    k = cfg.decomp_kernel
    x, _ = series_decomp(enc_out + _ffn(enc_out, p, "enc1.ffn"), k)
    x, _ = series_decomp(x + _feb(x, p, "enc2.feb"), k)
    memory, _ = series_decomp(x + _ffn(x, p, "enc2.ffn"), k)

    cross = fea_forward(
        memory,
        dec_seasonal,
        p["dec.fea.Wq"],
        p["dec.fea.Wk"],
        p["dec.fea.Wv"],
        p.modes["dec.fea.q"],
        p.modes["dec.fea.kv"],
        heads=cfg.heads,
    )
    s, trend2 = series_decomp(dec_seasonal + cross, k)
    s, trend3 = series_decomp(s + _ffn(s, p, "dec.ffn"), k)
    trend = dec_trend + trend2 @ p["dec.trend2"] + trend3 @ p["dec.trend3"]
    out = trend + s @ p["dec.out_proj"]
    return out[:, -cfg.pred_len :, :]


def monolithic_forward(window, p1: SplitOneParams, p2: SplitTwoParams, cfg: ModelConfig) -> Tensor:
    """Unsplit reference: both halves on a single tape."""
    return split2_forward(split1_forward(window, p1, cfg), p2, cfg)


def with_seed(cfg: ModelConfig, seed: int) -> ModelConfig:
    return replace(cfg, seed=seed)
