"""Dense float64 tensors with a reverse-mode tape.

Every differentiable operation records its parents and a vector-Jacobian
closure on the output tensor.  ``backward`` walks the resulting graph in
reverse topological order.  Complex values are carried as a pair of real
tensors (``ComplexTensor``); the DFT is a pair of constant linear maps, so
its gradient is the exact adjoint.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DimensionError, NonRealInverseError, NumericError

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """Row-major float64 array, optionally tracked on the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tape_node(self):
        return self._vjp

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


@dataclass(frozen=True)
class ComplexTensor:
    real: Tensor
    imag: Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise DimensionError(
                f"real/imag shapes differ: {self.real.shape} vs {self.imag.shape}"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.real.shape

    def numpy(self) -> np.ndarray:
        return self.real.data + 1j * self.imag.data


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return Tensor._result(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    return Tensor._result(
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return Tensor._result(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    x = a.data
    neg_part = alpha * np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg_part)
    return Tensor._result(out, (a,), lambda g: (g * np.where(x > 0, 1.0, neg_part + alpha),))


_ACTIVATIONS = {"tanh": tanh, "gelu": gelu, "elu": elu}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}") from None
    return fn(x)


# reductions and shape ops ----------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return Tensor._result(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),)
    )


def getitem(a: Tensor, index) -> Tensor:
    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] += g
        return (full,)

    return Tensor._result(a.data[index], (a,), vjp)


def take(a: Tensor, indices, axis: int) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)

    def vjp(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return Tensor._result(np.take(a.data, indices, axis=axis), (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return Tensor._result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


# linear algebra ----------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._result(a.data @ b.data, (a, b), vjp)


@functools.lru_cache(maxsize=256)
def _einsum_grad_specs(spec: str) -> tuple[str, str]:
    lhs, out = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for s in (sa, sb):
        if len(set(s)) != len(s):
            raise ConfigError(f"repeated index inside one operand: {spec}")
    for s, other in ((sa, sb), (sb, sa)):
        if any(c not in out and c not in other for c in s):
            raise ConfigError(f"index summed within a single operand: {spec}")
    return f"{out},{sb}->{sa}", f"{out},{sa}->{sb}"


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand ``np.einsum`` with its adjoint registered on the tape."""
    a, b = as_tensor(a), as_tensor(b)
    spec_a, spec_b = _einsum_grad_specs(spec)
    try:
        out = np.einsum(spec, a.data, b.data, optimize=True)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return Tensor._result(
        out,
        (a, b),
        lambda g: (
            np.einsum(spec_a, g, b.data, optimize=True),
            np.einsum(spec_b, g, a.data, optimize=True),
        ),
    )


def apply_along(x: Tensor, matrix: np.ndarray, axis: int) -> Tensor:
    """Apply a constant matrix along one axis: ``y[.., k, ..] = sum_n A[k, n] x[.., n, ..]``."""
    axis = axis % x.ndim
    if matrix.shape[1] != x.shape[axis]:
        raise DimensionError(
            f"matrix of shape {matrix.shape} cannot act on axis {axis} of {x.shape}"
        )

    def along(m, v):
        return np.moveaxis(np.tensordot(m, v, axes=([1], [axis])), 0, axis)

    return Tensor._result(along(matrix, x.data), (x,), lambda g: (along(matrix.T, g),))


# spectral ----------------------------------------------------------------------
@functools.lru_cache(maxsize=64)
def dft_matrices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Cosine and sine tables ``cos(2 pi k m / n)``, ``sin(2 pi k m / n)``."""
    km = np.outer(np.arange(n), np.arange(n)) % n
    angle = 2.0 * np.pi * km / n
    c, s = np.cos(angle), np.sin(angle)
    c.setflags(write=False)
    s.setflags(write=False)
    return c, s


def dft(x: Tensor | ComplexTensor, axis: int = -1) -> ComplexTensor:
    """Direct-summation DFT, ``X[k] = sum_n x[n] exp(-2 pi i k n / N)``."""
    if isinstance(x, ComplexTensor):
        n = x.shape[axis]
        if n < 1:
            raise DimensionError("dft of an empty sequence")
        c, s = dft_matrices(n)
        re = apply_along(x.real, c, axis) + apply_along(x.imag, s, axis)
        im = apply_along(x.imag, c, axis) - apply_along(x.real, s, axis)
        return ComplexTensor(re, im)
    x = as_tensor(x)
    n = x.shape[axis]
    if n < 1:
        raise DimensionError("dft of an empty sequence")
    c, s = dft_matrices(n)
    return ComplexTensor(apply_along(x, c, axis), apply_along(x, -s, axis))


def idft(spectrum: ComplexTensor, n: int | None = None, axis: int = -1) -> Tensor:
    """Inverse DFT returning the real part; refuses spectra that are not Hermitian."""
    bins = spectrum.shape[axis]
    if n is None:
        n = bins
    if bins != n:
        raise DimensionError(f"spectrum has {bins} bins, expected {n}")
    c, s = dft_matrices(n)
    scale = 1.0 / n
    resid = np.moveaxis(
        np.tensordot(s, spectrum.real.data, axes=([1], [axis % spectrum.real.ndim]))
        + np.tensordot(c, spectrum.imag.data, axes=([1], [axis % spectrum.imag.ndim])),
        0,
        axis,
    )
    worst = float(np.max(np.abs(resid))) * scale if resid.size else 0.0
    if worst > 1e-6:
        raise NonRealInverseError(
            f"inverse DFT has imaginary residual {worst:.3g}; spectrum is not Hermitian"
        )
    return (apply_along(spectrum.real, c, axis) - apply_along(spectrum.imag, s, axis)) * scale


def hermitian_zero_pad(values: ComplexTensor, modes: Sequence[int], n: int, axis: int) -> ComplexTensor:
    """Place kept bins at ``modes`` and their conjugates at ``n - modes``; zero elsewhere."""
    modes = np.asarray(modes, dtype=np.int64)
    if modes.size and (modes.min() < 1 or 2 * modes.max() >= n):
        raise ConfigError(f"modes must lie in 1..{(n - 1) // 2} for length {n}: {modes.tolist()}")
    plus = np.zeros((n, modes.size))
    minus = np.zeros((n, modes.size))
    j = np.arange(modes.size)
    plus[modes, j] = 1.0
    plus[n - modes, j] = 1.0
    minus[modes, j] = 1.0
    minus[n - modes, j] = -1.0
    return ComplexTensor(apply_along(values.real, plus, axis), apply_along(values.imag, minus, axis))


def complex_take(x: ComplexTensor, indices, axis: int) -> ComplexTensor:
    return ComplexTensor(take(x.real, indices, axis), take(x.imag, indices, axis))


def complex_einsum(spec: str, a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    re = einsum(spec, a.real, b.real) - einsum(spec, a.imag, b.imag)
    im = einsum(spec, a.real, b.imag) + einsum(spec, a.imag, b.real)
    return ComplexTensor(re, im)


# convolution -------------------------------------------------------------------
@functools.lru_cache(maxsize=128)
def replicate_shift_matrix(length: int, offset: int) -> np.ndarray:
    """Row t selects ``x[clip(t + offset, 0, length - 1)]``."""
    m = np.zeros((length, length))
    m[np.arange(length), np.clip(np.arange(length) + offset, 0, length - 1)] = 1.0
    m.setflags(write=False)
    return m


def conv1d(x: Tensor, kernel: Tensor, out_channels: int | None = None) -> Tensor:
    """Length-preserving convolution over axis -2 with replicate padding.

    ``x`` is ``[..., L, C_in]`` and ``kernel`` is ``[W, C_in, C_out]`` with odd W.
    """
    width = kernel.shape[0]
    if width % 2 == 0:
        raise ConfigError(f"conv1d kernel width must be odd, got {width}")
    if kernel.ndim != 3 or kernel.shape[1] != x.shape[-1]:
        raise DimensionError(f"kernel {kernel.shape} does not fit input {x.shape}")
    if out_channels is not None and kernel.shape[2] != out_channels:
        raise DimensionError(f"kernel yields {kernel.shape[2]} channels, asked for {out_channels}")
    length = x.shape[-2]
    half = width // 2
    out = None
    for w in range(width):
        shifted = apply_along(x, replicate_shift_matrix(length, w - half), -2)
        term = matmul(shifted, kernel[w])
        out = term if out is None else out + term
    return out


# autodiff engine ---------------------------------------------------------------
def _topological(roots: Iterable[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(r, False) for r in roots if r.requires_grad]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _propagate(outputs: Sequence[Tensor], seeds: Sequence[np.ndarray]) -> dict[int, np.ndarray]:
    grads: dict[int, np.ndarray] = {}
    for out, seed in zip(outputs, seeds):
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != out.shape:
            raise DimensionError(f"seed gradient {seed.shape} does not match output {out.shape}")
        if out.requires_grad:
            grads[id(out)] = grads[id(out)] + seed if id(out) in grads else seed.copy()
    for node in reversed(_topological(outputs)):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return grads


def backward(loss: Tensor, grad: np.ndarray | None = None, retain_graph: bool = False) -> None:
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every reachable leaf.

    Without ``grad`` the loss must be a scalar.  The tape is released
    afterwards unless ``retain_graph`` is set.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ConfigError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    nodes = _topological([loss])
    grads = _propagate([loss], [grad])
    for node in nodes:
        if node._vjp is None and node.requires_grad:
            g = grads.get(id(node))
            if g is not None:
                node.grad = g if node.grad is None else node.grad + g
    if not retain_graph:
        for node in nodes:
            node._parents = ()
            node._vjp = None


def vjp(outputs: Sequence[Tensor], seeds: Sequence[np.ndarray], wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``sum(seed * output)`` w.r.t. ``wrt``; the tape is kept and ``.grad`` untouched."""
    grads = _propagate(list(outputs), list(seeds))
    return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central differences ``(f(x+h) - f(x-h)) / 2h`` per element of ``x``."""
    if h <= 0:
        raise ConfigError("finite difference step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    out = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(base.copy()))
        flat[i] = orig - h
        down = float(f(base.copy()))
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return out


def check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")
