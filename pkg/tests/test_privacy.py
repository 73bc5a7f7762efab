import itertools
import math

import numpy as np
import pytest

from splitgrid.errors import ConfigError
from splitgrid.fedformer import SplitOneActivations
from splitgrid.privacy import (
    PrivacyBudget,
    SensitivityUndefinedError,
    batch_sensitivity,
    gaussian_mechanism,
    gaussian_sigma,
    laplace_mechanism,
    protect_activations,
)
from splitgrid.tensor import Tensor, vjp

N_DRAWS = 1_000_000


class TestSensitivity:
    def test_identical_rows(self):
        assert batch_sensitivity(np.ones((4, 3, 2))) == 0.0

    def test_unit_vector_apart(self):
        a = np.zeros((2, 5))
        a[1, 3] = 1.0
        assert batch_sensitivity(a) == 1.0

    def test_brute_force_pairs(self, rng):
        rows = rng.standard_normal((4, 2, 3))
        ref = max(np.linalg.norm(rows[i] - rows[j]) for i, j in itertools.combinations(range(4), 2))
        np.testing.assert_allclose(batch_sensitivity(rows), ref, rtol=1e-14)

    def test_single_row_undefined(self):
        with pytest.raises(SensitivityUndefinedError):
            batch_sensitivity(np.ones((1, 4)))


class TestLaplace:
    def test_zero_sensitivity_is_identity(self, rng):
        x = rng.standard_normal(10)
        np.testing.assert_array_equal(laplace_mechanism(x, 1.0, 0.0, rng), x)

    def test_huge_epsilon_barely_perturbs(self, rng):
        x = np.zeros(100_000)
        out = laplace_mechanism(x, 1e9, 2.0, rng)
        assert np.abs(out).max() < 1e-6 * 2.0

    def test_variance(self, rng):
        noise = laplace_mechanism(np.zeros(N_DRAWS), 1.0, 2.0, rng)
        np.testing.assert_allclose(noise.var(), 8.0, rtol=0.05)

    def test_variance_decreases_with_epsilon(self, rng):
        variances = [laplace_mechanism(np.zeros(N_DRAWS), e, 1.0, rng).var() for e in (0.5, 1, 2.5, 5, 7.5, 10)]
        assert all(a > b for a, b in zip(variances, variances[1:]))

    def test_non_positive_epsilon(self, rng):
        with pytest.raises(ConfigError):
            laplace_mechanism(np.zeros(2), 0.0, 1.0, rng)


class TestGaussian:
    def test_zero_sensitivity_is_identity(self, rng):
        x = rng.standard_normal(10)
        np.testing.assert_array_equal(gaussian_mechanism(x, 1.0, 0.01, 0.0, rng), x)

    def test_variance(self, rng):
        noise = gaussian_mechanism(np.zeros(N_DRAWS), 1.0, 0.005, 1.0, rng)
        np.testing.assert_allclose(noise.var(), 2 * math.log(400), rtol=0.05)

    def test_variance_ratio_between_deltas(self):
        ratio = gaussian_sigma(1.0, 0.1, 1.0) ** 2 / gaussian_sigma(1.0, 0.001, 1.0) ** 2
        np.testing.assert_allclose(ratio, math.log(20) / math.log(2000), rtol=1e-12)

    def test_variance_decreases_with_epsilon(self, rng):
        variances = [gaussian_mechanism(np.zeros(N_DRAWS), e, 0.01, 1.0, rng).var() for e in (0.5, 1, 2.5, 5, 7.5, 10)]
        assert all(a > b for a, b in zip(variances, variances[1:]))

    def test_zero_delta_rejected(self, rng):
        with pytest.raises(ConfigError):
            gaussian_mechanism(np.zeros(2), 1.0, 0.0, 1.0, rng)


def make_acts(rng, b=3, identical=False):
    shapes = [(b, 8, 4), (b, 6, 4), (b, 6, 1)]
    arrays = [np.repeat(rng.standard_normal((1, *s[1:])), b, 0) if identical else rng.standard_normal(s) for s in shapes]
    return SplitOneActivations(*(Tensor(a, requires_grad=True) for a in arrays))


class TestProtectActivations:
    def test_disabled_is_pass_through(self, rng):
        acts = make_acts(rng)
        assert protect_activations(acts, PrivacyBudget(enabled=False), rng) is acts

    def test_identical_rows_pass_through(self, rng):
        acts = make_acts(rng, identical=True)
        out = protect_activations(acts, PrivacyBudget(1.0, 0.0, enabled=True), rng)
        for a, b in zip(acts.as_tuple(), out.as_tuple()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_trend_untouched_and_others_noised(self, rng):
        acts = make_acts(rng)
        out = protect_activations(acts, PrivacyBudget(1.0, 0.0, enabled=True), rng)
        assert out.dec_trend is acts.dec_trend
        assert not np.array_equal(out.enc_out.data, acts.enc_out.data)
        assert not np.array_equal(out.dec_seasonal.data, acts.dec_seasonal.data)

    def test_reproducible_with_seed(self):
        acts = make_acts(np.random.default_rng(0))
        budget = PrivacyBudget(2.0, 1e-3, enabled=True)
        a = protect_activations(acts, budget, np.random.default_rng(9))
        b = protect_activations(acts, budget, np.random.default_rng(9))
        np.testing.assert_array_equal(a.enc_out.data, b.enc_out.data)

    def test_gradient_passes_through_noise(self, rng):
        acts = make_acts(rng)
        out = protect_activations(acts, PrivacyBudget(1.0, 0.0, enabled=True), rng)
        seed = rng.standard_normal(out.enc_out.shape)
        (g,) = vjp([out.enc_out], [seed], [acts.enc_out])
        np.testing.assert_array_equal(g, seed)

    def test_sensitivity_override(self, rng):
        acts = make_acts(rng)
        out = protect_activations(acts, PrivacyBudget(1.0, 0.0, enabled=True, sensitivity_override=0.0), rng)
        np.testing.assert_array_equal(out.enc_out.data, acts.enc_out.data)


class TestBudget:
    def test_enabled_needs_positive_epsilon(self):
        with pytest.raises(ConfigError):
            PrivacyBudget(0.0, 0.0, enabled=True)

    def test_delta_range(self):
        with pytest.raises(ConfigError):
            PrivacyBudget(1.0, 1.0)
