"""Diagonal Gaussians: reparameterization, closed-form KL and its gradient,
Monte-Carlo KL oracle, counter-based noise streams."""

import numpy as np
import pytest

from varmatch.distributions import (
    draw_noise,
    kl_gradient,
    kl_monte_carlo,
    kl_to_standard_normal,
    philox_generator,
    reparameterize,
)


class TestReparameterize:
    def test_standard_normal_is_identity(self):
        eps = np.array([0.3, -1.2, 0.0, 2.5])
        np.testing.assert_array_equal(reparameterize(np.zeros(4), np.ones(4), eps), eps)

    def test_point_mass_limit(self):
        mu = np.array([1.0, -2.0, 0.5, 3.0])
        z = reparameterize(mu, np.full(4, 1e-12), np.array([5.0, -5.0, 5.0, -5.0]))
        np.testing.assert_allclose(z, mu, atol=1e-10)

    def test_forced_arithmetic(self):
        z = reparameterize(
            np.array([1.0, 2.0, 3.0, 4.0]),
            np.array([1.0, 1.0, 2.0, 2.0]),
            np.array([1.0, -1.0, 1.0, -1.0]),
        )
        np.testing.assert_array_equal(z, [2.0, 1.0, 5.0, 2.0])

    def test_affine_invertible(self):
        rng = np.random.default_rng(0)
        mu = rng.normal(size=4)
        sigma = np.exp(rng.normal(size=4))
        eps = rng.normal(size=4)
        z = reparameterize(mu, sigma, eps)
        np.testing.assert_allclose((z - mu) / sigma, eps, rtol=1e-12)


class TestKL:
    def test_prior_equals_posterior(self):
        assert kl_to_standard_normal(np.zeros(4), np.zeros(4)) == 0.0

    def test_single_mean_shift(self):
        assert kl_to_standard_normal(np.array([1.0, 0, 0, 0]), np.zeros(4)) == pytest.approx(0.5)

    def test_wide_posterior_closed_form(self):
        got = kl_to_standard_normal(np.zeros(4), np.log(2.0) * np.ones(4))
        assert got == pytest.approx(6 - 4 * np.log(2), rel=1e-12)

    def test_nonnegative_and_zero_only_at_prior(self):
        rng = np.random.default_rng(3)
        mu = rng.normal(0, 2, size=(2000, 4))
        log_sigma = rng.normal(0, 1, size=(2000, 4))
        kl = kl_to_standard_normal(mu, log_sigma)
        assert np.all(kl >= 0)
        assert np.all(kl[np.any((np.abs(mu) > 1e-3) | (np.abs(log_sigma) > 1e-3), axis=-1)] > 1e-7)
        assert kl_to_standard_normal(np.zeros(4), np.zeros(4)) < 1e-12

    def test_gradient_matches_finite_differences(self):
        # relative error measured on the whole gradient vector, so finite-
        # difference roundoff at near-zero coordinates does not dominate
        rng = np.random.default_rng(11)
        step = 1e-6
        for _ in range(1000):
            mu = rng.normal(0, 2, 4)
            ls = rng.normal(0, 1, 4)
            g_mu, g_ls = kl_gradient(mu, ls)
            fd = np.empty(8)
            for k in range(4):
                e = np.zeros(4)
                e[k] = step
                fd[k] = (kl_to_standard_normal(mu + e, ls) - kl_to_standard_normal(mu - e, ls)) / (2 * step)
                fd[4 + k] = (kl_to_standard_normal(mu, ls + e) - kl_to_standard_normal(mu, ls - e)) / (2 * step)
            g = np.concatenate([g_mu, g_ls])
            assert np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-8) < 1e-6


class TestKLMonteCarlo:
    def _replicated(self, mu, log_sigma, n, seed):
        """Re-derive the estimator pointwise to get a standard error."""
        sigma = np.exp(log_sigma)
        eps = draw_noise(seed, (0,), (n,) + mu.shape).epsilon
        z = mu + sigma * eps
        per = np.sum((-log_sigma - 0.5 * eps**2) - (-0.5 * z**2), axis=-1)
        return per.mean(), per.std(ddof=1) / np.sqrt(n)

    def test_zero_kl_estimate_near_zero(self):
        mu, ls = np.zeros(4), np.zeros(4)
        for n in (1000, 100_000):
            est = kl_monte_carlo(mu, ls, n, seed=42)
            _, se = self._replicated(mu, ls, n, 42)
            assert abs(est) < 5 * max(se, 1e-6)

    def test_mean_shift_large_n(self):
        est = kl_monte_carlo(np.array([1.0, 0, 0, 0]), np.zeros(4), 10**6, seed=7)
        assert est == pytest.approx(0.5, abs=0.01)

    def test_wide_posterior_large_n(self):
        est = kl_monte_carlo(np.zeros(4), np.log(2.0) * np.ones(4), 10**6, seed=8)
        assert est == pytest.approx(6 - 4 * np.log(2), abs=0.02)

    @pytest.mark.parametrize("n", [1000, 100_000])
    def test_three_standard_error_convergence(self, n):
        rng = np.random.default_rng(21)
        mu = rng.normal(0, 1, 4)
        ls = rng.normal(0, 0.5, 4)
        analytic = kl_to_standard_normal(mu, ls)
        est = kl_monte_carlo(mu, ls, n, seed=13)
        mean, se = self._replicated(mu, ls, n, 13)
        assert est == pytest.approx(mean, rel=1e-12)  # black box equals oracle replication
        assert abs(est - analytic) < 3 * se

    def test_requires_samples(self):
        with pytest.raises(ValueError):
            kl_monte_carlo(np.zeros(4), np.zeros(4), 0, seed=0)


class TestNoiseStreams:
    def test_reproducible(self):
        a = draw_noise(99, (1, 2, 3), (8, 4))
        b = draw_noise(99, (1, 2, 3), (8, 4))
        np.testing.assert_array_equal(a.epsilon, b.epsilon)
        assert a.seed == 99 and a.stream == (1, 2, 3)

    def test_distinct_streams_differ(self):
        a = draw_noise(99, (1, 2, 3), (8, 4)).epsilon
        for stream in [(1, 2, 4), (1, 3, 3), (2, 2, 3)]:
            assert not np.array_equal(a, draw_noise(99, stream, (8, 4)).epsilon)
        assert not np.array_equal(a, draw_noise(100, (1, 2, 3), (8, 4)).epsilon)

    def test_block_prefix_is_stable(self):
        # the first k samples of a block do not depend on the block length
        small = draw_noise(5, (0, 7), (2, 4)).epsilon
        big = draw_noise(5, (0, 7), (6, 4)).epsilon
        np.testing.assert_array_equal(small, big[:2])

    def test_generator_accepts_int_stream(self):
        a = philox_generator(1, 2, 3).standard_normal(4)
        b = philox_generator(1, 2, (3,)).standard_normal(4)
        np.testing.assert_array_equal(a, b)

    def test_too_many_indices_rejected(self):
        with pytest.raises(ValueError):
            philox_generator(1, 2, (1, 2, 3, 4))
