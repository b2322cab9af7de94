import numpy as np
import pytest
from scipy import integrate

from reflowlab.dist2d import (
    GaussianMixture,
    ToyTask,
    default_toy_task,
    gaussian_velocity_oracle,
    log_density,
    sample_mixture,
    sample_mixture_labeled,
)
from reflowlab.errors import DegenerateInputError


def test_invariants_rejected():
    with pytest.raises(ValueError):
        GaussianMixture((0.5, 0.6), ((0, 0), (1, 1)))
    with pytest.raises(ValueError):
        GaussianMixture((1.0,), ((0, 0),), scale=0.0)
    with pytest.raises(ValueError):
        ToyTask(default_toy_task().source, default_toy_task().target, True, (0,))


def test_degenerate_mixture_samples_at_mean():
    gm = GaussianMixture((1.0,), ((3.0, -1.0),), 1e-9)
    x = sample_mixture(gm, 50, np.random.default_rng(0))
    np.testing.assert_allclose(x, np.tile([3.0, -1.0], (50, 1)), atol=1e-7)


def test_component_frequency_matches_weights():
    gm = GaussianMixture((0.6, 0.4), ((0, 0), (5, 5)))
    _, labels = sample_mixture_labeled(gm, 100_000, np.random.default_rng(1))
    assert abs(np.mean(labels == 0) - 0.6) <= 0.01


def test_sample_mean_law_of_large_numbers():
    gm = GaussianMixture((0.3, 0.7), ((-2, 1), (2, 1)), 0.5)
    n = 200_000
    x = sample_mixture(gm, n, np.random.default_rng(2))
    expected = 0.3 * np.array([-2, 1]) + 0.7 * np.array([2, 1])
    # per-axis variance of the mixture: within-component + between-component
    var = 0.25 + np.array([0.3 * 0.7 * 16, 0.0])
    stderr = np.sqrt(var / n)
    assert np.all(np.abs(x.mean(axis=0) - expected) <= 3 * stderr + 1e-12)


def test_sampling_deterministic_per_seed_and_streams_differ():
    gm = default_toy_task().target
    a = sample_mixture(gm, 100, np.random.default_rng(5))
    b = sample_mixture(gm, 100, np.random.default_rng(5))
    assert a.tobytes() == b.tobytes()
    s1, s2 = np.random.SeedSequence(5).spawn(2)
    c = sample_mixture(gm, 100, np.random.default_rng(s1))
    d = sample_mixture(gm, 100, np.random.default_rng(s2))
    assert not np.allclose(c, d)


def test_log_density_standard_normal_origin():
    gm = GaussianMixture.standard_normal(2)
    assert log_density(gm, np.zeros(2)) == pytest.approx(-np.log(2 * np.pi), rel=1e-14)


def test_log_density_midpoint_direct_sum():
    gm = GaussianMixture((0.5, 0.5), ((-1.0, 0.0), (1.0, 0.0)), 0.8)
    p = np.array([0.0, 0.0])

    def normal_pdf(mu):
        d2 = np.sum((p - np.array(mu)) ** 2)
        return np.exp(-0.5 * d2 / 0.64) / (2 * np.pi * 0.64)

    direct = 0.5 * normal_pdf((-1, 0)) + 0.5 * normal_pdf((1, 0))
    assert log_density(gm, p) == pytest.approx(np.log(direct), rel=1e-13)


def test_log_density_tail_finite():
    gm = default_toy_task().target
    val = log_density(gm, np.array([500.0, -500.0]))
    assert np.isfinite(val) and val < -1e4


def test_density_integrates_to_one():
    gm = default_toy_task().target
    f = lambda y, x: np.exp(log_density(gm, np.array([x, y])))  # noqa: E731
    total, _ = integrate.dblquad(f, -2.0, 14.0, -10.0, 10.0, epsabs=1e-6)
    assert abs(total - 1.0) <= 1e-3


class TestVelocityOracle:
    mu = np.array([2.0, 0.0])

    def test_t1_independence(self):
        z = np.array([0.3, -1.1])
        np.testing.assert_allclose(gaussian_velocity_oracle(self.mu, 1.0, 1.0, z), z - self.mu)

    def test_t0_independence(self):
        z = np.array([0.3, -1.1])
        np.testing.assert_allclose(gaussian_velocity_oracle(self.mu, 1.0, 0.0, z), -z)

    def test_degenerate(self):
        with pytest.raises(DegenerateInputError):
            gaussian_velocity_oracle(self.mu, 0.0, 0.0, np.zeros(2))

    def test_affine_in_z(self):
        rng = np.random.default_rng(0)
        for t in (0.1, 0.5, 0.9):
            a, b = rng.normal(size=(2, 2))
            f = lambda z: gaussian_velocity_oracle(self.mu, 1.3, t, z)  # noqa: E731
            for lam in (-2.0, 0.25, 3.0):
                np.testing.assert_allclose(f(lam * a + (1 - lam) * b), lam * f(a) + (1 - lam) * f(b), atol=1e-12)

    def test_monte_carlo_conditional_expectation(self):
        t, zt, radius = 0.5, np.array([1.0, 0.0]), 1e-2
        rng = np.random.default_rng(2024)
        hits = []
        for _ in range(10):
            x = self.mu + rng.standard_normal((1_000_000, 2))
            z = rng.standard_normal((1_000_000, 2))
            z_t = (1 - t) * x + t * z
            near = np.sum((z_t - zt) ** 2, axis=1) < radius**2
            hits.append((z - x)[near])
        hits = np.concatenate(hits)
        assert len(hits) > 100
        est = hits.mean(axis=0)
        se = hits.std(axis=0, ddof=1) / np.sqrt(len(hits))
        want = gaussian_velocity_oracle(self.mu, 1.0, t, zt)
        assert np.all(np.abs(est - want) <= 4 * se)
