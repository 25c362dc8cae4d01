"""Implicit-posterior sampling, the Gaussian baseline, and moment estimates."""

import numpy as np
import pytest
from scipy import stats

from aadm import autodiff as ad
from aadm import posterior
from aadm.network import MlpSpec
from aadm.posterior import (
    GaussianQ,
    GeneratorParams,
    closed_form_kl,
    closed_form_kl_node,
    estimate_moments,
    gaussian_logpdf,
    gaussian_q_sample,
    gaussian_q_sample_and_logpdf,
    generator_forward,
    leaves,
    sample_weights,
)


def _passthrough_generator(dim):
    """Generator whose MLP is the identity map on its noise input."""
    mlp = MlpSpec(input_dim=dim, hidden=(), output_dim=dim)
    arrays = {
        "noise_mu": np.zeros(dim),
        "noise_logvar": np.zeros(dim),
        "W0": np.eye(dim),
        "b0": np.zeros(dim),
    }
    return GeneratorParams(noise_dim=dim, mlp=mlp, arrays=arrays)


class TestSampleWeights:
    def test_passthrough_matches_standard_normal(self):
        gen = _passthrough_generator(3)
        t = ad.Tape()
        rng = np.random.default_rng(0)
        w = sample_weights(t, gen, leaves(t, gen.arrays), 100_000, rng)
        assert np.abs(w.value.mean(axis=0)).max() < 0.02
        assert np.abs(w.value.std(axis=0) - 1).max() < 0.02

    def test_zero_generator_weights_emit_output_bias(self):
        rng = np.random.default_rng(1)
        gen = GeneratorParams.create(weight_count=4, rng=rng, noise_dim=5, hidden=(3,))
        for name in gen.arrays:
            if name.startswith("W"):
                gen.arrays[name] = np.zeros_like(gen.arrays[name])
        gen.arrays["b1"] = np.arange(4.0)
        t = ad.Tape()
        w = sample_weights(t, gen, leaves(t, gen.arrays), 7, rng)
        np.testing.assert_array_equal(w.value, np.tile(np.arange(4.0), (7, 1)))

    def test_fixed_seed_is_bitwise_deterministic(self):
        gen = GeneratorParams.create(
            weight_count=6, rng=np.random.default_rng(42), noise_dim=4, hidden=(3,)
        )
        t1, t2 = ad.Tape(), ad.Tape()
        a = sample_weights(t1, gen, leaves(t1, gen.arrays), 5, np.random.default_rng(7))
        b = sample_weights(t2, gen, leaves(t2, gen.arrays), 5, np.random.default_rng(7))
        np.testing.assert_array_equal(a.value, b.value)

    def test_reparameterization_gradient_matches_fd(self):
        # d/d(noise_mu) of a scalar of the samples, with shared z draws
        rng = np.random.default_rng(2)
        gen = GeneratorParams.create(weight_count=3, rng=rng, noise_dim=2, hidden=(4,))
        eps = rng.standard_normal((6, 2))

        def build(t, mu):
            nodes = leaves(t, {k: v for k, v in gen.arrays.items() if k != "noise_mu"})
            nodes["noise_mu"] = mu
            w = generator_forward(t, gen, nodes, eps)
            return ad.sum_(ad.square(w))

        err = ad.finite_difference_check(build, gen.arrays["noise_mu"], h=1e-6)
        assert err < 1e-4


class TestGaussianQ:
    def test_logpdf_standard_normal_at_zero(self):
        lp = gaussian_logpdf(np.zeros((1, 1)), np.zeros(1), np.ones(1))
        assert lp[0] == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)

    def test_logpdf_maximized_at_mean(self):
        rng = np.random.default_rng(3)
        mu = rng.standard_normal(4)
        var = rng.uniform(0.5, 2.0, 4)
        at_mean = gaussian_logpdf(mu[None], mu, var)[0]
        for _ in range(50):
            w = mu + rng.standard_normal(4) * 0.5
            assert gaussian_logpdf(w[None], mu, var)[0] <= at_mean + 1e-12

    def test_logpdf_frozen_oracle_case(self):
        # scipy oracle: N(3 | 1, 4)
        expected = stats.norm.logpdf(3.0, loc=1.0, scale=2.0)
        assert expected == pytest.approx(-2.1120857137646180)
        lp = gaussian_logpdf(np.array([[3.0]]), np.array([1.0]), np.array([4.0]))
        assert lp[0] == pytest.approx(expected, abs=1e-12)

    def test_sample_and_logpdf_shapes_and_moments(self):
        spec = MlpSpec(input_dim=1, hidden=(2,))
        q = GaussianQ.create(spec, np.random.default_rng(4), init_logvar=0.0)
        w, lp = gaussian_q_sample_and_logpdf(q, 50_000, np.random.default_rng(5))
        assert w.shape == (50_000, q.weight_count)
        assert lp.shape == (50_000,)
        np.testing.assert_allclose(w.mean(axis=0), q.arrays["q_mu"], atol=0.03)

    def test_passthrough_generator_agrees_with_gaussian_q(self):
        # Same distribution => two-sample KS statistic per coordinate is tame.
        gen = _passthrough_generator(2)
        t = ad.Tape()
        wg = sample_weights(t, gen, leaves(t, gen.arrays), 10_000,
                            np.random.default_rng(6))
        q = GaussianQ(arrays={"q_mu": np.zeros(2), "q_logvar": np.zeros(2)})
        wq, _ = gaussian_q_sample_and_logpdf(q, 10_000, np.random.default_rng(7))
        for j in range(2):
            ks = stats.ks_2samp(wg.value[:, j], wq[:, j])
            assert ks.pvalue > 0.01


class TestClosedFormKl:
    def test_identical_distributions_give_zero(self):
        assert closed_form_kl(np.zeros(3), np.ones(3), 1.0) == pytest.approx(0.0)

    def test_unit_mean_case_matches_quadrature(self):
        # Oracle: 1-D quadrature of q log(q/p)
        from scipy.integrate import quad

        def integrand(w):
            qd = stats.norm.pdf(w, 1.0, 1.0)
            return qd * (stats.norm.logpdf(w, 1.0, 1.0) - stats.norm.logpdf(w, 0.0, 1.0))

        oracle, _ = quad(integrand, -10, 12)
        assert oracle == pytest.approx(0.5, abs=1e-9)
        assert closed_form_kl(np.ones(1), np.ones(1), 1.0) == pytest.approx(0.5)

    def test_non_negative_on_random_inputs(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            d = rng.integers(1, 6)
            mu = rng.standard_normal(d)
            var = rng.uniform(0.1, 3.0, d)
            s0 = rng.uniform(0.1, 3.0)
            assert closed_form_kl(mu, var, s0) >= 0.0

    def test_node_version_matches_numpy_and_gradients(self):
        rng = np.random.default_rng(9)
        d = 3
        mu = rng.standard_normal(d)
        logvar = rng.standard_normal(d) * 0.3
        ls0 = np.array([0.2])
        t = ad.Tape()
        nodes = leaves(t, {"q_mu": mu, "q_logvar": logvar})
        kl = closed_form_kl_node(t, nodes, t.leaf(ls0))
        assert kl.item() == pytest.approx(
            closed_form_kl(mu, np.exp(logvar), np.exp(ls0[0])), rel=1e-12
        )

        def build(tape, v):
            nd = {
                "q_mu": ad.narrow(v, 0, 0, d),
                "q_logvar": ad.narrow(v, 0, d, d),
            }
            return closed_form_kl_node(tape, nd, ad.narrow(v, 0, 2 * d, 1))

        packed = np.concatenate([mu, logvar, ls0])
        assert ad.finite_difference_check(build, packed) < 1e-5


class TestEstimateMoments:
    def test_two_point_example(self):
        est = estimate_moments(np.array([[0.0], [2.0]]))
        assert est.mean[0] == 1.0
        assert est.var[0] == 1.0
        assert est.count == 2

    def test_identical_samples_hit_floor(self):
        est = estimate_moments(np.ones((5, 2)))
        np.testing.assert_array_equal(est.var, posterior.MOMENT_VARIANCE_FLOOR)

    def test_monte_carlo_oracle(self):
        rng = np.random.default_rng(10)
        draws = 3.0 + np.sqrt(5.0) * rng.standard_normal((100_000, 1))
        est = estimate_moments(draws)
        assert abs(est.mean[0] - 3.0) < 0.05
        assert abs(est.var[0] - 5.0) < 0.2

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError):
            estimate_moments(np.ones((1, 3)))
