import math

import numpy as np
import pytest

from elicitkit.bayes import (
    LinearModelSpec, PosteriorSampleSet, dataset_loglik, evaluate, log_posterior, posterior_predictive,
    prior_predictive_loglik, sample_posterior,
)
from elicitkit.datasets import generate_synthetic
from elicitkit.elicitation import MixturePrior
from elicitkit.errors import NumericError, SamplerHealthError
from elicitkit.nuts import SamplerSettings, effective_sample_size
from oracles import conjugate_posterior


def _mixture(rng, k, dim):
    return MixturePrior(rng.normal(0, 1.5, (k, dim)), rng.uniform(0.4, 2.0, (k, dim)))


def _fd_grad(f, x, h=1e-5):
    return np.array([(f(x + h * e)[0] - f(x - h * e)[0]) / (2 * h) for e in np.eye(len(x))])


def _mc_se(post):
    chains = np.stack([post.chain(c) for c in np.unique(post.chain_ids)])
    return np.sqrt(post.samples.var(0, ddof=1) / effective_sample_size(chains))


class TestLogPosterior:
    def test_no_data_equals_prior(self, rng):
        prior = _mixture(rng, 3, 4)
        spec = LinearModelSpec("classification", 3, prior)
        theta = rng.normal(size=4)
        value, grad = log_posterior(spec, theta, (np.zeros((0, 3)), np.zeros(0)))
        assert value == pytest.approx(prior.log_density(theta), rel=1e-13)
        np.testing.assert_allclose(grad, prior.logpdf_grad(theta)[1], rtol=1e-13)

    def test_no_data_regression_adds_only_noise_prior(self, rng):
        prior = MixturePrior.uninformative(2)
        spec = LinearModelSpec("regression", 2, prior)
        value, _ = log_posterior(spec, np.array([0.0, 0.0, 0.0, 0.0]), (np.zeros((0, 2)), np.zeros(0)))
        # Half-Cauchy(1) at sigma = 1 is 1/pi; the log Jacobian vanishes at log sigma = 0
        assert value == pytest.approx(prior.log_density(np.zeros(3)) + math.log(1 / math.pi), rel=1e-13)

    def test_classification_at_zero(self):
        n = 12
        X = np.random.default_rng(0).normal(size=(n, 2))
        y = np.array([0, 1] * (n // 2), float)
        prior = MixturePrior.uninformative(2)
        spec = LinearModelSpec("classification", 2, prior)
        value, _ = log_posterior(spec, np.zeros(3), (X, y))
        assert value - prior.log_density(np.zeros(3)) == pytest.approx(n * math.log(0.5), rel=1e-13)

    @pytest.mark.parametrize("kind,noise_sd,seed", [("classification", None, 1), ("regression", None, 2),
                                                   ("regression", 0.7, 3)])
    def test_gradient_finite_differences(self, kind, noise_sd, seed):
        rng = np.random.default_rng(seed)
        for _ in range(50):
            d, n = int(rng.integers(1, 6)), int(rng.integers(0, 30))
            X = rng.normal(size=(n, d))
            y = (rng.uniform(size=n) < 0.5).astype(float) if kind == "classification" else rng.normal(size=n)
            spec = LinearModelSpec(kind, d, _mixture(rng, int(rng.integers(1, 6)), d + 1), noise_sd=noise_sd)
            theta = rng.normal(0, 1, spec.n_params)
            f = lambda t: log_posterior(spec, t, (X, y))  # noqa: E731
            grad, fd = f(theta)[1], _fd_grad(f, theta)
            assert np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-8) < 1e-5

    def test_overflow_is_numeric_error(self):
        spec = LinearModelSpec("regression", 1, MixturePrior.uninformative(1))
        with pytest.raises(NumericError):
            log_posterior(spec, np.array([0.0, 0.0, -400.0]), (np.ones((3, 1)), np.ones(3) * 5))

    def test_dimension_checks(self):
        with pytest.raises(ValueError):
            LinearModelSpec("regression", 3, MixturePrior.uninformative(2))
        spec = LinearModelSpec("classification", 2, MixturePrior.uninformative(2))
        with pytest.raises(ValueError):
            log_posterior(spec, np.zeros(4), (np.zeros((1, 2)), np.zeros(1)))


class TestSampler:
    @pytest.mark.parametrize("d,n", [(2, 0), (3, 20)])
    def test_conjugate_oracle(self, d, n):
        rng = np.random.default_rng(10 * d + n)
        m0, s0 = rng.normal(size=d + 1), rng.uniform(0.5, 2, d + 1)
        X = rng.normal(size=(n, d))
        y = X @ rng.normal(size=d) + 0.5 * rng.normal(size=n)
        spec = LinearModelSpec("regression", d, MixturePrior(m0[None], s0[None]), noise_sd=0.5)
        post = sample_posterior(spec, (X, y), chains=4, samples_per_chain=1000, seed=3)
        mean, cov = conjugate_posterior(m0, s0, X, y, 0.5)
        assert np.all(np.abs(post.samples.mean(0) - mean) < 3 * _mc_se(post))
        assert np.all(np.abs(post.samples.var(0) / np.diag(cov) - 1) < 0.2)

    def test_shapes_and_chain_agreement(self):
        data = generate_synthetic(20, seed=4)
        spec = LinearModelSpec("regression", 3, MixturePrior.uninformative(3))
        post = sample_posterior(spec, data, chains=3, samples_per_chain=800, seed=5)
        assert post.samples.shape == (2400, 5) and post.columns[-2:] == ("bias", "noise")
        assert np.all(post.samples[:, -1] > 0)
        se = [_mc_se(PosteriorSampleSet(post.chain(c), np.zeros(800), post.columns, "regression"))
              for c in range(3)]
        means = [post.chain(c).mean(0) for c in range(3)]
        for a in range(3):
            for b in range(a + 1, 3):
                assert np.all(np.abs(means[a] - means[b]) < 4 * np.hypot(se[a], se[b]))

    def test_sharp_prior_recovers_truth(self):
        data = generate_synthetic(20, seed=6)
        prior = MixturePrior(np.array([[2.0, -1.0, 1.0, 0.0]]), np.array([[0.1, 0.1, 0.1, 1.0]]))
        spec = LinearModelSpec("regression", 3, prior)
        post = sample_posterior(spec, data, chains=2, samples_per_chain=500, seed=1,
                                settings=SamplerSettings(target_accept=0.9))
        assert np.all(np.abs(post.weights[:, :3].mean(0) - [2, -1, 1]) < 0.1)

    def test_deterministic_per_seed(self):
        data = generate_synthetic(10, seed=2)
        spec = LinearModelSpec("regression", 3, MixturePrior.uninformative(3), noise_sd=0.1)
        kw = dict(chains=1, samples_per_chain=50, settings=SamplerSettings(warmup=100))
        a, b = sample_posterior(spec, data, seed=8, **kw), sample_posterior(spec, data, seed=8, **kw)
        assert np.array_equal(a.samples, b.samples)
        assert not np.array_equal(a.samples, sample_posterior(spec, data, seed=9, **kw).samples)

    def test_health_error_carries_diagnostics(self):
        data = generate_synthetic(5, seed=2)
        spec = LinearModelSpec("regression", 3, MixturePrior.uninformative(3))
        # a crippled sampler: tiny trees and a huge acceptance target force divergences
        with pytest.raises(SamplerHealthError) as err:
            sample_posterior(spec, data, chains=1, samples_per_chain=200, seed=0, max_divergence_rate=0.0,
                             settings=SamplerSettings(warmup=20, target_accept=0.05, max_tree_depth=2))
        assert "chains" in err.value.diagnostics

    def test_save_load_round_trip(self, tmp_path):
        spec = LinearModelSpec("regression", 1, MixturePrior.uninformative(1))
        post = sample_posterior(spec, (np.ones((3, 1)), np.ones(3)), chains=2, samples_per_chain=20, seed=0,
                                settings=SamplerSettings(warmup=50))
        post.save(tmp_path / "post.csv")
        back = PosteriorSampleSet.load(tmp_path / "post.csv")
        assert np.array_equal(back.samples, post.samples) and back.columns == ("w0", "bias", "noise")
        assert (tmp_path / "post.diagnostics.json").exists()


class TestPredictive:
    def test_zero_theta_ties_to_one(self):
        pred = posterior_predictive(np.zeros((2, 4)), np.random.default_rng(0).normal(size=(6, 3)), "classification")
        assert np.all(pred == 1)

    def test_truth_reproduces_noiseless_targets(self):
        data = generate_synthetic(30, noise_sd=0.0, seed=1)
        pred = posterior_predictive(np.array([[2.0, -1.0, 1.0, 0.0]]), data.features, "regression")
        np.testing.assert_allclose(pred[0], data.targets, atol=1e-14)

    def test_one_row_per_sample(self):
        pred = posterior_predictive(np.zeros((25_000, 4)), np.zeros((7, 3)), "regression")
        assert pred.shape == (25_000, 7)

    def test_noise_column_ignored(self):
        post = PosteriorSampleSet(np.array([[1.0, 0.0, 9.0]]), np.zeros(1), ("w0", "bias", "noise"), "regression")
        assert posterior_predictive(post, [[2.0]], "regression")[0, 0] == 2.0


class TestEvaluate:
    def test_perfect_classifier(self):
        X = np.array([[1.0], [-1.0], [2.0]])
        assert evaluate(np.array([[3.0, 0.0]]), (X, np.array([1, 0, 1.0])), "classification").mean == 1.0

    def test_exact_regression(self):
        X = np.array([[1.0], [2.0]])
        assert evaluate(np.array([[2.0, 1.0]]), (X, np.array([3.0, 5.0])), "regression").mean == 0.0

    def test_mean_of_accuracies(self):
        X = np.array([[1.0]] * 5 + [[-1.0]] * 5)
        y = np.array([1.0] * 3 + [0.0] * 2 + [0.0] * 5)
        # sample 1 says 1 everywhere: 3/10 right; sample 2 says sign(x): 8/10 right
        res = evaluate(np.array([[0.0, 1.0], [1.0, 0.0]]), (X, y), "classification")
        assert list(res.per_sample) == [0.3, 0.8] and res.mean == pytest.approx(0.55)
        res = evaluate(np.array([[0.0, 1.0]] * 0 + [[1.0, 0.0]]), (X[[0, 1, 2, 5, 6]], y[[0, 1, 2, 5, 6]]),
                       "classification")
        assert res.mean == 1.0

    def test_point_six_and_point_eight(self):
        X = np.array([[1.0]] * 5)
        y = np.array([1, 1, 1, 0, 0], float)
        y2 = np.array([1, 1, 1, 1, 0], float)
        a = evaluate(np.array([[1.0, 0.0]]), (X, y), "classification").per_sample[0]
        b = evaluate(np.array([[1.0, 0.0]]), (X, y2), "classification").per_sample[0]
        assert (a, b) == (0.6, 0.8) and np.mean([a, b]) == pytest.approx(0.7)

    def test_mse_permutation_invariant(self, rng):
        X, y = rng.normal(size=(20, 2)), rng.normal(size=20)
        params = rng.normal(size=(5, 3))
        perm = rng.permutation(20)
        a = evaluate(params, (X, y), "regression").per_sample
        b = evaluate(params, (X[perm], y[perm]), "regression").per_sample
        np.testing.assert_allclose(a, b, rtol=1e-13)

    def test_empty_test_set(self):
        with pytest.raises(ValueError):
            evaluate(np.zeros((1, 2)), (np.zeros((0, 1)), np.zeros(0)), "regression")


class TestPriorPredictive:
    def test_point_mass_at_zero(self):
        point = MixturePrior(np.zeros((1, 3)), np.full((1, 3), 1e-300))
        spec = LinearModelSpec("classification", 2, point)
        X, y = np.random.default_rng(0).normal(size=(25, 2)), np.array([0, 1] * 12 + [1], float)
        ll = prior_predictive_loglik(spec, (X, y), n_samples=10)
        np.testing.assert_allclose(ll, 25 * math.log(0.5), rtol=1e-12)
        assert abs(25 * math.log(0.5) + 17.3287) < 1e-4

    def test_length(self):
        spec = LinearModelSpec("regression", 3, MixturePrior.uninformative(3))
        assert prior_predictive_loglik(spec, generate_synthetic(25), 500, seed=1).shape == (500,)

    @pytest.mark.parametrize("noise", ["sampled", "unit"])
    def test_sharp_beats_uninformative(self, noise):
        data = generate_synthetic(25, seed=3)
        sharp = MixturePrior(np.array([[2.0, -1.0, 1.0, 0.0]]), np.array([[0.1, 0.1, 0.1, 1.0]]))
        flat = MixturePrior.uninformative(3)
        ll = [prior_predictive_loglik(LinearModelSpec("regression", 3, p), data, 500, seed=2, noise=noise).mean()
              for p in (sharp, flat)]
        assert ll[0] > ll[1]

    def test_matches_direct_loglik(self):
        spec = LinearModelSpec("regression", 1, MixturePrior.uninformative(1), noise_sd=0.3)
        X, y = np.array([[1.0], [2.0]]), np.array([0.5, -0.5])
        ll = prior_predictive_loglik(spec, (X, y), 4, seed=0)
        from elicitkit.seeding import derive_rng
        params = spec.prior.sample(4, derive_rng(0, 5))
        np.testing.assert_allclose(ll, dataset_loglik(params, X, y, "regression", 0.3))
        manual = [sum(-0.5 * math.log(2 * math.pi * 0.09) - (p[0] * x + p[1] - t) ** 2 / 0.18
                      for x, t in zip(X[:, 0], y)) for p in params]
        np.testing.assert_allclose(ll, manual, rtol=1e-12)

    def test_empty_subset(self):
        spec = LinearModelSpec("classification", 1, MixturePrior.uninformative(1))
        with pytest.raises(ValueError):
            prior_predictive_loglik(spec, (np.zeros((0, 1)), np.zeros(0)))


def test_ess_of_iid_draws_near_total():
    draws = np.random.default_rng(1).normal(size=(4, 2000, 2))
    ess = effective_sample_size(draws)
    assert np.all((ess > 6000) & (ess < 10000))


def test_ess_detects_autocorrelation():
    rng = np.random.default_rng(2)
    x = np.zeros((2, 4000))
    for t in range(1, 4000):
        x[:, t] = 0.9 * x[:, t - 1] + rng.normal(size=2)
    # AR(1) with phi = 0.9 has integrated time (1 + phi) / (1 - phi) = 19
    assert 8000 / 19 * 0.6 < effective_sample_size(x)[0] < 8000 / 19 * 1.6


def test_fixed_hmc_debug_flag():
    spec = LinearModelSpec("regression", 1, MixturePrior.uninformative(1), noise_sd=1.0)
    post = sample_posterior(spec, (np.zeros((0, 1)), np.zeros(0)), chains=2, samples_per_chain=1500, seed=0,
                            settings=SamplerSettings(algorithm="hmc", hmc_steps=8, warmup=300))
    assert np.all(np.abs(post.samples.mean(0)) < 0.2) and np.all(np.abs(post.samples.std(0) - 1) < 0.15)
