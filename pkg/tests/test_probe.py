import math

import numpy as np
import pytest
from scipy import integrate
from scipy.special import expit
from scipy.stats import gaussian_kde

from elicitkit import mocks
from elicitkit.diagnostics import energy
from elicitkit.errors import ProbeError, SingularDesignError
from elicitkit.probe import (
    EPS_P, ExtractedDistribution, MLEParamSample, ProbeDesign, build_prediction_prompt, extract_distribution,
    fit_mle, format_demos, icl_predict, kde_fit, mc_posterior_on_extracted_prior, parse_predictions,
    probe_inputs,
)
from elicitkit.prompts import TaskDescription
from oracles import conjugate_posterior, gaussian_kde_logpdf, ols

DESC = TaskDescription("You predict a target.", "The features are ['feature 0', 'feature 1', 'feature 2'].", (0, 0))


def _descs(k):
    return [TaskDescription(DESC.system, f"{DESC.user} Variant {i}.", (i, 0)) for i in range(k)]


def _counting(handler):
    calls = []

    def respond(request):
        calls.append(request)
        return handler(request, len(calls))

    respond.calls = calls
    return respond


class TestPrompt:
    def test_demo_format(self):
        assert format_demos(np.array([[1.0, -2.5]]), np.array([3.0])) == "features: [1.0000, -2.5000] -> label: 3.0000"

    def test_prompt_lists_queries_and_demos(self):
        X = np.array([[1.0, 2.0, 3.0], [0.5, 0.25, 0.125]])
        _, user = build_prediction_prompt(DESC, X, (X, np.array([1.0, 0.0])))
        assert user.startswith(DESC.user)
        assert "labelled examples" in user and user.count("-> label:") == 2
        assert user.rstrip().endswith("features: [0.5000, 0.2500, 0.1250]")

    @pytest.mark.parametrize("reply", [
        "[1, 2, 3]", "1\n2\n3", "features: [0.1] -> 1\nfeatures: [0.2] -> 2\nfeatures: [0.3] -> 3",
        "Predictions: 1, 2 and 3.", '{"predictions": [1, 2, 3]}',
    ])
    def test_parse(self, reply):
        assert list(parse_predictions(reply, 3)) == [1, 2, 3]

    def test_parse_wrong_count(self):
        with pytest.raises(ValueError):
            parse_predictions("1\n2", 3)


class TestIclPredict:
    def test_planted_linear_exact(self, gateway):
        X = probe_inputs(ProbeDesign(3), 0, (0, 0))
        pred = icl_predict(gateway(mocks.planted([2.0, -1.0, 1.0])), DESC, X)
        np.testing.assert_array_equal(pred, X @ [2.0, -1.0, 1.0])

    def test_zero_probability_accepted(self, gateway):
        llm = gateway(mocks.ScriptedLLM(predict=mocks.constant_predictor(0.0)))
        pred = icl_predict(llm, DESC, np.zeros((4, 3)), model_class="logistic")
        assert np.all(pred == 0.0)
        assert fit_mle(np.random.default_rng(0).normal(size=(4, 3)), pred, "logistic").phi[-1] == pytest.approx(
            math.log(EPS_P / (1 - EPS_P)))

    def test_short_reply_reasked(self, gateway):
        def handler(request, n):
            return "\n".join(["0.5"] * (24 if n == 1 else 25))

        responder = _counting(handler)
        pred = icl_predict(gateway(mocks.ScriptedLLM(predict=lambda r: responder(r))), DESC, np.zeros((25, 3)))
        assert len(pred) == 25 and len(responder.calls) == 2
        assert responder.calls[1].messages[-1][1].startswith("Attempt 2")

    def test_out_of_range_probability_reasked_then_fails(self, gateway):
        llm = gateway(mocks.ScriptedLLM(predict=mocks.constant_predictor(1.5)))
        with pytest.raises(ProbeError):
            icl_predict(llm, DESC, np.zeros((3, 3)), model_class="logistic", retry_limit=2)
        assert llm.stats.mock_calls == 3


class TestFitMle:
    def test_planted_noiseless(self):
        X = np.round(np.random.default_rng(1).uniform(-5, 5, (25, 3)), 4)
        s = fit_mle(X, X @ [2.0, -1.0, 1.0])
        np.testing.assert_allclose(s.phi, [2, -1, 1, 0], atol=1e-8)
        assert s.approximation_mse < 1e-16

    def test_planted_logistic(self):
        X = np.random.default_rng(2).uniform(-5, 5, (25, 2))
        s = fit_mle(X, expit(X @ [0.5, -0.3]), "logistic")
        np.testing.assert_allclose(s.phi, [0.5, -0.3, 0.0], atol=1e-6)

    def test_noisy_labels_match_ols_oracle(self):
        rng = np.random.default_rng(3)
        X = rng.uniform(-5, 5, (25, 3))
        y = X @ [2.0, -1.0, 1.0] + rng.normal(0, 0.1, 25)
        s = fit_mle(X, y)
        np.testing.assert_allclose(s.phi, ols(X, y), atol=1e-10)
        assert np.all(np.abs(s.phi - [2, -1, 1, 0]) < 0.2) and 0.003 < s.approximation_mse < 0.02

    def test_residuals_orthogonal(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            X = rng.uniform(-5, 5, (25, 4))
            t = rng.normal(0, 3, 25)
            s = fit_mle(X, t)
            A = np.hstack([X, np.ones((25, 1))])
            assert np.max(np.abs(A.T @ (t - A @ s.phi))) < 1e-8

    def test_clamp_bounds_logit(self):
        X = np.random.default_rng(5).normal(size=(6, 1))
        s = fit_mle(X, np.array([0, 1, 0, 1, 0, 1.0]), "logistic")
        bound = math.log((1 - EPS_P) / EPS_P)
        assert np.all(np.abs(np.hstack([X, np.ones((6, 1))]) @ s.phi) <= bound + 1e-9)

    def test_rank_deficient(self):
        X = np.ones((10, 2))
        with pytest.raises(SingularDesignError):
            fit_mle(X, np.zeros(10))
        with pytest.raises(SingularDesignError):
            fit_mle(np.zeros((2, 3)), np.zeros(2))


class TestExtract:
    def test_sample_count(self, gateway):
        llm = gateway(mocks.synthetic_sharp())
        ext = extract_distribution(llm, _descs(100), ProbeDesign(3), seed=1)
        assert ext.kind == "prior" and ext.matrix.shape == (500, 4) and ext.demos is None
        assert {s.origin for s in ext.samples} == {(k, r) for k in range(100) for r in range(5)}

    def test_single_rule_is_degenerate(self, gateway):
        ext = extract_distribution(gateway(mocks.planted([2.0, -1.0, 1.0], 0.5)), _descs(100), ProbeDesign(3))
        assert np.ptp(ext.matrix, axis=0).max() < 1e-8
        assert np.all(ext.mse < 1e-16)

    def test_demos_make_posterior(self, gateway):
        demos = (np.random.default_rng(0).normal(size=(25, 3)), np.zeros(25))
        ext = extract_distribution(gateway(mocks.planted([1.0, 1.0, 1.0])), _descs(2), ProbeDesign(3), demos)
        assert ext.kind == "posterior" and ext.demos[0].shape == (25, 3)

    def test_failed_description_dropped(self, gateway):
        good = mocks.linear_predictor([1.0, 0.0, 0.0])

        def predict(request):
            return "???" if "Variant 1." in request.text else good(request)

        ext = extract_distribution(gateway(mocks.ScriptedLLM(predict=predict)), _descs(3), ProbeDesign(3),
                                   retry_limit=0)
        assert len(ext.samples) == 2 * 5 and {s.origin[0] for s in ext.samples} == {0, 2}

    def test_all_failed(self, gateway):
        with pytest.raises(ProbeError):
            extract_distribution(gateway(mocks.ScriptedLLM(predict=lambda r: "?")), _descs(1), ProbeDesign(3),
                                 retry_limit=0)

    def test_inputs_seeded_per_origin(self):
        d = ProbeDesign(2)
        assert np.array_equal(probe_inputs(d, 1, (3, 4)), probe_inputs(d, 1, (3, 4)))
        assert not np.array_equal(probe_inputs(d, 1, (3, 4)), probe_inputs(d, 1, (3, 3)))
        X = probe_inputs(d, 1, (0, 0))
        assert X.shape == (25, 2) and X.min() >= -5 and X.max() <= 5

    def test_csv_round_trip(self, tmp_path):
        ext = ExtractedDistribution("prior", [MLEParamSample(np.array([0.1, 0.2]), 0.5, (3, 1))])
        ext.save(tmp_path / "e.csv")
        assert (tmp_path / "e.csv").read_text().splitlines()[0] == "origin,phi_0,phi_bias,mse"
        back = ExtractedDistribution.load(tmp_path / "e.csv")
        assert np.array_equal(back.matrix, ext.matrix) and back.samples[0].origin == (3, 1)

    def test_kind_invariants(self):
        with pytest.raises(ValueError):
            ExtractedDistribution("posterior", [])
        with pytest.raises(ValueError):
            ExtractedDistribution("prior", [], (np.zeros((1, 1)), np.zeros(1)))

    def test_design_invariants(self):
        with pytest.raises(ValueError):
            ProbeDesign(3, n_points=3)
        with pytest.raises(ValueError):
            ProbeDesign(1, input_low=1, input_high=1)


class TestKDE:
    def test_two_kernels_closed_form(self):
        kde = kde_fit(np.array([-1.0, 1.0]), 0.25)
        h2 = 0.25**2 * 2.0  # sample variance of {-1, 1} is 2
        expected = 2 * 0.5 * math.exp(-0.5 / h2) / math.sqrt(2 * math.pi * h2)
        assert math.exp(kde.log_density(0.0)) == pytest.approx(expected, rel=1e-12)
        assert kde.log_density(0.7) == pytest.approx(kde.log_density(-0.7), rel=1e-14)

    def test_integrates_to_one(self):
        pts = np.random.default_rng(0).normal(1.0, 2.0, 50)
        kde = kde_fit(pts)
        sd = pts.std(ddof=1)
        grid = np.linspace(pts.mean() - 10 * sd, pts.mean() + 10 * sd, 20001)
        assert abs(integrate.trapezoid(np.exp(kde.log_density(grid)), grid) - 1) < 1e-4

    def test_matches_direct_kernel_sum_and_scipy(self, rng):
        pts = rng.normal(size=(40, 3))
        kde = kde_fit(pts)
        x = rng.normal(size=(5, 3))
        np.testing.assert_allclose(kde.log_density(x), gaussian_kde_logpdf(x, pts, kde.covariance), rtol=1e-12)
        np.testing.assert_allclose(kde.log_density(x), gaussian_kde(pts.T, 0.25).logpdf(x.T), rtol=1e-10)

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(6)
        kde = kde_fit(rng.normal(size=(60, 3)) @ rng.normal(size=(3, 3)))
        h = 1e-5
        for _ in range(50):
            x = rng.normal(0, 1.5, 3)
            _, g = kde.logpdf_grad(x)
            fd = np.array([(kde.log_density(x + h * e) - kde.log_density(x - h * e)) / (2 * h) for e in np.eye(3)])
            assert np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-8) < 1e-5

    def test_singular_covariance_jittered(self, caplog):
        pts = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
        kde = kde_fit(pts)
        assert "jitter" in caplog.text and np.isfinite(kde.log_density(np.array([0.5, 0.5])))

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            kde_fit(np.zeros((1, 2)))


class TestMcPosterior:
    def test_seed_determinism(self):
        kde = kde_fit(np.random.default_rng(0).normal(size=(50, 2)))
        kw = dict(chains=1, samples_per_chain=30, adaptation=50, noise_sd=1.0)
        a = mc_posterior_on_extracted_prior(kde, None, seed=4, **kw)
        assert np.array_equal(a, mc_posterior_on_extracted_prior(kde, None, seed=4, **kw))

    def test_kde_conjugate(self):
        rng = np.random.default_rng(7)
        pts = rng.normal(size=(1000, 2))
        kde = kde_fit(pts)
        X = rng.uniform(-2, 2, (10, 1))
        y = 1.5 * X[:, 0] - 0.5 + rng.normal(0, 1.0, 10)
        draws = mc_posterior_on_extracted_prior(kde, (X, y), chains=2, samples_per_chain=1000, adaptation=500,
                                                seed=1, noise_sd=1.0)
        # the KDE of many N(0, I) points is close to N(mean, (1 + h^2) cov)
        m0 = pts.mean(0)
        s0 = np.sqrt(np.diag(np.cov(pts.T)) * (1 + 0.25**2))
        mean, _ = conjugate_posterior(m0, s0, X, y, 1.0)
        assert np.all(np.abs(draws.mean(0) - mean) < 0.1)

    def test_flat_likelihood_reproduces_kde(self):
        kde = kde_fit(np.random.default_rng(8).normal(size=(100, 2)) * [1.0, 0.5] + [2.0, -1.0])
        draws = mc_posterior_on_extracted_prior(kde, None, chains=2, samples_per_chain=1000, adaptation=500,
                                                seed=2, noise_sd=1.0)
        fresh = kde.sample(2000, np.random.default_rng(9))
        assert energy(draws, fresh).statistic < 0.05
