import math

import numpy as np
import pytest

from fivo.errors import UsageError
from fivo.models import ConjugateIndependenceModel, LgssmParams, LinearGaussianSSM, NonlinearToySSM
from fivo.numerics import RngStream
from fivo.objectives import iwae_samples
from fivo.models import PriorProposal
from fivo.oracles import (Grid, conjugate_log_marginal, conjugate_posterior_sample, iwae_relative_variance,
                          kalman_log_marginal, kalman_smoother, lgssm_grids, oracle_log_marginal,
                          quadrature_log_marginal, sample_posterior)


class TestKalman:
    def test_one_step_marginal(self):
        p = LgssmParams(a=0.0, c=1.0, initial_var=1.0, emission_var=1.0)
        assert kalman_log_marginal(p, [0.0]).log_marginal == pytest.approx(-0.5 * math.log(4 * math.pi))

    def test_two_steps_match_quadrature(self):
        p = LgssmParams(a=0.7, transition_var=0.8, c=1.2, emission_var=0.6, initial_var=1.5)
        x = np.array([0.9, -0.4])
        quad = quadrature_log_marginal(LinearGaussianSSM(p), x, lgssm_grids(p, x, n=401))
        assert kalman_log_marginal(p, x).log_marginal == pytest.approx(quad.log_marginal, abs=1e-6)

    def test_reflection_invariance(self, lgssm, lgssm_data):
        a = kalman_log_marginal(lgssm, lgssm_data).log_marginal
        assert kalman_log_marginal(lgssm, -lgssm_data).log_marginal == pytest.approx(a, abs=1e-12)

    def test_smoother_last_step_equals_filter(self, lgssm, lgssm_data):
        ks = kalman_smoother(lgssm, lgssm_data)
        assert ks["smoothed_mean"][-1] == ks["filtered_mean"][-1]

    def test_ffbs_moments_match_smoother(self, lgssm, lgssm_data):
        z = sample_posterior(lgssm, lgssm_data, RngStream(3), 200000)
        ks = kalman_smoother(lgssm, lgssm_data)
        se = np.sqrt(ks["smoothed_var"] / z.shape[0])
        assert np.all(np.abs(z.mean(axis=0) - ks["smoothed_mean"]) < 4 * se)
        np.testing.assert_allclose(z.var(axis=0), ks["smoothed_var"], rtol=0.02)

    def test_rejects_batches(self, lgssm):
        with pytest.raises(UsageError):
            kalman_log_marginal(lgssm, np.zeros((2, 3)))


class TestConjugate:
    def test_trivial_case(self):
        m = ConjugateIndependenceModel(b=0.0, k=0.0, prior_var=1.0, emission_var=1.0)
        expect = 2 * (-0.5 * math.log(2 * math.pi * 2))
        assert conjugate_log_marginal(m, [0.0, 0.0]).log_marginal == pytest.approx(expect)

    def test_single_step_is_kalman(self):
        m = ConjugateIndependenceModel(b=0.0, k=0.4, prior_var=1.3, emission_var=0.6)
        p = LgssmParams(a=0.0, c=1.0, initial_var=1.3, emission_var=0.6)
        assert conjugate_log_marginal(m, [0.8]).log_marginal == pytest.approx(
            kalman_log_marginal(p, [0.8]).log_marginal, abs=1e-14)

    def test_translation_invariance(self):
        # with k = 0 the latent mean is b at every step, so shifting b shifts everything
        b, d = 0.2, 1.7
        x = np.array([0.3, -1.0, 2.2])
        a = conjugate_log_marginal(ConjugateIndependenceModel(b=b, k=0.0), x).log_marginal
        shifted = ConjugateIndependenceModel(b=b + d, k=0.0)
        assert conjugate_log_marginal(shifted, x + d).log_marginal == pytest.approx(a, abs=1e-12)

    def test_matches_quadrature(self, conj, conj_data):
        x = conj_data[:3]
        quad = quadrature_log_marginal(conj, x, Grid(-12, 12, 1201))
        assert conjugate_log_marginal(conj, x).log_marginal == pytest.approx(quad.log_marginal, abs=1e-8)

    def test_posterior_sample_moments(self, conj, conj_data):
        z = conjugate_posterior_sample(conj, conj_data, RngStream(2), 100000)
        v = conj.prior_var * conj.emission_var / (conj.prior_var + conj.emission_var)
        np.testing.assert_allclose(z.var(axis=0), v, rtol=0.03)


class TestQuadrature:
    def test_nonlinear_converges_under_refinement(self):
        m = NonlinearToySSM(LgssmParams(a=2.0, transition_var=0.5, c=1.0, emission_var=0.3))
        res = quadrature_log_marginal(m, [0.7], Grid(-10, 10, 801))
        assert res.error_bound < 1e-8

    def test_half_line_on_symmetric_model(self):
        p = LgssmParams(a=0.0, c=1.0, emission_var=1.0, initial_var=1.0)
        full = kalman_log_marginal(p, [0.0]).log_marginal
        half = quadrature_log_marginal(LinearGaussianSSM(p), [0.0], Grid(0.0, 12.0, 1201))
        assert half.log_marginal == pytest.approx(full - math.log(2), abs=1e-8)

    def test_refuses_long_sequences(self, lgssm):
        with pytest.raises(UsageError):
            quadrature_log_marginal(lgssm, np.zeros(6), Grid(-5, 5))

    def test_dispatch(self, lgssm, lgssm_data, conj, conj_data):
        assert oracle_log_marginal(lgssm, lgssm_data).method == "kalman"
        assert oracle_log_marginal(conj, conj_data).method == "conjugate"


def test_exact_iwae_relative_variance_matches_monte_carlo(lgssm):
    x, _ = lgssm.sample(2, RngStream(8), 1)
    N = 4
    exact = iwae_relative_variance(lgssm, x, N)
    s = iwae_samples(lgssm, PriorProposal(lgssm), x, N, RngStream(9), 400000)
    r = np.exp(s - kalman_log_marginal(lgssm, x).log_marginal)
    assert r.var() == pytest.approx(exact, rel=0.05)
