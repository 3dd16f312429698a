import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from fivo.errors import DomainError, UsageError
from fivo.models import (ExactPosteriorProposal, LearnedGaussianProposal, LgssmParams, LinearGaussianSSM,
                         NonlinearToySSM, OptimalFilterProposal, PriorProposal, SmoothingProposalWrapper,
                         log_alpha, optimal_filter_proposal, smoothing_proposal)
from fivo.numerics import RngStream
from fivo.smc import ResamplingPolicy, run_particle_filter


def _moments(log_density, grid):
    """Mean and variance of an unnormalized log density on a uniform 1-D grid."""
    lw = log_density(grid)
    w = np.exp(lw - lw.max())
    w /= w.sum()
    m = np.sum(w * grid)
    return m, np.sum(w * (grid - m) ** 2)


class TestLogAlpha:
    def test_exact_posterior_weights_are_the_predictive(self, conj, conj_data):
        q = ExactPosteriorProposal(conj)
        z = RngStream(1).normal((5, 3))
        out = log_alpha(conj, q, 3, conj_data, z)
        mu = conj.params[0] + conj.params[1] * conj_data[1]
        expect = norm.logpdf(conj_data[2], mu, np.sqrt(conj.prior_var + conj.emission_var))
        np.testing.assert_allclose(out, expect, atol=1e-12)

    def test_bootstrap_weight_is_emission(self, lgssm, lgssm_data):
        z = RngStream(2).normal((4, 2))
        out = log_alpha(lgssm, PriorProposal(lgssm), 2, lgssm_data, z)
        np.testing.assert_allclose(out, norm.logpdf(lgssm_data[1], z[:, 1], 1.0), atol=1e-12)

    def test_matches_direct_density_arithmetic(self):
        m = LinearGaussianSSM(LgssmParams(a=0.9, transition_var=1.0, c=1.0, emission_var=1.0))
        q = LearnedGaussianProposal(m, [0.1, 0.0, 0.3, -0.2, 0.0, 0.0])
        x = np.array([0.4, -1.1])
        z = np.array([0.5, -0.8])
        got = log_alpha(m, q, 2, x, z)
        qm = 0.9 * 0.5 + 0.1 + 0.3 * -1.1
        qs = np.exp(-0.2)
        expect = (norm.logpdf(-0.8, 0.9 * 0.5, 1.0) + norm.logpdf(-1.1, -0.8, 1.0)
                  - norm.logpdf(-0.8, qm, qs))
        assert got == pytest.approx(expect, abs=1e-12)

    def test_step_out_of_range(self, lgssm, lgssm_data):
        with pytest.raises(UsageError):
            log_alpha(lgssm, PriorProposal(lgssm), 0, lgssm_data, np.zeros(0))


class TestOptimalFilter:
    def test_conjugate_update(self):
        p = LgssmParams(a=0.0, transition_var=1.0, c=1.0, emission_var=1.0)
        mean, var = optimal_filter_proposal(p, 0.7, 2.0)
        assert mean == pytest.approx(1.0) and var == pytest.approx(0.5)
        grid = np.linspace(-10, 10, 20001)
        qm, qv = _moments(lambda z: norm.logpdf(z, 0.0, 1.0) + norm.logpdf(2.0, z, 1.0), grid)
        assert mean == pytest.approx(qm, abs=1e-8) and var == pytest.approx(qv, abs=1e-8)

    def test_uninformative_observation_gives_prior(self):
        p = LgssmParams(a=0.6, transition_var=2.0, emission_var=np.inf)
        mean, var = optimal_filter_proposal(p, 1.5, 3.0)
        assert mean == pytest.approx(0.9) and var == pytest.approx(2.0)

    def test_weights_tie_across_particles(self, lgssm, lgssm_data):
        rec = run_particle_filter(lgssm, OptimalFilterProposal(lgssm.lgssm), lgssm_data, 8,
                                  ResamplingPolicy.never(), RngStream(4))
        # at step 1 every particle's weight is the one-step predictive
        assert np.ptp(rec.log_alpha[0]) < 1e-12


class TestSmoothing:
    def test_no_future_equals_optimal_filter(self):
        p = LgssmParams(a=0.8, transition_var=0.5, c=1.3, emission_var=0.4)
        np.testing.assert_allclose(smoothing_proposal(p, 0.3, [1.2]), optimal_filter_proposal(p, 0.3, 1.2))

    def test_independent_future_equals_optimal_filter(self):
        p = LgssmParams(a=0.0, transition_var=0.5, c=1.3, emission_var=0.4)
        np.testing.assert_allclose(smoothing_proposal(p, 0.3, [1.2, -2.0, 0.4]),
                                   optimal_filter_proposal(p, 0.3, 1.2), atol=1e-15)

    def test_matches_two_dimensional_quadrature(self):
        p = LgssmParams(a=0.8, transition_var=0.5, c=1.3, emission_var=0.4)
        z_prev, x1, x2 = 0.3, 1.2, -0.5
        mean, var = smoothing_proposal(p, z_prev, [x1, x2])
        g = np.linspace(-8, 8, 4001)
        h = g[1] - g[0]
        inner = norm.logpdf(g[None, :], p.a * g[:, None], np.sqrt(p.transition_var)) \
            + norm.logpdf(x2, p.c * g[None, :], np.sqrt(p.emission_var))
        m = inner.max()
        future = m + np.log(np.exp(inner - m).sum(axis=1) * h)
        qm, qv = _moments(lambda z: norm.logpdf(z, p.a * z_prev, np.sqrt(p.transition_var))
                          + norm.logpdf(x1, p.c * z, np.sqrt(p.emission_var)) + future, g)
        assert mean == pytest.approx(qm, abs=1e-8) and var == pytest.approx(qv, abs=1e-8)

    def test_wrapper_last_step_is_base_bit_for_bit(self, lgssm, lgssm_data):
        base = OptimalFilterProposal(lgssm.lgssm)
        w = SmoothingProposalWrapper.for_lgssm(base, lgssm.lgssm, lgssm_data)
        zp = np.array([[0.2, -0.4]])
        T = lgssm_data.size
        a, b = w.step(T - 1, lgssm_data, zp), base.step(T - 1, lgssm_data, zp)
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.log_std, b.log_std)


class TestModels:
    def test_param_roundtrip(self):
        m = NonlinearToySSM(LgssmParams(a=2.0, transition_var=0.5, c=1.0, emission_var=0.3))
        assert m.with_params(m.params).lgssm == m.lgssm

    def test_invalid_variance(self):
        with pytest.raises(DomainError):
            LgssmParams(transition_var=0.0)

    def test_sample_shapes(self, lgssm):
        x, z = lgssm.sample(7, RngStream(0), 3)
        assert x.shape == z.shape == (3, 7)

    def test_zero_learned_params_reproduce_bootstrap(self, lgssm, lgssm_data):
        zp = RngStream(1).normal((2, 3))
        a = LearnedGaussianProposal(lgssm).step(2, lgssm_data, zp)
        b = PriorProposal(lgssm).step(2, lgssm_data, zp)
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.log_std, b.log_std)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-1.5, 1.5), st.floats(0.2, 3), st.floats(0.2, 3), st.integers(1, 6))
    def test_log_joint_is_sum_of_steps(self, a, q, r, T):
        m = LinearGaussianSSM(LgssmParams(a=a, transition_var=q, emission_var=r))
        x, z = m.sample(T, RngStream(T), 1)
        expect = norm.logpdf(z[0, 0], 0, 1.0) + sum(norm.logpdf(z[0, t], a * z[0, t - 1], np.sqrt(q))
                                                   for t in range(1, T))
        expect += norm.logpdf(x[0], z[0], np.sqrt(r)).sum()
        assert m.log_joint(x, z[0]) == pytest.approx(expect, abs=1e-10)

    def test_trajectory_log_prob_matches_sampling(self, lgssm, lgssm_data):
        q = LearnedGaussianProposal(lgssm, [0.1, -0.2, 0.3, 0.05, 0.0, -0.1])
        z, lq = q.sample_trajectories(lgssm_data, RngStream(9).normal((5, lgssm_data.size)))
        np.testing.assert_allclose(q.log_prob_trajectory(lgssm_data, z), lq, atol=1e-12)
