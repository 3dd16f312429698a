import numpy as np
import pytest

from fivo.errors import UsageError
from fivo.models import (ConjugateIndependenceModel, ExactPosteriorProposal, LearnedGaussianProposal,
                         LgssmParams, LinearGaussianSSM, OptimalFilterProposal, PriorProposal,
                         SmoothingProposalWrapper)
from fivo.numerics import RngStream
from fivo.objectives import (AisSchedule, MisMixture, ObjectiveSpec, ais_samples, elbo_sample, estimate_bound,
                             fivo_estimate, iwae_estimate, iwae_samples, mis_samples)
from fivo.oracles import Grid, conjugate_log_marginal, kalman_log_marginal, quadrature_log_marginal
from fivo.smc import ResamplingPolicy


def exact_posterior(lgssm, x):
    return SmoothingProposalWrapper.for_lgssm(OptimalFilterProposal(lgssm.lgssm), lgssm.lgssm, x)


def _z(samples, target):
    return (samples.mean() - target) / (samples.std(ddof=1) / np.sqrt(samples.size))


@pytest.fixture
def one_step():
    """A single-observation target whose evidence is checked by quadrature."""
    m = LinearGaussianSSM(LgssmParams(a=0.0, c=1.5, emission_var=0.5, initial_var=1.0))
    x = np.array([1.1])
    return m, x, quadrature_log_marginal(m, x, Grid(-10, 10, 2001)).log_marginal


class TestElbo:
    def test_exact_posterior_is_sharp(self, lgssm, lgssm_data):
        s = iwae_samples(lgssm, exact_posterior(lgssm, lgssm_data), lgssm_data, 1, RngStream(0), 50)
        np.testing.assert_allclose(s, kalman_log_marginal(lgssm, lgssm_data).log_marginal, atol=1e-10)

    def test_lower_bound(self, lgssm, lgssm_data):
        s = iwae_samples(lgssm, PriorProposal(lgssm), lgssm_data, 1, RngStream(1), 100000)
        assert _z(s, kalman_log_marginal(lgssm, lgssm_data).log_marginal) <= 3

    def test_deterministic(self, lgssm, lgssm_data):
        q = PriorProposal(lgssm)
        assert elbo_sample(lgssm, q, lgssm_data, RngStream(2)) == elbo_sample(lgssm, q, lgssm_data, RngStream(2))


class TestIwae:
    def test_single_particle_is_elbo(self, lgssm, lgssm_data):
        q = PriorProposal(lgssm)
        assert iwae_estimate(lgssm, q, lgssm_data, 1, RngStream(3)) == elbo_sample(lgssm, q, lgssm_data,
                                                                                   RngStream(3))

    def test_nondecreasing_in_n(self, lgssm, lgssm_data):
        q = PriorProposal(lgssm)
        ests = [estimate_bound(ObjectiveSpec("iwae", lgssm, q, N), lgssm_data, 4000, RngStream(N))
                for N in (1, 4, 16, 64)]
        for a, b in zip(ests, ests[1:]):
            assert b.mean >= a.mean - 2 * np.hypot(a.std_error, b.std_error)


class TestFivo:
    def test_never_policy_is_iwae(self, lgssm, lgssm_data):
        q = PriorProposal(lgssm)
        assert fivo_estimate(lgssm, q, lgssm_data, 8, ResamplingPolicy.never(), RngStream(4)) == \
            iwae_estimate(lgssm, q, lgssm_data, 8, RngStream(4))

    def test_tighter_than_iwae_on_long_sequences(self, lgssm):
        x, _ = lgssm.sample(50, RngStream(5), 1)
        q = PriorProposal(lgssm)
        f = estimate_bound(ObjectiveSpec("fivo", lgssm, q, 16), x, 1000, RngStream(6))
        i = estimate_bound(ObjectiveSpec("iwae", lgssm, q, 16), x, 1000, RngStream(7))
        assert f.mean > i.mean
        assert f.mean <= kalman_log_marginal(lgssm, x).log_marginal + 3 * f.std_error

    def test_exact_posterior_is_sharp(self, conj, conj_data):
        s = fivo_estimate(conj, ExactPosteriorProposal(conj), conj_data, 4, ResamplingPolicy.ess(), 0,
                          replicates=10)
        np.testing.assert_allclose(s, conjugate_log_marginal(conj, conj_data).log_marginal, atol=1e-12)
        assert np.var(s) < 1e-16


class TestAis:
    def test_schedule_validation(self):
        with pytest.raises(UsageError):
            AisSchedule((0.2, 1.0))
        with pytest.raises(UsageError):
            AisSchedule((0.0, 0.7, 0.5, 1.0))
        assert AisSchedule.linear(4).n_terms == 4

    def test_single_ratio_is_elbo_in_distribution(self, lgssm, lgssm_data):
        q = PriorProposal(lgssm)
        a = ais_samples(lgssm, q, lgssm_data, AisSchedule((0.0, 1.0)), RngStream(8), 40000)
        e = iwae_samples(lgssm, q, lgssm_data, 1, RngStream(9), 40000)
        se = np.hypot(a.std(ddof=1), e.std(ddof=1)) / np.sqrt(a.size)
        assert abs(a.mean() - e.mean()) < 3 * se
        assert a.std() == pytest.approx(e.std(), rel=0.05)

    def test_exact_posterior_identity_kernel_is_sharp(self, lgssm, lgssm_data):
        s = ais_samples(lgssm, exact_posterior(lgssm, lgssm_data), lgssm_data,
                        AisSchedule.linear(5, n_steps=0), RngStream(10), 20)
        np.testing.assert_allclose(s, kalman_log_marginal(lgssm, lgssm_data).log_marginal, atol=1e-10)

    def test_unbiased_on_one_dimensional_target(self, one_step):
        m, x, log_px = one_step
        s = ais_samples(m, PriorProposal(m), x, AisSchedule.linear(5), RngStream(11), 100000)
        assert abs(_z(np.exp(s - log_px), 1.0)) <= 3

    def test_zero_acceptance_warns(self, lgssm, lgssm_data):
        with pytest.warns(RuntimeWarning):
            ais_samples(lgssm, PriorProposal(lgssm), lgssm_data, AisSchedule.linear(3, step_size=1e6),
                        RngStream(12), 50)


class TestMis:
    def test_weights_validated(self, lgssm):
        with pytest.raises(UsageError):
            MisMixture([PriorProposal(lgssm)] * 2, [0.5, 0.6])

    def test_identical_components_match_iwae(self, lgssm, lgssm_data):
        q = PriorProposal(lgssm)
        a = mis_samples(lgssm, lgssm_data, MisMixture([q] * 4, [0.25] * 4), RngStream(13), 20000)
        b = iwae_samples(lgssm, q, lgssm_data, 4, RngStream(14), 20000)
        assert abs(a.mean() - b.mean()) < 3 * np.hypot(a.std(ddof=1), b.std(ddof=1)) / np.sqrt(a.size)

    def test_exact_component_with_unit_weight_is_sharp(self, lgssm, lgssm_data):
        mix = MisMixture([exact_posterior(lgssm, lgssm_data), PriorProposal(lgssm)], [1.0, 0.0])
        s = mis_samples(lgssm, lgssm_data, mix, RngStream(15), 20)
        np.testing.assert_allclose(s, kalman_log_marginal(lgssm, lgssm_data).log_marginal, atol=1e-10)

    def test_unbiased_on_one_dimensional_target(self, one_step):
        m, x, log_px = one_step
        mix = MisMixture([PriorProposal(m), LearnedGaussianProposal(m, [0.8, 0, 0, -0.5, 0, 0])], [0.5, 0.5])
        s = mis_samples(m, x, mix, RngStream(16), 100000)
        assert abs(_z(np.exp(s - log_px), 1.0)) <= 3


class TestEstimateBound:
    def test_bound_holds(self, lgssm, lgssm_data):
        est = estimate_bound(ObjectiveSpec("fivo", lgssm, PriorProposal(lgssm), 4), lgssm_data, 1000, 0)
        assert est.mean <= kalman_log_marginal(lgssm, lgssm_data).log_marginal + 3 * est.std_error
        assert est.replicates == 1000 and est.policy == "ess0.5"

    def test_identical_streams_rejected(self, lgssm, lgssm_data):
        spec = ObjectiveSpec("iwae", lgssm, PriorProposal(lgssm), 4)
        with pytest.raises(UsageError):
            estimate_bound(spec, lgssm_data, 2, streams=[RngStream(3), RngStream(3)])
        with pytest.raises(UsageError):
            estimate_bound(spec, lgssm_data, 1)

    def test_standard_error_scaling(self, lgssm, lgssm_data):
        spec = ObjectiveSpec("iwae", lgssm, PriorProposal(lgssm), 4)
        small = estimate_bound(spec, lgssm_data, 5000, RngStream(17))
        large = estimate_bound(spec, lgssm_data, 20000, RngStream(18))
        assert small.std_error / large.std_error == pytest.approx(2.0, rel=0.2)

    def test_independent_of_jobs(self, lgssm, lgssm_data):
        spec = ObjectiveSpec("fivo", lgssm, PriorProposal(lgssm), 4)
        a = estimate_bound(spec, lgssm_data, 700, RngStream(19), jobs=1, chunk=100)
        b = estimate_bound(spec, lgssm_data, 700, RngStream(19), jobs=3, chunk=100)
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_spec_validation(self, lgssm):
        with pytest.raises(UsageError):
            ObjectiveSpec("vimco", lgssm, PriorProposal(lgssm))
        with pytest.raises(UsageError):
            ObjectiveSpec("ais", lgssm, PriorProposal(lgssm))
        assert ObjectiveSpec("elbo", lgssm, PriorProposal(lgssm), 8).n_particles == 1
