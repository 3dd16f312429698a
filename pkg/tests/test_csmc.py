import numpy as np
import pytest
from scipy.stats import ks_2samp, norm

from fivo.csmc import (PosteriorConditionals, extended_log_density_f, extended_log_density_g, lineage,
                       overlay_from_filter, run_csmc, verify_unbiasedness_identity)
from fivo.errors import UsageError
from fivo.models import (ExactPosteriorProposal, LearnedGaussianProposal, LgssmParams, LinearGaussianSSM,
                         NonlinearToySSM, PriorProposal, log_alpha)
from fivo.numerics import RngStream
from fivo.oracles import conjugate_log_marginal, kalman_log_marginal, posterior_conditional, sample_posterior
from fivo.smc import ResamplingPolicy, run_particle_filter


@pytest.fixture
def small():
    p = LgssmParams(a=0.7, transition_var=0.8, c=1.2, emission_var=0.6, initial_var=1.3)
    m = LinearGaussianSSM(p)
    x, _ = m.sample(3, RngStream(31), 1)
    return p, m, x[0]


class TestCsmc:
    def test_single_particle_is_the_conditioned_path(self, small):
        p, m, x = small
        y = sample_posterior(p, x, RngStream(1), 1)[0]
        q = PriorProposal(m)
        cs = run_csmc(m, q, x, 1, ResamplingPolicy.schedule([2, 3]), y, RngStream(2))
        np.testing.assert_array_equal(cs.z[:, 0, 0], y)
        expect = sum(log_alpha(m, q, t, x, y[:t]) for t in (1, 2, 3))
        assert cs.log_phat[0] == pytest.approx(expect, abs=1e-12)

    def test_privileged_slot_invariant(self, small):
        p, m, x = small
        y = sample_posterior(p, x, RngStream(3), 50)
        cs = run_csmc(m, PriorProposal(m), x, 4, ResamplingPolicy.always(), y, RngStream(4), replicates=50)
        rows = np.arange(50)
        for t in range(3):
            np.testing.assert_array_equal(cs.z[t][rows, cs.slots[t]], y[:, t])
            new = cs.slots[t + 1] if t < 2 else cs.final_slot
            np.testing.assert_array_equal(cs.ancestors[t][rows, new], cs.slots[t])
        assert np.all(cs.slots[0] == 0)

    def test_free_particles_match_filter(self, small):
        p, m, x = small
        R, N = 10000, 4
        pol = ResamplingPolicy.always()
        q = PriorProposal(m)
        log_px = kalman_log_marginal(p, x).log_marginal
        y = sample_posterior(p, x, RngStream(5), R)
        cs = run_csmc(m, q, x, N, pol, y, RngStream(6), replicates=R)
        pf = run_particle_filter(m, q, x, N, pol, RngStream(7), replicates=R)
        # before any resampling the free particles are i.i.d. proposals in both systems
        assert ks_2samp(cs.z[0][:, 1:].ravel(), pf.z[0].ravel()).pvalue > 0.01
        # afterwards the conditional system is the filter reweighted by p_hat / p(x)
        w = np.exp(pf.log_phat - log_px)
        h_cs, h_pf = cs.z[-1].mean(axis=1), pf.z[-1].mean(axis=1)
        a, b = h_cs.mean(), np.mean(w * h_pf)
        se = np.hypot(h_cs.std() / np.sqrt(R), np.std(w * h_pf) / np.sqrt(R))
        assert abs(a - b) < 3 * se
        inv = np.exp(log_px - cs.log_phat)
        assert abs(inv.mean() - 1) < 3 * inv.std() / np.sqrt(R)

    def test_schedule_must_end_with_resampling(self, small):
        p, m, x = small
        with pytest.raises(UsageError):
            run_csmc(m, PriorProposal(m), x, 2, ResamplingPolicy.schedule([1]), np.zeros(3), 0)
        with pytest.raises(UsageError):
            run_csmc(m, PriorProposal(m), x, 2, ResamplingPolicy.ess(), np.zeros(3), 0)


class TestExtendedDensities:
    def test_g_single_particle_single_step(self):
        m = LinearGaussianSSM(LgssmParams())
        q = PriorProposal(m)
        rec = run_particle_filter(m, q, [0.4], 1, ResamplingPolicy.always(), RngStream(8))
        z = rec.z[0, 0, 0]
        assert extended_log_density_g(rec)[0] == pytest.approx(norm.logpdf(z, 0, 1), abs=1e-14)

    def test_g_finite_on_filter_runs(self, small):
        p, m, x = small
        rec = run_particle_filter(m, PriorProposal(m), x, 4, ResamplingPolicy.always(), RngStream(9),
                                  replicates=100)
        assert np.all(np.isfinite(extended_log_density_g(rec)))

    def test_g_hand_expansion(self):
        p = LgssmParams(a=0.7, transition_var=0.8, c=1.2, emission_var=0.6, initial_var=1.3)
        m = LinearGaussianSSM(p)
        x = np.array([0.5, -0.3])
        rec = run_particle_filter(m, PriorProposal(m), x, 2, ResamplingPolicy.schedule([1, 2]), RngStream(10))
        z0, z1 = rec.z[0, 0], rec.z[1, 0]
        a0, a1 = rec.ancestors[0, 0], rec.ancestors[1, 0]
        w0 = norm.pdf(x[0], p.c * z0, np.sqrt(p.emission_var))
        w0 /= w0.sum()
        w1 = norm.pdf(x[1], p.c * z1, np.sqrt(p.emission_var))
        w1 /= w1.sum()
        expect = (norm.logpdf(z0, 0, np.sqrt(p.initial_var)).sum() + np.log(w0[a0]).sum()
                  + norm.logpdf(z1, p.a * z0[a0], np.sqrt(p.transition_var)).sum() + np.log(w1[a1]).sum())
        assert extended_log_density_g(rec)[0] == pytest.approx(expect, abs=1e-12)

    def test_f_single_particle_is_posterior_density(self, small):
        p, m, x = small
        y = sample_posterior(p, x, RngStream(11), 1)
        cs = run_csmc(m, PriorProposal(m), x, 1, ResamplingPolicy.schedule([3]), y, RngStream(12))
        post = m.log_joint(x, y[0]) - kalman_log_marginal(p, x).log_marginal
        assert extended_log_density_f(cs, m)[0] == pytest.approx(post, abs=1e-10)

    def test_posterior_conditionals_match_smoother(self, small):
        p, m, x = small
        pc = PosteriorConditionals(m, x)
        for t, zp in ((0, 0.0), (1, 0.4), (2, -1.1)):
            mean, var = pc.mean_var(t, zp)
            m2, v2 = posterior_conditional(p, x, t, zp)
            assert mean == pytest.approx(m2, abs=1e-10) and var == pytest.approx(v2, abs=1e-10)

    def test_no_posterior_for_nonlinear(self):
        with pytest.raises(UsageError):
            PosteriorConditionals(NonlinearToySSM(), [0.1])

    def test_f_needs_slots(self, small):
        p, m, x = small
        rec = run_particle_filter(m, PriorProposal(m), x, 2, ResamplingPolicy.always(), 0)
        with pytest.raises(UsageError):
            extended_log_density_f(rec, m)


class TestIdentity:
    @pytest.mark.parametrize("T, N, steps", [(2, 2, [1, 2]), (3, 3, [2, 3])])
    def test_residual(self, T, N, steps):
        p = LgssmParams(a=0.9, transition_var=0.6, emission_var=0.8)
        m = LinearGaussianSSM(p)
        x, _ = m.sample(T, RngStream(T), 1)
        log_px = kalman_log_marginal(p, x).log_marginal
        q = LearnedGaussianProposal(m, [0.1, -0.1, 0.3, -0.2, 0.0, 0.0])
        pol = ResamplingPolicy.schedule(steps)
        rec = run_particle_filter(m, q, x, N, pol, RngStream(13), replicates=20)
        for k in range(N):
            assert verify_unbiasedness_identity(rec, overlay_from_filter(rec, k), log_px, m).max() < 1e-10
        y = sample_posterior(p, x, RngStream(14), 20)
        cs = run_csmc(m, q, x, N, pol, y, RngStream(15), replicates=20)
        assert verify_unbiasedness_identity(cs, cs, log_px, m).max() < 1e-10

    def test_conjugate_exact_posterior(self, conj, conj_data):
        q = ExactPosteriorProposal(conj)
        log_px = conjugate_log_marginal(conj, conj_data).log_marginal
        rec = run_particle_filter(conj, q, conj_data, 3, ResamplingPolicy.always(), RngStream(16), replicates=5)
        assert verify_unbiasedness_identity(rec, overlay_from_filter(rec, 1), log_px, conj).max() < 1e-10
        np.testing.assert_allclose(rec.log_phat, log_px, atol=1e-12)

    def test_expected_density_ratio_is_one(self, small):
        p, m, x = small
        rec = run_particle_filter(m, PriorProposal(m), x, 3, ResamplingPolicy.schedule([2, 3]), RngStream(17),
                                  replicates=100000)
        w = np.exp(extended_log_density_f(overlay_from_filter(rec, 0), m) - extended_log_density_g(rec))
        # f / g equals p_hat / p(x) on every run, and the filter estimate is unbiased
        assert abs(w.mean() - 1) < 3 * w.std() / np.sqrt(w.size)

    def test_lineage_follows_ancestors(self, small):
        p, m, x = small
        rec = run_particle_filter(m, PriorProposal(m), x, 4, ResamplingPolicy.always(), RngStream(18))
        s = lineage(rec, 2)
        assert s[2, 0] == rec.ancestors[2, 0, 2]
        assert s[1, 0] == rec.ancestors[1, 0, s[2, 0]]
