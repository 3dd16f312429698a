"""Named verification suites run by ``fivo verify``.

Each suite returns a list of :class:`Assertion` rows (measured value,
threshold, the claim checked, pass/fail). ``scale`` multiplies replicate
counts; ``normalization_offset`` corrupts the filter's normalization and
exists only as a negative control.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .csmc import overlay_from_filter, run_csmc, verify_unbiasedness_identity
from .diagnostics import (bias_vs_relative_variance, inverse_moment_experiment, scaling_ratios,
                          variance_scaling_in_T)
from .errors import UsageError
from .gradients import (expected_bound_fn, finite_difference_check, gradient_samples, grad_log_phat_reparam,
                        joint_params, log_phat_fn)
from .models import (ConjugateIndependenceModel, ExactPosteriorProposal, LearnedGaussianProposal,
                     LgssmParams, LinearGaussianSSM, PriorProposal)
from .numerics import RngStream
from .objectives import ObjectiveSpec, estimate_bound
from .oracles import conjugate_log_marginal, kalman_log_marginal, sample_posterior
from .smc import ResamplingPolicy, run_particle_filter

SUITES = ("prop1", "prop2", "unbiasedness", "csmc-identity", "gradients", "inverse-moment",
          "variance-scaling")


@dataclass
class Assertion:
    suite: str
    assertion: str
    measured: float
    threshold: float
    claim: str
    passed: bool


def _lgssm_case(rng, T):
    p = LgssmParams()
    m = LinearGaussianSSM(p)
    x, _ = m.sample(T, rng.split("data"), 1)
    return p, m, x[0]


def suite_unbiasedness(rng, scale=1.0, normalization_offset=0.0):
    p, m, x = _lgssm_case(rng, 10)
    log_px = kalman_log_marginal(p, x).log_marginal
    R = max(int(20000 * scale), 100)
    out = []
    for N in (1, 4, 16):
        for pol in (ResamplingPolicy.ess(0.5), ResamplingPolicy.always()):
            rec = run_particle_filter(m, PriorProposal(m), x, N, pol, rng.split(("unb", N, pol.label())),
                                      replicates=R, normalization_offset=normalization_offset)
            r = np.exp(rec.log_phat - log_px)
            z = (r.mean() - 1.0) / (r.std(ddof=1) / np.sqrt(R))
            out.append(Assertion("unbiasedness", f"N={N} {pol.label()}: |mean(p_hat/p) - 1| in SE",
                                 abs(float(z)), 3.0, "the filter estimate is unbiased for p(x)", abs(z) <= 3.0))
    return out


def suite_prop1(rng, scale=1.0, normalization_offset=0.0):
    p, m, x = _lgssm_case(rng, 10)
    log_px = kalman_log_marginal(p, x).log_marginal
    boot = PriorProposal(m)
    R = max(int(2000 * scale), 100)
    out = []
    means = {}
    for name, N in (("elbo", 1), ("iwae", 4), ("iwae", 64), ("fivo", 4), ("fivo", 64)):
        spec = ObjectiveSpec(name, m, boot, N)
        if name == "fivo" and normalization_offset:
            s = run_particle_filter(m, boot, x, N, spec.policy, rng.split(("p1", name, N)), replicates=R,
                                    normalization_offset=normalization_offset).log_phat
            mean, se = float(s.mean()), float(s.std(ddof=1) / np.sqrt(R))
        else:
            est = estimate_bound(spec, x, R, rng.split(("p1", name, N)))
            mean, se = est.mean, est.std_error
        means[(name, N)] = (mean, se)
        z = (mean - log_px) / se
        out.append(Assertion("prop1", f"{name} N={N}: (mean - log p(x)) in SE", float(z), 3.0,
                             "every objective lower-bounds log p(x)", z <= 3.0))
    for name in ("iwae", "fivo"):
        (a, sa), (b, sb) = means[(name, 4)], means[(name, 64)]
        z = (b - a) / np.hypot(sa, sb)
        out.append(Assertion("prop1", f"{name}: gap shrinks from N=4 to N=64 (z)", float(z), 2.0,
                             "the bound tightens as N grows", z > 2.0))
    x5 = x[:5]
    reps = bias_vs_relative_variance(m, boot, x5, [256], max(int(20000 * scale), 1000), rng.split("p1c"))
    r = reps[-1]
    out.append(Assertion("prop1", "iwae N=256: bias / (half relative variance)", r.ratio, 0.25,
                         "bias is half the relative variance for large N", abs(r.ratio - 1.0) <= 0.25))
    return out


def suite_prop2(rng, scale=1.0, normalization_offset=0.0):
    model = ConjugateIndependenceModel()
    x, _ = model.sample(8, rng.split("data"), 1)
    log_px = conjugate_log_marginal(model, x).log_marginal
    q = ExactPosteriorProposal(model)
    out = []
    for N in (1, 4, 16):
        for pol in (ResamplingPolicy.never(), ResamplingPolicy.always(), ResamplingPolicy.ess()):
            lp = run_particle_filter(model, q, x, N, pol, rng.split(("p2", N, pol.label())), replicates=16,
                                     normalization_offset=normalization_offset).log_phat
            rel = float(np.max(np.abs(lp - log_px)) / abs(log_px))
            var = float(lp.var())
            out.append(Assertion("prop2", f"N={N} {pol.label()}: relative error", rel, 1e-8,
                                 "sharp with the exact posterior proposal (zero-variance estimator)",
                                 rel < 1e-8))
            out.append(Assertion("prop2", f"N={N} {pol.label()}: cross-seed variance", var, 1e-16,
                                 "the estimator has zero variance", var < 1e-16))
    return out


def random_identity_instance(gen, k):
    """A tiny random LGSSM instance with a fixed schedule that resamples at ``T``."""
    T = int(gen.integers(1, 4))
    N = int(gen.integers(1, 5))
    p = LgssmParams(a=gen.uniform(-1, 1), transition_var=gen.uniform(0.3, 2), c=gen.uniform(0.5, 2),
                    emission_var=gen.uniform(0.3, 2), initial_var=gen.uniform(0.5, 2))
    m = LinearGaussianSSM(p)
    steps = {int(s) for s in gen.integers(1, T + 1, size=gen.integers(0, T + 1))} | {T}
    theta = gen.normal(0, 0.3, 6)
    theta[4:] = 0.0  # no state-dependent log scale: keeps latents at moderate magnitude
    q = LearnedGaussianProposal(m, theta) if k % 2 else PriorProposal(m)
    return T, N, p, m, q, ResamplingPolicy.schedule(steps)


def suite_csmc_identity(rng, scale=1.0, normalization_offset=0.0, n_instances=100):
    gen = rng.split("instances").generator()
    out = []
    for k in range(n_instances):
        T, N, p, m, q, pol = random_identity_instance(gen, k)
        x, _ = m.sample(T, rng.split(("data", k)), 1)
        log_px = kalman_log_marginal(p, x).log_marginal
        rec = run_particle_filter(m, q, x, N, pol, rng.split(("pf", k)), replicates=2,
                                  normalization_offset=normalization_offset)
        res = verify_unbiasedness_identity(rec, overlay_from_filter(rec, np.array([0, N - 1])), log_px, m)
        y = sample_posterior(p, x, rng.split(("post", k)), 2)
        cs = run_csmc(m, q, x, N, pol, y, rng.split(("csmc", k)), replicates=2)
        res2 = verify_unbiasedness_identity(cs, cs, log_px, m)
        r = float(max(res.max(), res2.max()))
        out.append(Assertion("csmc-identity", f"instance {k} (T={T}, N={N}, {pol.label()}): residual",
                             r, 1e-10, "p(x) f / g equals the filter estimate", r < 1e-10))
    return out


def suite_gradients(rng, scale=1.0, normalization_offset=0.0):
    p = LgssmParams(a=0.8, transition_var=0.7, emission_var=0.5)
    m = LinearGaussianSSM(p)
    x, _ = m.sample(4, rng.split("data"), 1)
    q = LearnedGaussianProposal(m, [0.1, 0.2, 0.1, -0.1, 0.05, 0.02])
    psi = joint_params(m, q)
    out = []
    rec = run_particle_filter(m, q, x, 3, ResamplingPolicy.ess(0.9), rng.split("seed"), replicates=8)
    g = grad_log_phat_reparam(rec, m, q)
    f = log_phat_fn(m, q, rec)
    worst = 0.0
    for k in range(psi.size):
        e = np.zeros_like(psi)
        e[k] = 1e-5
        d = (f(psi + e) - f(psi - e)) / 2e-5
        worst = max(worst, float(np.max(np.abs(d - g.samples[:, k]) / np.maximum(np.abs(d), 1e-8))))
    out.append(Assertion("gradients", "reparam_biased vs per-seed FD: max relative error", worst, 1e-5,
                         "the biased gradient is the exact derivative of log p_hat", worst < 1e-5))
    pol = ResamplingPolicy.schedule([2])
    R = max(int(100000 * scale), 2000)
    full = gradient_samples("reparam_full", m, q, x, 3, pol, rng.split("full"), R)
    fd = finite_difference_check(expected_bound_fn(m, q, x, 3, pol, rng.split("fd"), R), psi, 1e-2,
                                 full.mean, full.std_error, variant="reparam_full")
    for row in fd.rows:
        out.append(Assertion("gradients", f"reparam_full coordinate {row.coordinate}: |z| vs FD of expectation",
                             abs(row.z_score), 3.0, "the full gradient is unbiased under a fixed schedule",
                             abs(row.z_score) <= 3.0))
    return out


def suite_inverse_moment(rng, scale=1.0, normalization_offset=0.0):
    rep = inverse_moment_experiment("lognormal", (1, 2, 4, 8), max(int(10 ** 6 * scale), 1000), rng.split("im"))
    out = []
    m1, s1 = rep.inverse_moments[0], rep.std_errors[0]
    for N, mN, sN in zip(rep.Ns[1:], rep.inverse_moments[1:], rep.std_errors[1:]):
        z = (mN - m1) / np.hypot(sN, s1)
        out.append(Assertion("inverse-moment", f"N={N}: (E[1/p_N] - E[1/p_1]) in SE", float(z), 3.0,
                             "averaging does not increase the inverse moment", z <= 3.0))
    z = (m1 - rep.bound) / s1
    out.append(Assertion("inverse-moment", "E[1/p_1] - lemma bound, in SE", float(z), 3.0,
                         "the CDF condition bounds the inverse moment", z <= 3.0))
    return out


def suite_variance_scaling(rng, scale=1.0, normalization_offset=0.0):
    m = LinearGaussianSSM(LgssmParams())
    rows = variance_scaling_in_T(m, [5, 10, 20, 40], 16, max(int(20000 * scale), 1000), rng.split("vs"))
    Ts, ratios, _ = scaling_ratios(rows)
    out = []
    for (t0, r0), (t1, r1) in zip(zip(Ts, ratios), zip(Ts[1:], ratios[1:])):
        out.append(Assertion("variance-scaling", f"ratio at T={t1} over ratio at T={t0}", r1 / r0, 1.0,
                             "resampling slows the growth of relative variance in T", r1 > r0))
    return out


_RUNNERS = {
    "prop1": suite_prop1,
    "prop2": suite_prop2,
    "unbiasedness": suite_unbiasedness,
    "csmc-identity": suite_csmc_identity,
    "gradients": suite_gradients,
    "inverse-moment": suite_inverse_moment,
    "variance-scaling": suite_variance_scaling,
}


def run_suite(name, seed=0, scale=1.0, normalization_offset=0.0):
    if name not in _RUNNERS:
        raise UsageError(f"unknown suite {name!r}; expected one of {SUITES}")
    return _RUNNERS[name](RngStream(seed).split(("suite", name)), scale, normalization_offset)
