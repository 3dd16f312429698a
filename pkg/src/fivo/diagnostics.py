"""Quantitative experiments on the bounds: bias against relative variance, the
inverse-moment lemma, variance growth in sequence length, KL(q || prior) and
cross-evaluation of trained models.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, stats

from .errors import UsageError
from .models import (ConjugateIndependenceModel, GaussianProposal, GaussianSSM, LinearGaussianSSM,
                     as_observations)
from .numerics import as_stream, gaussian_kl, log_sum_exp
from .objectives import ObjectiveSpec, replicate_samples
from .oracles import iwae_relative_variance, oracle_log_marginal
from .smc import ResamplingPolicy, run_particle_filter


def relative_variance(log_phat, log_px):
    """``Var(p̂ / p(x))`` and its standard error, computed from ``log p̂ - log p(x)``."""
    r = np.exp(np.asarray(log_phat, dtype=float) - log_px)
    R = r.size
    if R < 2:
        raise UsageError("need at least 2 samples")
    dev2 = (r - r.mean()) ** 2
    var = float(dev2.sum() / (R - 1))
    se = float(dev2.std(ddof=1) / np.sqrt(R))
    return var, se


def _require_oracle(model):
    if not isinstance(model, (LinearGaussianSSM, ConjugateIndependenceModel)):
        raise UsageError(f"no exact oracle for {type(model).__name__}; refusing the bias study")


@dataclass
class BiasVarianceReport:
    N: int
    bias: float
    bias_se: float
    rel_var: float
    rel_var_se: float
    half_rel_var: float
    half_rel_var_se: float
    sixth_central_moment_proxy: float
    replicates: int

    @property
    def ratio(self):
        return self.bias / self.half_rel_var if self.half_rel_var > 0 else float("nan")


def bias_vs_relative_variance(model, proposal, x, Ns: Sequence[int], replicates, rng,
                              objective="iwae", policy=None, jobs=1):
    """Per ``N``: bias ``log p(x) - mean log p̂``, ``Var(p̂/p)``, and a sixth-moment proxy."""
    _require_oracle(model)
    x = as_observations(x)
    log_px = oracle_log_marginal(model, x).log_marginal
    rng = as_stream(rng)
    reports = []
    for N in Ns:
        spec = ObjectiveSpec(objective, model, proposal, N, policy)
        s = replicate_samples(lambda st, n: spec.samples(x, st, n), replicates, rng.split(("N", N)), jobs)
        R = s.size
        bias = float(log_px - s.mean())
        bias_se = float(s.std(ddof=1) / np.sqrt(R))
        rv, rv_se = relative_variance(s, log_px)
        g6 = float(np.mean((np.exp(s - log_px) - 1.0) ** 6))
        reports.append(BiasVarianceReport(N, bias, bias_se, rv, rv_se, rv / 2, rv_se / 2, g6, R))
    return reports


# --------------------------------------------------------------------------
# inverse moments of averages of i.i.d. weights


@dataclass
class InverseMomentReport:
    distribution: str
    M: float
    C: float
    eps: float
    Ns: list
    inverse_moments: list
    std_errors: list
    bound: float

    def monotone(self, k=3.0):
        """``E[p̂_N^-1] <= E[p̂_1^-1]`` at the ``k``-SE level for every ``N``."""
        m1, s1 = self.inverse_moments[0], self.std_errors[0]
        return all(m <= m1 + k * np.hypot(s, s1) for m, s in zip(self.inverse_moments[1:], self.std_errors[1:]))

    def nonincreasing(self, k=3.0):
        pairs = zip(zip(self.inverse_moments, self.std_errors), zip(self.inverse_moments[1:], self.std_errors[1:]))
        return all(b <= a + k * np.hypot(sa, sb) for (a, sa), (b, sb) in pairs)

    def within_bound(self, k=3.0):
        return all(m <= self.bound + k * s for m, s in zip(self.inverse_moments, self.std_errors))


def _fit_constants(cdf, M, eps):
    """Smallest ``C`` with ``cdf(u) <= C u^(1+eps)`` on ``(0, M)``, by bounded search in log u."""
    def log_ratio(lu):
        return np.log(np.maximum(cdf(np.exp(lu)), 1e-300)) - (1 + eps) * lu

    def neg_log_ratio(lu):
        return -float(log_ratio(lu))
    grid = np.linspace(np.log(M) - 60.0, np.log(M), 4001)
    vals = log_ratio(grid)
    k = int(np.argmax(vals))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    res = optimize.minimize_scalar(neg_log_ratio, bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-12})
    best = max(vals[k], -res.fun, -neg_log_ratio(np.log(M)))
    # small safety margin against the grid search missing the supremum
    return float(np.exp(best) * (1 + 1e-6))


def lemma_bound(C, M, eps):
    return C * M ** eps / eps + 1.0 / M


def inverse_moment_experiment(distribution, Ns=(1, 2, 4, 8), replicates=10 ** 6, rng=0, *,
                              sigma=1.0, shape=2.0, value=1.0, M=None, eps=None):
    """Empirical ``E[p̂_N^-1]`` for ``p̂_N`` the mean of ``N`` i.i.d. positive weights.

    ``distribution`` is ``"lognormal"`` (``exp(N(0, sigma^2))``), ``"gamma"``
    (unit scale, ``shape``) or ``"point_mass"`` (at ``value``). The lemma's
    constants are fitted numerically from the CDF; with ``M``/``eps`` unset
    they are chosen to minimize the bound.
    """
    rng = as_stream(rng)
    if distribution == "lognormal":
        def cdf(u):
            return stats.norm.cdf(np.log(u) / sigma)

        def draw(s, shape_):
            return np.exp(sigma * s.normal(shape_))
    elif distribution == "gamma":
        if shape <= 1.0:
            raise UsageError(
                f"gamma weights with shape {shape} <= 1 put mass ~u^{shape} near zero, so no "
                "C u^(1+eps) bound on the CDF exists; the lemma does not apply")
        def cdf(u):
            return stats.gamma.cdf(u, shape)

        def draw(s, shape_):
            return s.generator().gamma(shape, size=shape_)
    elif distribution == "point_mass":
        if value <= 0:
            raise UsageError("point-mass weight must be positive")

        def cdf(u):
            return np.where(np.asarray(u) <= value, 0.0, 1.0)

        def draw(s, shape_):
            return np.full(shape_, float(value))
    else:
        raise UsageError(f"cannot verify the CDF condition for {distribution!r}; "
                         "supported: lognormal, gamma, point_mass")

    if distribution == "point_mass":
        # the CDF vanishes on [0, value), so any C > 0 works with M = value
        M_, eps_, C_ = float(value), 1.0 if eps is None else float(eps), 1e-300
    elif M is not None and eps is not None:
        M_, eps_ = float(M), float(eps)
        C_ = _fit_constants(cdf, M_, eps_)
    else:
        def objective(v):
            m, e = np.exp(v)
            return lemma_bound(_fit_constants(cdf, m, e), m, e)
        res = optimize.minimize(objective, x0=np.log([1.0, 1.0]), method="Nelder-Mead",
                                options={"xatol": 1e-4, "fatol": 1e-8})
        M_, eps_ = (float(v) for v in np.exp(res.x))
        C_ = _fit_constants(cdf, M_, eps_)

    means, ses = [], []
    for N in Ns:
        w = draw(rng.split(("inverse-moment", N)), (replicates, N))
        inv = 1.0 / w.mean(axis=1)
        means.append(float(inv.mean()))
        ses.append(float(inv.std(ddof=1) / np.sqrt(replicates)))
    return InverseMomentReport(distribution, M_, C_, eps_, list(Ns), means, ses, lemma_bound(C_, M_, eps_))


# --------------------------------------------------------------------------
# relative variance against sequence length


@dataclass
class ScalingRow:
    T: int
    estimator: str
    rel_var: float
    rel_var_se: float
    log_rel_var: float


def variance_scaling_in_T(model: LinearGaussianSSM, Ts, N, replicates, rng, proposal_factory=None,
                          threshold=0.5, jobs=1):
    """Relative variance of the filter (ESS policy) and IWAE estimators at each ``T``.

    Data is one sequence of length ``max(Ts)`` simulated from ``model``;
    each ``T`` uses its prefix. ``proposal_factory(model)`` defaults to the
    bootstrap proposal, in which case rows for the exact IWAE relative
    variance (``"iwae_exact"``) are added: the IWAE weights are so
    heavy-tailed at moderate ``T`` that their sample variance is badly
    biased low.
    """
    from .models import PriorProposal
    if not isinstance(model, LinearGaussianSSM):
        raise UsageError("variance scaling needs the linear Gaussian model for its oracle")
    rng = as_stream(rng)
    factory = proposal_factory or PriorProposal
    proposal = factory(model)
    xs, _ = model.sample(max(Ts), rng.split("data"), 1)
    rows = []
    for T in Ts:
        x = xs[:, :T]
        log_px = oracle_log_marginal(model, x).log_marginal
        for name, pol in (("fivo", ResamplingPolicy.ess(threshold)), ("iwae", ResamplingPolicy.never())):
            spec = ObjectiveSpec("fivo", model, proposal, N, pol)
            # both estimators use the same block streams, so they share proposal noise
            s = replicate_samples(lambda st, n: spec.samples(x, st, n), replicates, rng.split(("T", T)), jobs)
            rv, se = relative_variance(s, log_px)
            rows.append(ScalingRow(T, name, rv, se, float(np.log(rv)) if rv > 0 else float("-inf")))
        if factory is PriorProposal:
            rv = iwae_relative_variance(model.lgssm, x, N)
            rows.append(ScalingRow(T, "iwae_exact", rv, 0.0, float(np.log(rv))))
    return rows


def scaling_ratios(rows, numerator="iwae_exact", denominator="fivo"):
    """``rel_var(numerator) / rel_var(denominator)`` per ``T``, in ``T`` order."""
    by = {(r.T, r.estimator): r for r in rows}
    Ts = sorted({r.T for r in rows})
    ratios, ses = [], []
    for T in Ts:
        a, b = by[(T, numerator)], by[(T, denominator)]
        q = a.rel_var / b.rel_var
        ratios.append(q)
        # delta method on the ratio of two independent estimates
        ses.append(q * np.hypot(a.rel_var_se / a.rel_var, b.rel_var_se / b.rel_var))
    return Ts, ratios, ses


# --------------------------------------------------------------------------
# KL(q || prior)


def kl_q_prior(proposal, model, x, rng=0, n_samples=256):
    """``KL(q(z_{1:T} | x) || p(z_{1:T}))`` summed over steps, averaged over sequences.

    Per step the Gaussian KL is exact given the previous latent; the
    previous latents are sampled from ``q``.
    """
    if not isinstance(proposal, GaussianProposal) or not isinstance(model, GaussianSSM):
        raise UsageError("KL tracking needs Gaussian proposal and model families")
    x = as_observations(x)
    S, T = x.shape
    rng = as_stream(rng)
    eps = rng.split("kl").normal((T, S, n_samples))
    zp = np.zeros((S, n_samples))
    total = np.zeros((S, n_samples))
    for t in range(T):
        q = proposal.step(t, x, zp)
        pr = model.transition(t, x, zp)
        total = total + gaussian_kl(q.mean, q.var, pr.mean, pr.var)
        zp = q.mean + q.std * eps[t]
    return float(total.mean(axis=1).mean())


# --------------------------------------------------------------------------
# dataset bounds and cross-evaluation


@dataclass
class DatasetBound:
    objective: str
    n_particles: int
    mean: float
    std_error: float
    per_sequence: np.ndarray = field(repr=False, default=None)


def dataset_bound(objective, model, proposal, xs, N, replicates, rng, policy=None):
    """Average over sequences of the per-sequence bound estimate.

    All sequences and replicates run in one batch; the SE combines the
    per-sequence replicate spread.
    """
    xs = as_observations(xs)
    S, T = xs.shape
    if objective == "elbo":
        N, pol = 1, ResamplingPolicy.never()
    elif objective == "iwae":
        pol = ResamplingPolicy.never()
    elif objective == "fivo":
        pol = policy or ResamplingPolicy.ess()
    else:
        raise UsageError(f"dataset bounds support elbo, iwae and fivo, not {objective!r}")
    batch = np.repeat(xs, replicates, axis=0)
    lp = run_particle_filter(model, proposal, batch, N, pol, rng).log_phat.reshape(S, replicates)
    per = lp.mean(axis=1)
    se = np.sqrt(np.sum(lp.var(axis=1, ddof=1) / replicates)) / S if replicates > 1 else float("inf")
    return DatasetBound(objective, N, float(per.mean()), float(se), per)


@dataclass
class CrossEvalRow:
    trained_with: str
    elbo: float
    elbo_se: float
    iwae: float
    iwae_se: float
    fivo: float
    fivo_se: float
    reported: float
    reported_se: float
    reported_bound: str


def bound_cross_evaluation(trained, xs, rng=0, N=128, replicates=8, policy=None):
    """Evaluate ELBO, IWAE_N and FIVO_N on every trained ``(model, proposal)``.

    ``trained`` maps a training objective name to ``(model, proposal)``.
    The reported value is ``FIVO_N`` for filter-trained models and the
    largest of the three bounds otherwise.
    """
    rng = as_stream(rng)
    rows = []
    for name, (model, proposal) in trained.items():
        vals = {}
        for obj in ("elbo", "iwae", "fivo"):
            # ELBO gets N times the replicates, matching the particle budget
            reps = replicates * N if obj == "elbo" else replicates
            vals[obj] = dataset_bound(obj, model, proposal, xs, N, reps, rng.split(("eval", obj)), policy)
        if name == "fivo":
            pick = "fivo"
        else:
            pick = max(vals, key=lambda k: vals[k].mean)
        rows.append(CrossEvalRow(name, vals["elbo"].mean, vals["elbo"].std_error, vals["iwae"].mean,
                                 vals["iwae"].std_error, vals["fivo"].mean, vals["fivo"].std_error,
                                 vals[pick].mean, vals[pick].std_error, pick))
    return rows


def rows_to_csv(rows) -> str:
    """Dataclass rows to CSV text with a header row."""
    rows = list(rows)
    if not rows:
        return ""
    buf = io.StringIO()
    fields = list(asdict(rows[0]).keys())
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(r).items()})
    return buf.getvalue()
