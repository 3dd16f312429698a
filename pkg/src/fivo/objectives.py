"""Monte Carlo objectives: ELBO, IWAE, FIVO, AIS and MIS estimator kernels.

Each kernel returns samples of ``log p̂`` (one per replicate). Their means
are the corresponding lower bounds on ``log p(x)``.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import UsageError
from .models import GaussianProposal, GaussianSSM, as_observations, obs_at
from .numerics import as_stream, log_sum_exp
from .smc import ResamplingPolicy, draw_noise, run_particle_filter

OBJECTIVES = ("elbo", "iwae", "fivo", "ais", "mis")
CHUNK = 2048


def _scalar(v):
    v = np.asarray(v)
    return float(v[0]) if v.size == 1 else v


def iwae_samples(model: GaussianSSM, proposal: GaussianProposal, x, N, rng, replicates=1):
    """``log((1/N) sum_i p(x, z^i) / q(z^i | x))`` for each replicate.

    Consumes the same ``"proposal"`` noise substream as the particle filter,
    so it reproduces a never-resampling filter run exactly.
    """
    if N < 1:
        raise UsageError("N must be >= 1")
    x = as_observations(x)
    if x.shape[0] > 1:
        replicates = x.shape[0]
    T = x.shape[1]
    noise, _ = draw_noise(rng, T, replicates, N)
    B = replicates
    c = np.zeros((B, N))
    z_prev = np.zeros((B, N))
    for t in range(T):
        q = proposal.step(t, x, z_prev)
        z = np.broadcast_to(q.mean, (B, N)) + np.broadcast_to(q.std, (B, N)) * noise[t]
        lq = np.broadcast_to(q.log_prob(z), (B, N))
        lp = model.transition(t, x, z_prev).log_prob(z) + model.emission(t, x, z).log_prob(obs_at(x, t))
        c = c + (np.broadcast_to(lp, (B, N)) - lq)
        z_prev = z
    return np.zeros(B) + (log_sum_exp(c, axis=1) - np.log(N))


def elbo_sample(model, proposal, x, rng, replicates=1):
    """Single-sample ``log p(x, z) - log q(z | x)`` with ``z ~ q``."""
    return _scalar(iwae_samples(model, proposal, x, 1, rng, replicates))


def iwae_estimate(model, proposal, x, N, rng, replicates=1):
    return _scalar(iwae_samples(model, proposal, x, N, rng, replicates))


def fivo_estimate(model, proposal, x, N, policy=None, rng=0, replicates=1, resampler="multinomial"):
    """``log p̂_N(x_{1:T})`` of the particle filter."""
    record = run_particle_filter(model, proposal, x, N, policy or ResamplingPolicy.ess(), rng,
                                 replicates=replicates, resampler=resampler)
    return _scalar(record.log_phat)


# --------------------------------------------------------------------------
# AIS and MIS over whole latent trajectories


@dataclass(frozen=True)
class AisSchedule:
    """Inverse temperatures ``0 = b_1 <= ... <= b_{K+1} = 1`` and an MH kernel.

    The kernel at temperature ``b_i`` is Gaussian random-walk Metropolis
    with ``n_steps`` sweeps targeting ``q^{1-b_i} p^{b_i}``; ``n_steps=0`` is
    the identity (copy) kernel. ``step_size=None`` tunes the random-walk
    scale per coordinate to the geometric mean of prior and proposal spreads.
    """

    betas: tuple
    step_size: Optional[float] = None
    n_steps: int = 1

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=float)
        if b.ndim != 1 or b.size < 2:
            raise UsageError("an AIS schedule needs at least two temperatures")
        if b[0] != 0.0 or b[-1] != 1.0:
            raise UsageError("AIS temperatures must start at 0 and end at 1")
        if np.any(np.diff(b) < 0) or np.any((b < 0) | (b > 1)):
            raise UsageError("AIS temperatures must be nondecreasing within [0, 1]")
        if self.n_steps < 0 or (self.step_size is not None and self.step_size <= 0):
            raise UsageError("invalid MH kernel settings")
        object.__setattr__(self, "betas", tuple(float(v) for v in b))

    @classmethod
    def linear(cls, n_intermediate, step_size=None, n_steps=1):
        return cls(tuple(np.linspace(0.0, 1.0, n_intermediate + 1)), step_size, n_steps)

    @property
    def n_terms(self):
        return len(self.betas) - 1


def _tuned_step(model, proposal, x, rng, n=2000):
    z_q, _ = proposal.sample_trajectories(x, rng.split("tune-q").normal((n, x.shape[1])))
    _, z_p = model.sample(x.shape[1], rng.split("tune-p"), n)
    return np.sqrt(z_q.std(axis=0) * z_p.std(axis=0))


def ais_samples(model: GaussianSSM, proposal: GaussianProposal, x, schedule: AisSchedule, rng,
                replicates=1):
    """``sum_i (b_{i+1} - b_i) log(p(x, z_i) / q(z_i | x))`` along an annealing chain."""
    x = as_observations(x)
    rng = as_stream(rng)
    T = x.shape[1]
    M = replicates
    betas = schedule.betas
    step = schedule.step_size
    if step is None:
        step = _tuned_step(model, proposal, x, rng)
    z, lq = proposal.sample_trajectories(x, rng.split("ais-init").normal((M, T)))
    lp = model.log_joint(x, z)
    total = np.zeros(M)
    accepted = proposed = 0
    for i in range(schedule.n_terms):
        b = betas[i]
        if i > 0:
            mh = rng.split(("ais-mh", i))
            moves = mh.split("move").normal((schedule.n_steps, M, T)) * step
            coins = np.log(mh.split("accept").uniform((schedule.n_steps, M)))
            for s in range(schedule.n_steps):
                cand = z + moves[s]
                lq_c = proposal.log_prob_trajectory(x, cand)
                lp_c = model.log_joint(x, cand)
                log_ratio = (1 - b) * (lq_c - lq) + b * (lp_c - lp)
                ok = coins[s] < log_ratio
                z = np.where(ok[:, None], cand, z)
                lq = np.where(ok, lq_c, lq)
                lp = np.where(ok, lp_c, lp)
                accepted += int(ok.sum())
                proposed += M
        total = total + (betas[i + 1] - b) * (lp - lq)
    if proposed and accepted == 0:
        warnings.warn("AIS Metropolis kernels accepted no moves; estimate reduces to importance sampling",
                      RuntimeWarning, stacklevel=2)
    return total


def ais_estimate(model, proposal, x, schedule, rng, replicates=1):
    return _scalar(ais_samples(model, proposal, x, schedule, rng, replicates))


@dataclass
class MisMixture:
    """Proposals ``q_i`` with mixture weights ``w_i >= 0`` summing to one."""

    components: Sequence[GaussianProposal]
    weights: Sequence[float]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(self.components),) or w.size == 0:
            raise UsageError("need one weight per mixture component")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise UsageError("mixture weights must be nonnegative and sum to 1")
        self.weights = w


def mis_samples(model: GaussianSSM, x, mixture: MisMixture, rng, replicates=1):
    """``log sum_i w_i p(x, z_i) / sum_j w_j q_j(z_i | x)`` with ``z_i ~ q_i``."""
    x = as_observations(x)
    rng = as_stream(rng)
    T = x.shape[1]
    K = len(mixture.components)
    with np.errstate(divide="ignore"):
        log_w = np.log(mixture.weights)
    terms = np.empty((replicates, K))
    for i, qi in enumerate(mixture.components):
        z, _ = qi.sample_trajectories(x, rng.split(("mis", i)).normal((replicates, T)))
        log_den = log_sum_exp(
            np.stack([log_w[j] + qj.log_prob_trajectory(x, z) for j, qj in enumerate(mixture.components)],
                     axis=1), axis=1)
        num = log_w[i] + model.log_joint(x, z)
        with np.errstate(invalid="ignore"):
            terms[:, i] = np.where(np.isneginf(log_den) | np.isneginf(num), -np.inf, num - log_den)
    return log_sum_exp(terms, axis=1)


def mis_estimate(model, x, mixture, rng, replicates=1):
    return _scalar(mis_samples(model, x, mixture, rng, replicates))


# --------------------------------------------------------------------------
# replicated estimation


@dataclass
class ObjectiveSpec:
    """Which estimator to run and on what."""

    objective: str
    model: GaussianSSM
    proposal: GaussianProposal = None
    n_particles: int = 1
    policy: Optional[ResamplingPolicy] = None
    schedule: Optional[AisSchedule] = None
    mixture: Optional[MisMixture] = None
    resampler: str = "multinomial"

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise UsageError(f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}")
        if self.objective == "fivo" and self.policy is None:
            self.policy = ResamplingPolicy.ess()
        if self.objective == "ais" and self.schedule is None:
            raise UsageError("the ais objective needs a schedule")
        if self.objective == "mis" and self.mixture is None:
            raise UsageError("the mis objective needs a mixture")
        if self.objective != "mis" and self.proposal is None:
            raise UsageError(f"the {self.objective} objective needs a proposal")
        if self.objective == "elbo":
            self.n_particles = 1

    def samples(self, x, rng, replicates):
        o = self.objective
        if o == "elbo":
            return iwae_samples(self.model, self.proposal, x, 1, rng, replicates)
        if o == "iwae":
            return iwae_samples(self.model, self.proposal, x, self.n_particles, rng, replicates)
        if o == "fivo":
            rec = run_particle_filter(self.model, self.proposal, x, self.n_particles, self.policy, rng,
                                      replicates=replicates, resampler=self.resampler)
            return rec.log_phat
        if o == "ais":
            return ais_samples(self.model, self.proposal, x, self.schedule, rng, replicates)
        return mis_samples(self.model, x, self.mixture, rng, replicates)

    def policy_label(self):
        if self.objective == "fivo":
            return self.policy.label()
        return "never" if self.objective in ("elbo", "iwae") else "n/a"


@dataclass
class BoundEstimate:
    mean: float
    std_error: float
    replicates: int
    n_particles: int
    objective: str
    policy: str = ""
    samples: np.ndarray = field(default=None, repr=False)


def replicate_samples(fn, replicates, rng, jobs=1, chunk=CHUNK):
    """Evaluate ``fn(stream, count)`` over fixed-size replicate blocks.

    Block ``k`` always uses ``rng.split(("block", k))`` and results are
    concatenated in block order, so the output is independent of ``jobs``.
    """
    rng = as_stream(rng)
    sizes = [min(chunk, replicates - s) for s in range(0, replicates, chunk)]
    tasks = [(rng.split(("block", k)), n) for k, n in enumerate(sizes)]
    if jobs > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(lambda a: fn(*a), tasks))
    else:
        parts = [fn(*a) for a in tasks]
    return np.concatenate(parts)


def summarize(samples, spec_or_name, n_particles=1, policy=""):
    samples = np.asarray(samples, dtype=float)
    if isinstance(spec_or_name, ObjectiveSpec):
        name, n_particles, policy = spec_or_name.objective, spec_or_name.n_particles, spec_or_name.policy_label()
    else:
        name = spec_or_name
    R = samples.size
    se = float(samples.std(ddof=1) / np.sqrt(R)) if R > 1 else float("inf")
    return BoundEstimate(float(samples.mean()), se, R, n_particles, name, policy, samples)


def estimate_bound(spec: ObjectiveSpec, x, replicates, rng=0, jobs=1, chunk=CHUNK,
                   streams=None) -> BoundEstimate:
    """Sample mean and standard error of ``spec``'s estimator over independent replicates.

    By default replicate streams are derived from ``rng``. Explicit
    per-replicate ``streams`` may be given instead; they must be distinct.
    """
    if replicates < 2:
        raise UsageError("estimate_bound needs at least 2 replicates for a standard error")
    x = as_observations(x)
    if x.shape[0] != 1:
        raise UsageError("estimate_bound takes a single sequence")
    if streams is not None:
        streams = [as_stream(s) for s in streams]
        if len(streams) != replicates:
            raise UsageError(f"got {len(streams)} streams for {replicates} replicates")
        if len(set(streams)) != len(streams):
            raise UsageError("replicate streams must be distinct; identical seeds are not independent")
        samples = np.concatenate([spec.samples(x, s, 1) for s in streams])
        return summarize(samples, spec)
    samples = replicate_samples(lambda s, n: spec.samples(x, s, n), replicates, rng, jobs, chunk)
    return summarize(samples, spec)
