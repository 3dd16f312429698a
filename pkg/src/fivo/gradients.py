"""Gradient estimators for the particle-filter bound, plus a finite-difference harness.

Parameters are handled as one flat vector ``psi = (theta, phi)``: the model's
parameters followed by the proposal's. All estimators work from a
:class:`~fivo.smc.FilterRecord` by replaying its noise and ancestry with
forward-mode tangents, so every returned quantity has one sample per
replicate of the record.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import UnsupportedVariant, UsageError
from .models import as_observations
from .objectives import CHUNK, replicate_samples
from .smc import (FilterRecord, ResamplingPolicy, TangentTrace, _sweep, draw_noise, replay,
                  run_particle_filter)

VARIANTS = ("reparam_biased", "reparam_full", "score_function")


@dataclass
class GradientEstimate:
    """Per-replicate gradient samples ``(R, P)`` and their summaries."""

    samples: np.ndarray
    n_theta: int
    variant: str

    @property
    def mean(self):
        return self.samples.mean(axis=0)

    @property
    def d_theta(self):
        return self.mean[:self.n_theta]

    @property
    def d_phi(self):
        return self.mean[self.n_theta:]

    @property
    def variance(self):
        return self.samples.var(axis=0, ddof=1) if len(self.samples) > 1 else np.zeros(self.samples.shape[1])

    @property
    def std_error(self):
        return np.sqrt(self.variance / len(self.samples))

    @property
    def replicates(self):
        return len(self.samples)


def split_params(model, proposal, psi):
    """Models for a flat ``psi``: ``(model', proposal')`` with the proposal rebound."""
    psi = np.asarray(psi, dtype=float)
    nt = model.n_params
    if psi.shape != (nt + proposal.n_params,):
        raise UsageError(f"expected {nt + proposal.n_params} parameters, got {psi.shape}")
    m = model.with_params(psi[:nt])
    return m, proposal.with_params(psi[nt:]).bind(m)


def joint_params(model, proposal):
    return np.concatenate([model.params, proposal.params])


def _require_reparam(proposal):
    if not proposal.reparameterized:
        raise UnsupportedVariant("reparameterized gradients need a reparameterized proposal")


def _require_fixed(record: FilterRecord, policy):
    policy = policy or record.policy
    if not policy.is_fixed:
        raise UnsupportedVariant(
            "unbiased resampling-gradient terms need a fixed schedule; an adaptive policy would "
            "also need boundary corrections, which are not implemented")
    if not np.array_equal(record.resampled, np.broadcast_to(policy.fixed_flags(record.T)[:, None],
                                                            record.resampled.shape)):
        raise UsageError("record was not produced under the given schedule")


def _trace(record, model, proposal, mode) -> TangentTrace:
    _, trace = replay(record, model, proposal, tangent=mode)
    return trace


def _resampling_term(record, trace):
    cum = record.log_phat_cum
    lead = (cum[-1] - cum)[..., None] * trace.resample_scores
    return lead.sum(axis=0)


def grad_log_phat_reparam(record: FilterRecord, model, proposal) -> GradientEstimate:
    """Gradient of ``log p̂`` with noise and ancestor indices held fixed."""
    _require_reparam(proposal)
    trace = _trace(record, model, proposal, "reparam")
    return GradientEstimate(trace.d_log_phat.copy(), model.n_params, "reparam_biased")


def grad_fivo_full(record: FilterRecord, model, proposal, policy: ResamplingPolicy = None,
                   return_parts=False):
    """Reparameterized gradient plus the resampling score terms.

    Each resampling step ``t`` contributes ``log(p̂_T / p̂_t)`` times the
    score of the drawn ancestor indices. Unbiased for the gradient of the
    expected bound under a fixed schedule.
    """
    _require_reparam(proposal)
    _require_fixed(record, policy)
    trace = _trace(record, model, proposal, "reparam")
    extra = _resampling_term(record, trace)
    est = GradientEstimate(trace.d_log_phat + extra, model.n_params, "reparam_full")
    if return_parts:
        return est, GradientEstimate(trace.d_log_phat.copy(), model.n_params, "reparam_biased")
    return est


class MovingAverageBaseline:
    """Per-step exponential moving averages of the score-term multipliers.

    For proposal terms the multiplier at step ``t`` is ``log(p̂_T / p̂_{t-1})``;
    for resampling terms it is ``log(p̂_T / p̂_t)``. The baseline used on a
    batch is the state before that batch, so it never depends on the
    replicates it is applied to.
    """

    def __init__(self, T, decay=0.9):
        if not 0.0 <= decay < 1.0:
            raise UsageError("decay must lie in [0, 1)")
        self.decay = decay
        self.proposal = np.zeros(T)
        self.resample = np.zeros(T)
        self.initialized = False

    def update(self, proposal_lead, resample_lead):
        pm, rm = proposal_lead.mean(axis=1), resample_lead.mean(axis=1)
        if not self.initialized:
            self.proposal, self.resample, self.initialized = pm, rm, True
        else:
            self.proposal = self.decay * self.proposal + (1 - self.decay) * pm
            self.resample = self.decay * self.resample + (1 - self.decay) * rm


def grad_score_function(record: FilterRecord, model, proposal, policy: ResamplingPolicy = None,
                        baseline: Optional[MovingAverageBaseline] = None) -> GradientEstimate:
    """Estimator that does not differentiate through the latents.

    Sum of the conditional gradient (latents and ancestors fixed), the
    proposal score terms weighted by ``log(p̂_T / p̂_{t-1})`` and the
    resampling score terms weighted by ``log(p̂_T / p̂_t)``.
    """
    _require_fixed(record, policy)
    trace = _trace(record, model, proposal, "score")
    cum = record.log_phat_cum
    before = np.vstack([np.zeros((1, cum.shape[1])), cum[:-1]])
    q_lead = cum[-1] - before
    r_lead = cum[-1] - cum
    q_adj, r_adj = q_lead, r_lead
    if baseline is not None:
        if baseline.initialized:
            q_adj = q_lead - baseline.proposal[:, None]
            r_adj = r_lead - baseline.resample[:, None]
        baseline.update(q_lead, r_lead)
    total = (trace.d_log_phat
             + (q_adj[..., None] * trace.proposal_scores).sum(axis=0)
             + (r_adj[..., None] * trace.resample_scores).sum(axis=0))
    return GradientEstimate(total, model.n_params, "score_function")


def estimate_gradient(variant, record, model, proposal, **kw) -> GradientEstimate:
    if variant == "reparam_biased":
        return grad_log_phat_reparam(record, model, proposal)
    if variant == "reparam_full":
        return grad_fivo_full(record, model, proposal, **kw)
    if variant == "score_function":
        return grad_score_function(record, model, proposal, **kw)
    raise UsageError(f"unknown gradient variant {variant!r}; expected one of {VARIANTS}")


# --------------------------------------------------------------------------
# finite differences


@dataclass
class FdCoordinate:
    coordinate: int
    analytic: float
    fd: float
    analytic_se: float
    fd_se: float

    @property
    def z_score(self):
        se = np.hypot(self.analytic_se, self.fd_se)
        diff = self.analytic - self.fd
        if se == 0:
            return 0.0 if diff == 0 else float("inf")
        return float(diff / se)

    @property
    def relative_error(self):
        scale = max(abs(self.analytic), abs(self.fd))
        return 0.0 if scale == 0 else abs(self.analytic - self.fd) / scale


@dataclass
class FdReport:
    variant: str
    step: float
    rows: list = field(default_factory=list)

    def max_abs_z(self):
        return max(abs(r.z_score) for r in self.rows)

    def max_relative_error(self):
        return max(r.relative_error for r in self.rows)

    def csv_rows(self):
        return [(r.coordinate, r.analytic, r.fd, r.z_score, self.variant) for r in self.rows]


def finite_difference_check(objective: Callable, params, step, analytic=None, analytic_se=None,
                            coordinates=None, variant="") -> FdReport:
    """Central differences of ``objective(params)`` per coordinate.

    ``objective`` maps a parameter vector to a scalar or to per-replicate
    samples; it must use common random numbers across calls so the
    difference is taken replicate by replicate. The FD standard error comes
    from the spread of those per-replicate differences.
    """
    if step <= 0:
        raise UsageError("finite-difference step must be positive")
    params = np.asarray(params, dtype=float)
    coords = range(params.size) if coordinates is None else coordinates
    analytic = np.zeros(params.size) if analytic is None else np.asarray(analytic, dtype=float)
    analytic_se = np.zeros(params.size) if analytic_se is None else np.asarray(analytic_se, dtype=float)
    report = FdReport(variant, step)
    for k in coords:
        e = np.zeros_like(params)
        e[k] = step
        d = (np.asarray(objective(params + e), dtype=float)
             - np.asarray(objective(params - e), dtype=float)) / (2.0 * step)
        d = np.atleast_1d(d)
        se = float(d.std(ddof=1) / np.sqrt(d.size)) if d.size > 1 else 0.0
        report.rows.append(FdCoordinate(k, float(analytic[k]), float(d.mean()), float(analytic_se[k]), se))
    return report


def log_phat_fn(model, proposal, record: FilterRecord, force_ancestors=True):
    """``psi -> log p̂`` per replicate, replaying ``record``'s noise (and ancestry)."""
    def f(psi):
        m, q = split_params(model, proposal, psi)
        return replay(record, m, q, force_ancestors=force_ancestors).log_phat
    return f


def expected_bound_fn(model, proposal, x, N, policy, rng, replicates, chunk=CHUNK):
    """``psi -> log p̂`` samples with fixed noise and uniforms but fresh ancestry.

    Resampling is redone at each parameter value from the same uniforms,
    so the mean is a common-random-number estimate of the expected bound.
    """
    x = as_observations(x)

    def f(psi):
        m, q = split_params(model, proposal, psi)
        return replicate_samples(
            lambda s, n: _sweep(m, q, x, N, policy, *draw_noise(s, x.shape[1], n, N)).log_phat,
            replicates, rng, chunk=chunk)
    return f


def gradient_samples(variant, model, proposal, x, N, policy, rng, replicates, chunk=CHUNK,
                     with_biased=False):
    """Run fresh filters in replicate blocks and collect per-replicate gradients.

    With ``with_biased`` the reparameterized (biased) samples of the same
    runs are returned too, as ``(estimate, biased)``.
    """
    x = as_observations(x)
    parts, biased = [], []

    def block(s, n):
        rec = run_particle_filter(model, proposal, x, N, policy, s, replicates=n)
        if with_biased and variant == "reparam_full":
            full, b = grad_fivo_full(rec, model, proposal, return_parts=True)
            biased.append(b.samples)
            return full.samples
        if with_biased:
            biased.append(grad_log_phat_reparam(rec, model, proposal).samples)
        return estimate_gradient(variant, rec, model, proposal).samples

    # blocks run sequentially, so the biased parts line up with the main ones
    out = GradientEstimate(replicate_samples(block, replicates, rng, jobs=1, chunk=chunk),
                           model.n_params, variant)
    if with_biased:
        return out, GradientEstimate(np.concatenate(biased), model.n_params, "reparam_biased")
    return out
