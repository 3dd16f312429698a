"""Conditional SMC and the extended-space densities behind the unbiasedness identity.

Under a fixed schedule that resamples at ``T``, the filter's joint density
``g`` over all proposals and ancestor draws and the conditional-SMC density
``f`` (one slot per block pinned to a posterior trajectory) satisfy
``p(x) f / g = p̂_N(x)`` on every realization. This module evaluates both
densities on recorded runs so the identity can be checked numerically.

Privileged slots are tracked per step: ``slots[t]`` is the slot holding the
privileged trajectory at step ``t`` before resampling and ``final_slot`` the
slot it occupies after the last resampling.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .errors import UsageError
from .models import (ConjugateIndependenceModel, GaussianSSM, LinearGaussianSSM, as_observations)
from .numerics import as_stream, normal_log_pdf
from .oracles import kalman_smoother
from .smc import FilterRecord, ResamplingPolicy, draw_noise, _sweep

# conditional-SMC runs are filter records with the privileged-slot fields filled in
CsmcRecord = FilterRecord


def _check_schedule(policy: ResamplingPolicy, T):
    if not policy.is_fixed:
        raise UsageError("extended densities are defined for fixed schedules only")
    flags = policy.fixed_flags(T)
    if not flags[-1]:
        raise UsageError("the schedule must resample at the final step")
    return flags


def _check_record(record: FilterRecord, policy):
    policy = policy or record.policy
    flags = _check_schedule(policy, record.T)
    if not np.array_equal(record.resampled, np.broadcast_to(flags[:, None], record.resampled.shape)):
        raise UsageError("record was not produced under the given schedule")
    if record.x.shape[0] != 1:
        raise UsageError("extended densities take records of a single sequence")
    return flags


def run_csmc(model, proposal, x, N, schedule: ResamplingPolicy, y, rng, replicates=1) -> CsmcRecord:
    """Conditional SMC with slot ``j`` pinned to the trajectory ``y``.

    ``y`` has shape ``(T,)`` or ``(replicates, T)``. Free particles are
    proposed and resampled as in the filter; after each resampling the
    privileged slot is redrawn uniformly and inherits the privileged
    ancestor. The first block uses slot 0.
    """
    x = as_observations(x)
    T = x.shape[1]
    _check_schedule(schedule, T)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y.shape[1] != T or y.shape[0] not in (1, replicates):
        raise UsageError(f"privileged trajectory shape {y.shape} does not match T={T}")
    rng = as_stream(rng)
    noise, uniforms = draw_noise(rng, T, replicates, N)
    slot_uniforms = rng.split("privileged-slot").uniform((T, replicates))
    slot = np.zeros(replicates, dtype=np.int64)
    return _sweep(model, proposal, x, N, schedule, noise, uniforms, pinned=(y, slot, slot_uniforms))


def lineage(record: FilterRecord, final_slot):
    """Pre-resampling slots ``(T, B)`` along the ancestry of ``final_slot``."""
    T, B, _ = record.z.shape
    s = np.broadcast_to(np.asarray(final_slot, dtype=np.int64), (B,)).copy()
    rows = np.arange(B)
    slots = np.empty((T, B), dtype=np.int64)
    for t in range(T - 1, -1, -1):
        s = np.where(record.resampled[t], record.ancestors[t][rows, s], s)
        slots[t] = s
    return slots


def overlay_from_filter(record: FilterRecord, final_slot=0) -> CsmcRecord:
    """Designate one surviving lineage of a filter run as the privileged trajectory."""
    slots = lineage(record, final_slot)
    rows = np.arange(record.replicates)
    y = np.stack([record.z[t][rows, slots[t]] for t in range(record.T)], axis=1)
    final = np.broadcast_to(np.asarray(final_slot, dtype=np.int64), (record.replicates,)).copy()
    return replace(record, slots=slots, final_slot=final, privileged=y)


class PosteriorConditionals:
    """``log p(z_t | x_{1:T}, z_{t-1})`` for models with an exact posterior."""

    def __init__(self, model: GaussianSSM, x):
        self.x = as_observations(x)
        if self.x.shape[0] != 1:
            raise UsageError("posterior conditionals take a single sequence")
        if isinstance(model, LinearGaussianSSM):
            ks = kalman_smoother(model.lgssm, self.x)
            ms, Ps, C = ks["smoothed_mean"], ks["smoothed_var"], ks["smoothed_cross"]
            T = ms.size
            self.gain = np.zeros(T)
            self.offset = ms.copy()
            self.var = Ps.copy()
            for t in range(1, T):
                self.gain[t] = C[t] / Ps[t - 1]
                self.offset[t] = ms[t] - self.gain[t] * ms[t - 1]
                self.var[t] = Ps[t] - self.gain[t] * C[t]
        elif isinstance(model, ConjugateIndependenceModel):
            s2, r2 = model.prior_var, model.emission_var
            T = self.x.shape[1]
            self.gain = np.zeros(T)
            self.offset = np.array([model.prior_mean(t, self.x)[0][0, 0] for t in range(T)])
            self.offset = self.offset + s2 / (s2 + r2) * (self.x[0] - self.offset)
            self.var = np.full(T, s2 * r2 / (s2 + r2))
        else:
            raise UsageError(f"no exact posterior available for {type(model).__name__}")

    def mean_var(self, t, z_prev):
        return self.offset[t] + self.gain[t] * np.asarray(z_prev, dtype=float), self.var[t]

    def log_prob(self, t, z_prev, z):
        m, v = self.mean_var(t, z_prev)
        return normal_log_pdf(z, m, v)


def extended_log_density_g(record: FilterRecord, schedule: ResamplingPolicy = None):
    """Log joint density of a filter run's proposals and ancestor draws, per replicate."""
    flags = _check_record(record, schedule)
    out = record.log_q.sum(axis=(0, 2))
    for t in np.flatnonzero(flags):
        out = out + np.take_along_axis(record.log_w[t], record.ancestors[t], axis=1).sum(axis=1)
    return out


def extended_log_density_f(record: CsmcRecord, model, schedule: ResamplingPolicy = None,
                           posterior: PosteriorConditionals = None):
    """Log density of the same variables under conditional SMC, per replicate.

    Free particles contribute their proposal and ancestor terms; the
    privileged slot contributes posterior conditionals and a ``1/N`` factor
    at every resampling step.
    """
    flags = _check_record(record, schedule)
    if record.slots is None or record.final_slot is None:
        raise UsageError("record carries no privileged slots; use run_csmc or overlay_from_filter")
    posterior = posterior or PosteriorConditionals(model, record.x)
    T, B, N = record.z.shape
    rows = np.arange(B)
    out = np.zeros(B)
    for t in range(T):
        j = record.slots[t]
        zp = record.z_prev(t)[rows, j]
        zj = record.z[t][rows, j]
        out = out + record.log_q[t].sum(axis=1) - record.log_q[t][rows, j]
        out = out + posterior.log_prob(t, zp, zj)
        if flags[t]:
            new = record.slots[t + 1] if t + 1 < T else record.final_slot
            if np.any(record.ancestors[t][rows, new] != j):
                raise UsageError(f"privileged slot does not inherit the privileged ancestor at step {t + 1}")
            picked = np.take_along_axis(record.log_w[t], record.ancestors[t], axis=1)
            out = out + picked.sum(axis=1) - picked[rows, new] - np.log(N)
    return out


def verify_unbiasedness_identity(record: FilterRecord, overlay: CsmcRecord, oracle_log_px, model,
                                 schedule: ResamplingPolicy = None):
    """``|log p(x) + log f - log g - log p̂|`` per replicate.

    ``overlay`` is ``record`` with a privileged lineage designated (from
    :func:`overlay_from_filter`) or a conditional-SMC run evaluated as is.
    """
    log_g = extended_log_density_g(record, schedule)
    log_f = extended_log_density_f(overlay, model, schedule)
    return np.abs(oracle_log_px + log_f - log_g - record.log_phat)
