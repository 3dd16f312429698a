"""Particle filter with explicit ancestry, replay and tangent propagation.

A run is vectorized over a batch of ``B`` independent replicates of ``N``
particles. All randomness is drawn up front from two substreams of the
caller's :class:`~fivo.numerics.RngStream`: ``"proposal"`` supplies the
standard-normal proposal noise and ``"resample"`` the uniforms that drive
resampling, both of shape ``(T, B, N)``. Uniforms are consumed whether or
not a replicate resamples, so proposal noise and resampling draws are shared
across policies for a given stream.

Weights are carried in log space. Within a resampling block every particle
keeps its slot, so the log-likelihood estimate is accumulated block-wise as
``sum_blocks [logsumexp(sum_k log alpha_k^i) - log N]``; with no resampling
this is exactly the importance-weighted estimator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EnsembleCollapse, UsageError
from .models import as_observations, obs_at
from .numerics import as_stream, gaussian_log_pdf_partials, log_sum_exp

RECORD_FORMAT = "fivo.filter_record"
RECORD_VERSION = 1


@dataclass(frozen=True)
class ResamplingPolicy:
    """When to resample: ``never``, ``always``, ``ess`` or ``schedule``.

    ``ess`` fires iff ESS < threshold * N (strictly). ``schedule`` steps are
    1-based.
    """

    kind: str = "ess"
    threshold: float = 0.5
    steps: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.kind not in ("never", "always", "ess", "schedule"):
            raise UsageError(f"unknown resampling policy {self.kind!r}")
        if self.kind == "ess" and not 0.0 < self.threshold <= 1.0:
            raise UsageError(f"ESS threshold must lie in (0, 1], got {self.threshold}")
        object.__setattr__(self, "steps", frozenset(int(s) for s in self.steps))
        if any(s < 1 for s in self.steps):
            raise UsageError("schedule steps are 1-based")

    @classmethod
    def never(cls):
        return cls("never")

    @classmethod
    def always(cls):
        return cls("always")

    @classmethod
    def ess(cls, threshold=0.5):
        return cls("ess", threshold)

    @classmethod
    def schedule(cls, steps):
        return cls("schedule", steps=frozenset(steps))

    @property
    def is_fixed(self):
        return self.kind != "ess"

    def fixed_flags(self, T):
        if self.kind == "ess":
            raise UsageError("an ESS policy has no fixed schedule")
        if self.kind == "never":
            return np.zeros(T, bool)
        if self.kind == "always":
            return np.ones(T, bool)
        return np.array([t + 1 in self.steps for t in range(T)])

    def label(self):
        if self.kind == "ess":
            return f"ess{self.threshold:g}"
        if self.kind == "schedule":
            return "schedule:" + "+".join(str(s) for s in sorted(self.steps))
        return self.kind

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == "ess":
            d["threshold"] = self.threshold
        if self.kind == "schedule":
            d["steps"] = sorted(self.steps)
        return d

    @classmethod
    def from_dict(cls, d):
        if isinstance(d, str):
            return cls(d)
        return cls(d["kind"], d.get("threshold", 0.5), frozenset(d.get("steps", ())))


def ess(weights, tol=1e-9):
    """Effective sample size ``1 / sum w_i^2`` of normalized weights (last axis)."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or np.any(np.abs(w.sum(axis=-1) - 1.0) > tol):
        raise UsageError("ess expects normalized, nonnegative weights")
    out = 1.0 / np.sum(w * w, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def _ess_from_log(logw):
    return np.exp(-log_sum_exp(2.0 * logw, axis=-1))


def _check_weights(w):
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.size == 0 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise UsageError("weights must be a normalized, nonnegative 1-D array")
    return w


def multinomial_ancestors(weights, uniforms):
    """Inverse-CDF categorical draws, batched over rows.

    ``weights`` is ``(B, N)`` (rows normalized) and ``uniforms`` ``(B, M)``
    in [0, 1). Zero-weight indices are never returned.
    """
    w = np.atleast_2d(weights)
    u = np.atleast_2d(uniforms)
    B, N = w.shape
    cdf = np.cumsum(w, axis=1)
    cdf /= cdf[:, -1:]
    offsets = np.arange(B)[:, None]
    flat = np.searchsorted((cdf + offsets).ravel(), (u + offsets).ravel(), side="right")
    idx = flat.reshape(u.shape) - offsets * N
    last_positive = N - 1 - np.argmax(w[:, ::-1] > 0, axis=1)
    return np.minimum(np.maximum(idx, 0), last_positive[:, None])


def alias_table(weights):
    """Vose alias table ``(prob, alias)`` for a normalized weight vector."""
    w = _check_weights(weights)
    N = w.size
    scaled = w * N
    prob = np.ones(N)
    alias = np.arange(N)
    small = [i for i in range(N) if scaled[i] < 1.0]
    large = [i for i in range(N) if scaled[i] >= 1.0]
    while small and large:
        s, g = small.pop(), large.pop()
        prob[s], alias[s] = scaled[s], g
        scaled[g] -= 1.0 - scaled[s]
        (small if scaled[g] < 1.0 else large).append(g)
    # leftovers are 1 up to rounding; a zero-weight index can never be left over
    # in "small" because its column was filled by a large index above
    for i in small + large:
        prob[i] = 1.0 if w[i] > 0 else 0.0
    return prob, alias


def alias_ancestors(weights, uniforms):
    """Categorical draws with an alias table; one uniform per draw."""
    w = _check_weights(weights)
    prob, alias = alias_table(w)
    u = np.asarray(uniforms, dtype=float) * w.size
    col = np.minimum(u.astype(np.int64), w.size - 1)
    return np.where(u - col < prob[col], col, alias[col])


def resample_multinomial(weights, n, rng):
    """``n`` i.i.d. ancestor indices drawn from ``weights``."""
    w = _check_weights(weights)
    if n < 1:
        raise UsageError("n must be >= 1")
    return multinomial_ancestors(w[None, :], as_stream(rng).uniform((1, n)))[0]


def resample_alias(weights, n, rng):
    """Same distribution as :func:`resample_multinomial`; O(N) setup, O(1) per draw."""
    if n < 1:
        raise UsageError("n must be >= 1")
    return alias_ancestors(weights, as_stream(rng).uniform(n))


@dataclass
class FilterRecord:
    """Everything one batched filter run produced.

    Per-step arrays have a leading time axis of length ``T``; ``B`` is the
    replicate batch. ``log_w`` holds the normalized log weights before any
    resampling at that step, and ``ancestors[t]`` the post-resampling
    ancestor of each slot (the identity where no resampling happened).
    ``log_phat_cum[t]`` is ``log p̂_N(x_{1:t+1})``.
    """

    x: np.ndarray
    n_particles: int
    policy: ResamplingPolicy
    noise: np.ndarray
    uniforms: np.ndarray
    z: np.ndarray
    log_alpha: np.ndarray
    log_q: np.ndarray
    log_w: np.ndarray
    ancestors: np.ndarray
    resampled: np.ndarray
    ess: np.ndarray
    log_phat_inc: np.ndarray
    log_phat_cum: np.ndarray
    resampler: str = "multinomial"
    slots: Optional[np.ndarray] = None
    final_slot: Optional[np.ndarray] = None
    privileged: Optional[np.ndarray] = None

    @property
    def T(self):
        return self.z.shape[0]

    @property
    def replicates(self):
        return self.z.shape[1]

    @property
    def log_phat(self):
        return self.log_phat_cum[-1]

    def z_prev(self, t):
        """Latent each slot extends at step ``t`` (zeros at the first step)."""
        if t == 0:
            return np.zeros_like(self.z[0])
        return np.take_along_axis(self.z[t - 1], self.ancestors[t - 1], axis=1)

    def resampling_times(self, b=0):
        """1-based resampling steps of replicate ``b`` (the k_r, with k_0 = 0 omitted)."""
        return [t + 1 for t in range(self.T) if self.resampled[t, b]]

    def replicate(self, b):
        """A single-replicate view of replicate ``b``."""
        def pick(a):
            return None if a is None else a[:, b:b + 1]
        x = self.x if self.x.shape[0] == 1 else self.x[b:b + 1]
        return FilterRecord(
            x, self.n_particles, self.policy, pick(self.noise), pick(self.uniforms), pick(self.z),
            pick(self.log_alpha), pick(self.log_q), pick(self.log_w), pick(self.ancestors),
            pick(self.resampled), pick(self.ess), pick(self.log_phat_inc), pick(self.log_phat_cum),
            self.resampler, pick(self.slots),
            None if self.final_slot is None else self.final_slot[b:b + 1],
            None if self.privileged is None else self.privileged[b:b + 1])

    _ARRAYS = ("x", "noise", "uniforms", "z", "log_alpha", "log_q", "log_w", "ancestors",
               "resampled", "ess", "log_phat_inc", "log_phat_cum", "slots", "final_slot", "privileged")

    def to_json(self) -> str:
        doc = {"format": RECORD_FORMAT, "version": RECORD_VERSION,
               "n_particles": self.n_particles, "policy": self.policy.to_dict(),
               "resampler": self.resampler}
        for name in self._ARRAYS:
            a = getattr(self, name)
            doc[name] = None if a is None else a.tolist()
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "FilterRecord":
        doc = json.loads(text)
        if doc.get("format") != RECORD_FORMAT:
            raise UsageError("not a filter record document")
        if doc.get("version") != RECORD_VERSION:
            raise UsageError(f"unsupported filter record version {doc.get('version')}")
        ints = {"ancestors", "slots", "final_slot"}
        arrays = {}
        for name in cls._ARRAYS:
            v = doc.get(name)
            if v is None:
                arrays[name] = None
            elif name in ints:
                arrays[name] = np.asarray(v, dtype=np.int64)
            elif name == "resampled":
                arrays[name] = np.asarray(v, dtype=bool)
            else:
                arrays[name] = np.asarray(v, dtype=float)
        return cls(n_particles=doc["n_particles"], policy=ResamplingPolicy.from_dict(doc["policy"]),
                   resampler=doc["resampler"], **arrays)


@dataclass
class TangentTrace:
    """Forward-mode derivative information gathered alongside a filter run.

    ``mode`` is ``"reparam"`` (latents move with the parameters) or
    ``"score"`` (latents held fixed). Parameter axis is ``(theta, phi)``.
    """

    mode: str
    d_log_phat: np.ndarray
    resample_scores: np.ndarray
    proposal_scores: np.ndarray
    n_theta: int


def _pad(d, P):
    if d is None:
        return 0.0
    if d.shape[-1] == P:
        return d
    out = np.zeros(d.shape[:-1] + (P,))
    out[..., :d.shape[-1]] = d
    return out


def _dtotal(dpar, dcond, dprev, P):
    out = _pad(dpar, P)
    if np.any(np.asarray(dcond) != 0):
        out = out + np.asarray(dcond)[..., None] * dprev
    return out


def _sweep(model, proposal, x, N, policy, noise, uniforms, *, forced=None, tangent=None,
           pinned=None, resampler="multinomial", normalization_offset=0.0):
    x = as_observations(x)
    T = x.shape[1]
    if noise.shape[0] != T or noise.shape[2] != N:
        raise UsageError(f"noise shape {noise.shape} does not match T={T}, N={N}")
    B = noise.shape[1]
    if x.shape[0] not in (1, B):
        raise UsageError(f"observations batch {x.shape[0]} incompatible with {B} replicates")
    if tangent is not None and not proposal.reparameterized and tangent == "reparam":
        raise UsageError("reparameterized tangents need a reparameterized proposal")
    log_n = np.log(N) - normalization_offset
    rows = np.arange(B)

    shape = (T, B, N)
    z_all = np.empty(shape)
    log_alpha = np.empty(shape)
    log_q_all = np.empty(shape)
    log_w_all = np.empty(shape)
    anc_all = np.empty(shape, dtype=np.int64)
    flags_all = np.zeros((T, B), bool)
    ess_all = np.empty((T, B))
    inc_all = np.empty((T, B))
    cum_all = np.empty((T, B))
    slots = final_slot = None
    if pinned is not None:
        y, slot, slot_uniforms = pinned
        slots = np.empty((T, B), dtype=np.int64)

    fixed = policy.fixed_flags(T) if policy.is_fixed else None
    identity = np.broadcast_to(np.arange(N), (B, N))

    c = np.zeros((B, N))
    closed = np.zeros(B)
    z_prev = np.zeros((B, N))

    if tangent is not None:
        P = model.n_params + proposal.n_params
        dzp = np.zeros((B, N, P))
        dc = np.zeros((B, N, P))
        dclosed = np.zeros((B, P))
        rs_scores = np.zeros((T, B, P))
        q_scores = np.zeros((T, B, P))
    grad = tangent is not None

    for t in range(T):
        q = proposal.step(t, x, z_prev, grad=grad)
        q_mean = np.broadcast_to(q.mean, (B, N))
        q_std = np.broadcast_to(q.std, (B, N))
        z = q_mean + q_std * noise[t]
        if pinned is not None:
            z[rows, slot] = y[:, t] if y.shape[0] == B else y[0, t]
            slots[t] = slot
        xt = obs_at(x, t)
        tr = model.transition(t, x, z_prev, grad=grad)
        em = model.emission(t, x, z, grad=grad)
        lq = np.broadcast_to(q.log_prob(z), (B, N))
        la = np.broadcast_to(tr.log_prob(z) + em.log_prob(xt), (B, N)) - lq

        log_w_prev = c - log_sum_exp(c, axis=1, keepdims=True)
        inc = log_sum_exp(log_w_prev + la, axis=1)
        c = c + la
        L = log_sum_exp(c, axis=1)
        if np.any(np.isneginf(L)):
            raise EnsembleCollapse(t + 1, int(np.flatnonzero(np.isneginf(L))[0]))
        logw = c - L[:, None]
        cum = closed + (L - log_n)
        ess_t = _ess_from_log(logw)

        if forced is not None:
            flags = forced.resampled[t].copy()
        elif fixed is not None:
            flags = np.full(B, fixed[t])
        else:
            flags = ess_t < policy.threshold * N

        anc = identity.copy()
        if flags.any():
            fr = np.flatnonzero(flags)
            if forced is not None:
                anc[fr] = forced.ancestors[t][fr]
            elif resampler == "alias":
                w = np.exp(logw[fr])
                for k, r in enumerate(fr):
                    anc[r] = alias_ancestors(w[k] / w[k].sum(), uniforms[t, r])
            else:
                anc[fr] = multinomial_ancestors(np.exp(logw[fr]), uniforms[t, fr])
            if pinned is not None:
                new_slot = np.minimum((slot_uniforms[t, fr] * N).astype(np.int64), N - 1)
                anc[fr, new_slot] = slot[fr]
                slot = slot.copy()
                slot[fr] = new_slot
            closed = np.where(flags, cum, closed)
            c = np.where(flags[:, None], 0.0, c)

        if grad:
            dm_q = _dtotal(q.dmean_dpar, q.dmean_dcond, dzp, P)
            ds_q = _dtotal(q.dlogstd_dpar, q.dlogstd_dcond, dzp, P)
            if tangent == "reparam":
                dz = dm_q + ((z - q_mean) / q_std * q_std)[..., None] * ds_q
            else:
                dz = np.zeros((B, N, P))
            gv, gm, gs = gaussian_log_pdf_partials(z, q.mean, q.log_std)
            dlq = gv[..., None] * dz + gm[..., None] * dm_q + gs[..., None] * ds_q
            dm_tr = _dtotal(tr.dmean_dpar, tr.dmean_dcond, dzp, P)
            ds_tr = _dtotal(tr.dlogstd_dpar, tr.dlogstd_dcond, dzp, P)
            gv, gm, gs = gaussian_log_pdf_partials(z, tr.mean, tr.log_std)
            dlp = gv[..., None] * dz + gm[..., None] * dm_tr + gs[..., None] * ds_tr
            dm_em = _dtotal(em.dmean_dpar, em.dmean_dcond, dz, P)
            ds_em = _dtotal(em.dlogstd_dpar, em.dlogstd_dcond, dz, P)
            _, gm, gs = gaussian_log_pdf_partials(xt, em.mean, em.log_std)
            dlp = dlp + gm[..., None] * dm_em + gs[..., None] * ds_em
            dla = np.broadcast_to(dlp - dlq, (B, N, P))
            q_scores[t] = np.sum(np.broadcast_to(dlq, (B, N, P)), axis=1)

            dc = dc + dla
            dL = np.einsum("bn,bnp->bp", np.exp(logw), dc)
            dcum = dclosed + dL
            if flags.any():
                dlogw = dc - dL[:, None, :]
                picked = np.take_along_axis(dlogw, anc[..., None], axis=1)
                rs_scores[t] = np.where(flags[:, None], picked.sum(axis=1), 0.0)
                dclosed = np.where(flags[:, None], dcum, dclosed)
                dc = np.where(flags[:, None, None], 0.0, dc)
            dzp = np.take_along_axis(np.broadcast_to(dz, (B, N, P)), anc[..., None], axis=1)

        z_all[t] = z
        log_alpha[t] = la
        log_q_all[t] = lq
        log_w_all[t] = logw
        anc_all[t] = anc
        flags_all[t] = flags
        ess_all[t] = ess_t
        inc_all[t] = inc
        cum_all[t] = cum
        z_prev = np.take_along_axis(z, anc, axis=1)

    if pinned is not None:
        final_slot = slot
    record = FilterRecord(x, N, policy, noise, uniforms, z_all, log_alpha, log_q_all, log_w_all,
                          anc_all, flags_all, ess_all, inc_all, cum_all, resampler, slots, final_slot,
                          None if pinned is None else np.broadcast_to(pinned[0], (B, T)).copy())
    if tangent is None:
        return record
    trace = TangentTrace(tangent, dcum, rs_scores, q_scores, model.n_params)
    return record, trace


def draw_noise(rng, T, B, N):
    """The proposal noise and resampling uniforms a run with stream ``rng`` uses."""
    rng = as_stream(rng)
    return rng.split("proposal").normal((T, B, N)), rng.split("resample").uniform((T, B, N))


def run_particle_filter(model, proposal, x, N, policy=None, rng=0, *, replicates=1,
                        resampler="multinomial", normalization_offset=0.0) -> FilterRecord:
    """Run the filter on ``replicates`` independent particle systems.

    ``x`` is one sequence ``(T,)`` shared by all replicates, or ``(B, T)``
    with one sequence per replicate. Raises
    :class:`~fivo.errors.EnsembleCollapse` when every incremental weight of
    some replicate is zero. ``normalization_offset`` deliberately corrupts
    the estimator's normalization; it exists only as a negative control for
    the verification suites.
    """
    if N < 1:
        raise UsageError("N must be >= 1")
    if resampler not in ("multinomial", "alias"):
        raise UsageError(f"unknown resampler {resampler!r}")
    x = as_observations(x)
    if x.shape[0] > 1:
        replicates = x.shape[0]
    policy = policy or ResamplingPolicy.ess()
    noise, uniforms = draw_noise(rng, x.shape[1], replicates, N)
    return _sweep(model, proposal, x, N, policy, noise, uniforms, resampler=resampler,
                  normalization_offset=normalization_offset)


def replay(record: FilterRecord, model, proposal, *, tangent=None, force_ancestors=True):
    """Re-run a recorded filter with its recorded noise.

    With ``force_ancestors`` the recorded resampling flags and ancestor
    indices are imposed (so parameters may change without changing the
    ancestry); otherwise resampling is redone from the recorded uniforms.
    """
    return _sweep(model, proposal, record.x, record.n_particles, record.policy, record.noise,
                  record.uniforms, forced=record if force_ancestors else None, tangent=tangent,
                  resampler=record.resampler)


def telescoped_log_phat(record: FilterRecord):
    """``sum_r log((1/N) sum_i prod_{k in block r} alpha_k^i)`` from the recorded weights.

    Blocks end at each resampling step, the last one at ``T``.
    """
    T, B, N = record.log_alpha.shape
    out = np.zeros(B)
    block = np.zeros((B, N))
    for t in range(T):
        block = block + record.log_alpha[t]
        ends = record.resampled[t] | (t == T - 1)
        out = out + np.where(ends, log_sum_exp(block, axis=1) - np.log(N), 0.0)
        block = np.where(ends[:, None], 0.0, block)
    return out
