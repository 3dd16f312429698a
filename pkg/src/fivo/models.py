"""Sequential latent-variable models and proposal families.

Every model here factors as

    p(x_{1:T}, z_{1:T}) = prod_t N(z_t; transition_t) N(x_t; emission_t)

with 1-D latents and observations, and every proposal is a conditional
Gaussian ``q_t(z_t | x, z_{t-1})``. Time indices are 0-based in code.

Observations are passed as 2-D arrays of shape ``(S, T)`` where ``S`` is 1
(one shared sequence) or the replicate batch size; latents have shape
``(B, N)``. Conditionals return :class:`CondGaussian`, which optionally
carries the partial derivatives the gradient estimators need.

Parameter vectors are unconstrained: variances enter as log-variances.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DomainError, UsageError
from .numerics import gaussian_log_pdf, normal_log_pdf


@dataclass
class CondGaussian:
    """A Gaussian over one variable given a conditioning latent.

    ``dmean_dcond``/``dlogstd_dcond`` are derivatives with respect to the
    conditioning latent (``z_{t-1}`` for transitions and proposals, ``z_t``
    for emissions). ``dmean_dpar``/``dlogstd_dpar`` have a trailing parameter
    axis; ``None`` means the distribution does not depend on the trainable
    parameters.
    """

    mean: np.ndarray
    log_std: np.ndarray
    dmean_dcond: object = 0.0
    dlogstd_dcond: object = 0.0
    dmean_dpar: Optional[np.ndarray] = None
    dlogstd_dpar: Optional[np.ndarray] = None

    @property
    def std(self):
        return np.exp(self.log_std)

    @property
    def var(self):
        return np.exp(2.0 * self.log_std)

    def log_prob(self, value):
        return gaussian_log_pdf(value, self.mean, self.log_std)


def as_observations(x) -> np.ndarray:
    """Coerce observations to shape ``(S, T)``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] < 1:
        raise UsageError(f"observations must have shape (T,) or (S, T) with T >= 1, got {x.shape}")
    return x


def obs_at(x: np.ndarray, t: int) -> np.ndarray:
    return x[:, t, None]


def _stack_par(shape, entries, n):
    """Build a ``shape + (n,)`` derivative array from ``{index: value}``."""
    out = np.zeros(tuple(shape) + (n,))
    for k, v in entries.items():
        out[..., k] = v
    return out


def _check_var(name, v):
    if not np.isfinite(v) and v != np.inf:
        raise DomainError(f"{name} must be a positive number, got {v}")
    if v <= 0:
        raise DomainError(f"{name} must be positive, got {v}")


# --------------------------------------------------------------------------
# models


class GaussianSSM:
    """Base class for the Gaussian-conditional state-space models."""

    param_names: tuple = ()

    def __init__(self, params):
        params = np.asarray(params, dtype=float)
        if params.shape != (len(self.param_names),):
            raise UsageError(f"{type(self).__name__} expects {len(self.param_names)} parameters, got {params.shape}")
        self.params = params
        self.params.setflags(write=False)

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    def with_params(self, params):
        return type(self)(params)

    def transition(self, t, x, z_prev, grad=False) -> CondGaussian:
        raise NotImplementedError

    def emission(self, t, x, z, grad=False) -> CondGaussian:
        raise NotImplementedError

    def log_joint_step(self, t, x, z_prev, z):
        """``log p_t(x_t, z_t | x_{1:t-1}, z_{t-1})``."""
        x = as_observations(x)
        lp = self.transition(t, x, z_prev).log_prob(z)
        return lp + self.emission(t, x, z).log_prob(obs_at(x, t))

    def log_joint(self, x, z):
        """``log p(x_{1:T}, z_{1:T})`` for trajectories ``z`` of shape ``(T,)`` or ``(M, T)``."""
        x = as_observations(x)
        z = np.asarray(z, dtype=float)
        flat = z.ndim == 1
        z = np.atleast_2d(z)
        if z.shape[-1] != x.shape[1]:
            raise UsageError(f"trajectory length {z.shape[-1]} does not match T={x.shape[1]}")
        total = np.zeros((z.shape[0], 1))
        zp = np.zeros((z.shape[0], 1))
        for t in range(x.shape[1]):
            zt = z[:, t, None]
            total = total + self.log_joint_step(t, x, zp, zt)
            zp = zt
        return float(total[0, 0]) if flat else total[:, 0]

    def sample(self, T, rng, n=1):
        """Simulate ``n`` sequences; returns ``(x, z)`` each of shape ``(n, T)``."""
        gen = rng.generator()
        x = np.zeros((n, T))
        z = np.zeros((n, T))
        zp = np.zeros((n, 1))
        for t in range(T):
            tr = self.transition(t, x, zp)
            zt = tr.mean + tr.std * gen.standard_normal((n, 1))
            em = self.emission(t, x, zt)
            x[:, t] = (em.mean + em.std * gen.standard_normal((n, 1)))[:, 0]
            z[:, t] = zt[:, 0]
            zp = zt
        return x, z

    def to_dict(self):
        raise NotImplementedError

    def __repr__(self):
        vals = ", ".join(f"{k}={v:.6g}" for k, v in self.to_dict()["params"].items())
        return f"{type(self).__name__}({vals})"


@dataclass(frozen=True)
class LgssmParams:
    """Scalar linear-Gaussian state-space model parameters (variances, not logs)."""

    a: float = 0.9
    transition_var: float = 1.0
    c: float = 1.0
    emission_var: float = 1.0
    initial_var: float = 1.0

    def __post_init__(self):
        _check_var("transition_var", self.transition_var)
        _check_var("emission_var", self.emission_var)
        _check_var("initial_var", self.initial_var)

    def to_vector(self):
        return np.array([self.a, self.c, np.log(self.transition_var),
                         np.log(self.emission_var), np.log(self.initial_var)])

    @classmethod
    def from_vector(cls, theta):
        a, c, lq, lr, l0 = (float(v) for v in theta)
        return cls(a=a, transition_var=float(np.exp(lq)), c=c,
                   emission_var=float(np.exp(lr)), initial_var=float(np.exp(l0)))


class _ScalarSSM(GaussianSSM):
    """Shared machinery for the two models with ``(a, c, log vars)`` parameters."""

    param_names = ("a", "c", "log_transition_var", "log_emission_var", "log_initial_var")

    def __init__(self, params=None):
        if params is None:
            params = LgssmParams()
        if isinstance(params, LgssmParams):
            params = params.to_vector()
        super().__init__(params)
        self.lgssm = LgssmParams.from_vector(self.params)

    def _drift(self, z_prev):
        raise NotImplementedError

    def transition(self, t, x, z_prev, grad=False):
        a, c, lq, lr, l0 = self.params
        z_prev = np.asarray(z_prev, dtype=float)
        if t == 0:
            mean = np.zeros_like(z_prev)
            log_std = np.full_like(z_prev, 0.5 * l0)
            if not grad:
                return CondGaussian(mean, log_std)
            return CondGaussian(mean, log_std, 0.0, 0.0, None,
                                _stack_par(z_prev.shape, {4: 0.5}, 5))
        f, df, dfa = self._drift(z_prev)
        mean = a * f
        log_std = np.full_like(mean, 0.5 * lq)
        if not grad:
            return CondGaussian(mean, log_std)
        return CondGaussian(mean, log_std, a * df, 0.0,
                            _stack_par(mean.shape, {0: dfa}, 5),
                            _stack_par(mean.shape, {2: 0.5}, 5))

    def emission(self, t, x, z, grad=False):
        a, c, lq, lr, l0 = self.params
        z = np.asarray(z, dtype=float)
        mean = c * z
        log_std = np.full_like(mean, 0.5 * lr)
        if not grad:
            return CondGaussian(mean, log_std)
        return CondGaussian(mean, log_std, c, 0.0,
                            _stack_par(mean.shape, {1: z}, 5),
                            _stack_par(mean.shape, {3: 0.5}, 5))

    def to_dict(self):
        p = self.lgssm
        return {"kind": self.kind, "params": {"a": p.a, "transition_var": p.transition_var, "c": p.c,
                                              "emission_var": p.emission_var, "initial_var": p.initial_var}}


class LinearGaussianSSM(_ScalarSSM):
    """``z_t = a z_{t-1} + N(0, q)``, ``x_t = c z_t + N(0, r)``, ``z_1 ~ N(0, q0)``."""

    kind = "lgssm"

    def _drift(self, z_prev):
        return z_prev, 1.0, z_prev


class NonlinearToySSM(_ScalarSSM):
    """``z_t = a tanh(z_{t-1}) + N(0, q)``, ``x_t = c z_t + N(0, r)``."""

    kind = "nonlinear"

    def _drift(self, z_prev):
        th = np.tanh(z_prev)
        return th, 1.0 - th * th, th


class ConjugateIndependenceModel(GaussianSSM):
    """Latents independent of each other given past observations.

    ``z_t ~ N(b + k x_{t-1}, s2)`` (with ``x_0 = 0``) and ``x_t ~ N(z_t, r2)``.
    Because ``(z_t, x_t)`` depends on the past only through ``x_{1:t-1}``,
    ``p(z_{1:t-1} | x_{1:t}) = p(z_{1:t-1} | x_{1:t-1})`` and the filtering
    posterior is a sharp proposal.
    """

    kind = "conjugate"
    param_names = ("b", "k", "log_prior_var", "log_emission_var")

    def __init__(self, params=None, *, b=0.0, k=0.5, prior_var=1.0, emission_var=1.0):
        if params is None:
            _check_var("prior_var", prior_var)
            _check_var("emission_var", emission_var)
            params = [b, k, np.log(prior_var), np.log(emission_var)]
        super().__init__(params)

    @property
    def prior_var(self):
        return float(np.exp(self.params[2]))

    @property
    def emission_var(self):
        return float(np.exp(self.params[3]))

    def prior_mean(self, t, x):
        b, k = self.params[:2]
        x_prev = obs_at(x, t - 1) if t > 0 else np.zeros((x.shape[0], 1))
        return b + k * x_prev, x_prev

    def transition(self, t, x, z_prev, grad=False):
        x = as_observations(x)
        z_prev = np.asarray(z_prev, dtype=float)
        mu, x_prev = self.prior_mean(t, x)
        mean = np.broadcast_to(mu, np.broadcast_shapes(mu.shape, z_prev.shape)).copy()
        log_std = np.full_like(mean, 0.5 * self.params[2])
        if not grad:
            return CondGaussian(mean, log_std)
        return CondGaussian(mean, log_std, 0.0, 0.0,
                            _stack_par(mean.shape, {0: 1.0, 1: np.broadcast_to(x_prev, mean.shape)}, 4),
                            _stack_par(mean.shape, {2: 0.5}, 4))

    def emission(self, t, x, z, grad=False):
        z = np.asarray(z, dtype=float)
        mean = z * 1.0
        log_std = np.full_like(mean, 0.5 * self.params[3])
        if not grad:
            return CondGaussian(mean, log_std)
        return CondGaussian(mean, log_std, 1.0, 0.0, None, _stack_par(mean.shape, {3: 0.5}, 4))

    def to_dict(self):
        b, k = (float(v) for v in self.params[:2])
        return {"kind": self.kind, "params": {"b": b, "k": k, "prior_var": self.prior_var,
                                              "emission_var": self.emission_var}}


# --------------------------------------------------------------------------
# proposals


class GaussianProposal:
    """Base proposal. ``step`` returns q_t with derivatives over ``(theta, phi)``."""

    reparameterized = True
    param_names: tuple = ()

    def __init__(self, params=()):
        self.params = np.asarray(params, dtype=float).reshape(-1)
        self.params.setflags(write=False)

    @property
    def n_params(self) -> int:
        return self.params.size

    def with_params(self, params):
        raise NotImplementedError

    def bind(self, model):
        """Return this proposal tied to ``model`` (identity for fixed proposals)."""
        return self

    def step(self, t, x, z_prev, grad=False) -> CondGaussian:
        raise NotImplementedError

    def log_prob(self, t, x, z_prev, z):
        return self.step(t, as_observations(x), z_prev).log_prob(z)

    def sample_trajectories(self, x, noise):
        """Reparameterized ancestral sampling from ``noise`` of shape ``(M, T)``.

        Returns ``(z, log_q)`` with shapes ``(M, T)`` and ``(M,)``.
        """
        x = as_observations(x)
        noise = np.atleast_2d(np.asarray(noise, dtype=float))
        z = np.zeros_like(noise)
        logq = np.zeros((noise.shape[0], 1))
        zp = np.zeros((noise.shape[0], 1))
        for t in range(x.shape[1]):
            q = self.step(t, x, zp)
            zt = q.mean + q.std * noise[:, t, None]
            logq = logq + q.log_prob(zt)
            z[:, t] = zt[:, 0]
            zp = zt
        return z, logq[:, 0]

    def log_prob_trajectory(self, x, z):
        """``log q(z_{1:T} | x)`` for ``z`` of shape ``(M, T)``."""
        x = as_observations(x)
        z = np.atleast_2d(np.asarray(z, dtype=float))
        total = np.zeros((z.shape[0], 1))
        zp = np.zeros((z.shape[0], 1))
        for t in range(x.shape[1]):
            zt = z[:, t, None]
            total = total + self.step(t, x, zp).log_prob(zt)
            zp = zt
        return total[:, 0]


class PriorProposal(GaussianProposal):
    """Bootstrap proposal: q_t is the model's own transition."""

    kind = "bootstrap"

    def __init__(self, model: GaussianSSM):
        super().__init__(())
        self.model = model

    def with_params(self, params):
        return PriorProposal(self.model)

    def bind(self, model):
        return PriorProposal(model)

    def step(self, t, x, z_prev, grad=False):
        return self.model.transition(t, x, z_prev, grad=grad)

    def to_dict(self):
        return {"kind": self.kind}


class LearnedGaussianProposal(GaussianProposal):
    """Residual proposal around the model transition.

    ``mean = prior_mean + m0 + m1 z_{t-1} + m2 x_t`` and
    ``log_std = prior_log_std + s0 + s1 z_{t-1} + s2 x_t``. All-zero
    parameters reproduce the bootstrap proposal. At the first step the
    previous latent is taken to be 0.
    """

    kind = "learned"
    param_names = ("m0", "m_prev", "m_obs", "s0", "s_prev", "s_obs")

    def __init__(self, model: GaussianSSM, params=None):
        super().__init__(np.zeros(6) if params is None else params)
        if self.params.shape != (6,):
            raise UsageError(f"learned proposal expects 6 parameters, got {self.params.shape}")
        self.model = model

    def with_params(self, params):
        return LearnedGaussianProposal(self.model, params)

    def bind(self, model):
        return LearnedGaussianProposal(model, self.params)

    def step(self, t, x, z_prev, grad=False):
        x = as_observations(x)
        m0, m1, m2, s0, s1, s2 = self.params
        z_prev = np.asarray(z_prev, dtype=float)
        zp = z_prev if t > 0 else np.zeros_like(z_prev)
        xt = obs_at(x, t)
        tr = self.model.transition(t, x, z_prev, grad=grad)
        mean = tr.mean + m0 + m1 * zp + m2 * xt
        log_std = tr.log_std + s0 + s1 * zp + s2 * xt
        if not grad:
            return CondGaussian(mean, log_std)
        shape = np.broadcast_shapes(mean.shape, log_std.shape)
        nt = self.model.n_params
        dm = np.zeros(shape + (nt + 6,))
        ds = np.zeros(shape + (nt + 6,))
        if tr.dmean_dpar is not None:
            dm[..., :nt] = tr.dmean_dpar
        if tr.dlogstd_dpar is not None:
            ds[..., :nt] = tr.dlogstd_dpar
        dm[..., nt + 0] = 1.0
        dm[..., nt + 1] = zp
        dm[..., nt + 2] = xt
        ds[..., nt + 3] = 1.0
        ds[..., nt + 4] = zp
        ds[..., nt + 5] = xt
        first = t == 0
        return CondGaussian(mean, log_std,
                            tr.dmean_dcond + (0.0 if first else m1),
                            tr.dlogstd_dcond + (0.0 if first else s1), dm, ds)

    def to_dict(self):
        return {"kind": self.kind, "params": dict(zip(self.param_names, map(float, self.params)))}


def optimal_filter_proposal(lgssm: LgssmParams, z_prev, x_t, initial=False):
    """Exact ``p(z_t | z_{t-1}, x_t)`` for the scalar LGSSM.

    Returns ``(mean, variance)``. With ``initial=True`` the prior is
    ``N(0, initial_var)`` and ``z_prev`` is ignored. An infinite emission
    variance returns the transition prior unchanged.
    """
    p = lgssm
    prior_mean = 0.0 * np.asarray(z_prev, dtype=float) if initial else p.a * np.asarray(z_prev, dtype=float)
    prior_var = p.initial_var if initial else p.transition_var
    prec = 1.0 / prior_var + p.c ** 2 / p.emission_var
    var = 1.0 / prec
    mean = var * (prior_mean / prior_var + p.c * np.asarray(x_t, dtype=float) / p.emission_var)
    return mean, var


def backward_information(lgssm: LgssmParams, x):
    """Information messages ``p(x_{t+1:T} | z_t) ∝ exp(-lam_t z^2 / 2 + eta_t z)``.

    ``x`` has shape ``(S, T)``; returns ``(lam, eta)`` of that shape with the
    last column zero.
    """
    p = lgssm
    x = as_observations(x)
    S, T = x.shape
    lam = np.zeros((S, T))
    eta = np.zeros((S, T))
    for t in range(T - 2, -1, -1):
        J = p.c ** 2 / p.emission_var + lam[:, t + 1]
        h = p.c * x[:, t + 1] / p.emission_var + eta[:, t + 1]
        denom = 1.0 + p.transition_var * J
        lam[:, t] = p.a ** 2 * J / denom
        eta[:, t] = p.a * h / denom
    return lam, eta


def smoothing_proposal(lgssm: LgssmParams, z_prev, x_future, initial=False):
    """Exact ``p(z_t | z_{t-1}, x_{t:T})`` for the scalar LGSSM.

    ``x_future`` holds the observations from step t to the end. Returns
    ``(mean, variance)``.
    """
    x_future = np.atleast_1d(np.asarray(x_future, dtype=float))
    lam, eta = backward_information(lgssm, x_future)
    m, v = optimal_filter_proposal(lgssm, z_prev, x_future[0], initial=initial)
    prec = 1.0 / v + lam[0, 0]
    return (m / v + eta[0, 0]) / prec, 1.0 / prec


class OptimalFilterProposal(GaussianProposal):
    """Fixed proposal equal to the LGSSM's ``p(z_t | z_{t-1}, x_t)``.

    Built from a parameter snapshot; it does not follow later model updates.
    """

    kind = "optimal_filter"

    def __init__(self, lgssm: LgssmParams):
        super().__init__(())
        self.lgssm = lgssm

    def with_params(self, params):
        return self

    def step(self, t, x, z_prev, grad=False):
        x = as_observations(x)
        z_prev = np.asarray(z_prev, dtype=float)
        mean, var = optimal_filter_proposal(self.lgssm, z_prev, obs_at(x, t), initial=(t == 0))
        mean = np.broadcast_to(mean, np.broadcast_shapes(np.shape(mean), z_prev.shape)).copy()
        log_std = np.full_like(mean, 0.5 * np.log(var))
        dcond = 0.0 if t == 0 else var * self.lgssm.a / self.lgssm.transition_var
        return CondGaussian(mean, log_std, dcond, 0.0)

    def to_dict(self):
        return {"kind": self.kind}


class SmoothingProposalWrapper(GaussianProposal):
    """Multiply a base proposal by fixed Gaussian messages from future data.

    ``q'_t(z) ∝ q_t(z) exp(-lam_t z^2 / 2 + eta_t z)``. The messages are
    constants (no gradient flows through them). Where both messages are zero
    the base proposal is returned unchanged, bit for bit.
    """

    kind = "smoothing"

    def __init__(self, base: GaussianProposal, lam, eta):
        super().__init__(base.params)
        self.base = base
        self.lam = as_observations(lam)
        self.eta = as_observations(eta)
        if self.lam.shape != self.eta.shape:
            raise UsageError("backward statistics must share a shape")
        if np.any(self.lam < 0):
            raise DomainError("backward precision must be nonnegative")

    @classmethod
    def for_lgssm(cls, base, lgssm: LgssmParams, x):
        lam, eta = backward_information(lgssm, x)
        return cls(base, lam, eta)

    @property
    def reparameterized(self):
        return self.base.reparameterized

    def with_params(self, params):
        return SmoothingProposalWrapper(self.base.with_params(params), self.lam, self.eta)

    def bind(self, model):
        return SmoothingProposalWrapper(self.base.bind(model), self.lam, self.eta)

    def step(self, t, x, z_prev, grad=False):
        q = self.base.step(t, x, z_prev, grad=grad)
        lam = self.lam[:, t, None]
        eta = self.eta[:, t, None]
        zero = (lam == 0.0) & (eta == 0.0)
        u = np.exp(-2.0 * q.log_std)
        prec = u + lam
        mean = np.where(zero, q.mean, (q.mean * u + eta) / prec)
        log_std = np.where(zero, q.log_std, -0.5 * np.log(prec))
        if not grad:
            return CondGaussian(mean, log_std)
        dm_dm = u / prec
        dm_dls = (q.mean * lam - eta) / prec ** 2 * (-2.0 * u)
        dls_dls = u / prec
        dmc = dm_dm * q.dmean_dcond + dm_dls * q.dlogstd_dcond
        dsc = dls_dls * q.dlogstd_dcond
        dmp = dsp = None
        if q.dmean_dpar is not None or q.dlogstd_dpar is not None:
            qm = 0.0 if q.dmean_dpar is None else q.dmean_dpar
            qs = 0.0 if q.dlogstd_dpar is None else q.dlogstd_dpar
            dmp = dm_dm[..., None] * qm + dm_dls[..., None] * qs
            dsp = dls_dls[..., None] * qs + 0.0 * dmp
        return CondGaussian(mean, log_std, dmc, dsc, dmp, dsp)

    def to_dict(self):
        return {"kind": self.kind, "base": self.base.to_dict()}


class ExactPosteriorProposal(GaussianProposal):
    """``p(z_t | x_{1:t})`` for the conjugate independence model (fixed snapshot)."""

    kind = "exact_posterior"

    def __init__(self, model: ConjugateIndependenceModel):
        super().__init__(())
        self.model = model

    def with_params(self, params):
        return self

    def step(self, t, x, z_prev, grad=False):
        x = as_observations(x)
        s2, r2 = self.model.prior_var, self.model.emission_var
        mu, _ = self.model.prior_mean(t, x)
        gain = s2 / (s2 + r2)
        mean = mu + gain * (obs_at(x, t) - mu)
        shape = np.broadcast_shapes(mean.shape, np.shape(z_prev))
        mean = np.broadcast_to(mean, shape).copy()
        return CondGaussian(mean, np.full(shape, 0.5 * np.log(s2 * r2 / (s2 + r2))))

    def to_dict(self):
        return {"kind": self.kind}


def log_alpha(model: GaussianSSM, proposal: GaussianProposal, t: int, x, z):
    """Log incremental importance weight at 1-based step ``t``.

    ``z`` is the latent trajectory through step ``t`` (last axis of length
    ``t``). Returns ``log p_t(x_t, z_t | past) - log q_t(z_t | x, z_{t-1})``;
    a latent outside the proposal's support gives ``-inf``.
    """
    x = as_observations(x)
    z = np.asarray(z, dtype=float)
    T = x.shape[1]
    if not 1 <= t <= T:
        raise UsageError(f"step {t} outside [1, {T}]")
    if z.shape[-1] != t:
        raise UsageError(f"trajectory through step {t} must have length {t}, got {z.shape[-1]}")
    k = t - 1
    zt = z[..., k]
    zp = z[..., k - 1] if k > 0 else np.zeros_like(zt)
    lp = model.log_joint_step(k, x, zp, zt)
    lq = proposal.log_prob(k, x, zp, zt)
    with np.errstate(invalid="ignore"):
        out = np.where(np.isneginf(lq) & np.isfinite(lp), -np.inf, lp - lq)
    out = np.squeeze(out)
    return float(out) if out.ndim == 0 else out
