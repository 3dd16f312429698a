"""Exact and brute-force reference computations for the scalar models."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import UsageError
from .models import (ConjugateIndependenceModel, GaussianSSM, LgssmParams, LinearGaussianSSM,
                     as_observations)
from .numerics import log_sum_exp, normal_log_pdf


@dataclass(frozen=True)
class OracleResult:
    log_marginal: float
    method: str
    error_bound: float = 0.0


def _as_params(lgssm) -> LgssmParams:
    if isinstance(lgssm, LgssmParams):
        return lgssm
    if isinstance(lgssm, LinearGaussianSSM):
        return lgssm.lgssm
    raise UsageError(f"expected LgssmParams or LinearGaussianSSM, got {type(lgssm).__name__}")


def _single_sequence(x):
    x = as_observations(x)
    if x.shape[0] != 1:
        raise UsageError("oracles take a single sequence")
    return x[0]


def kalman_filter(lgssm, x):
    """Forward Kalman pass.

    Returns a dict with filtered means/variances, one-step predicted
    means/variances and the log marginal likelihood.
    """
    p = _as_params(lgssm)
    x = _single_sequence(x)
    T = x.size
    mf, Pf, mp, Pp = (np.zeros(T) for _ in range(4))
    ll = 0.0
    m, P = 0.0, p.initial_var
    for t in range(T):
        if t > 0:
            m, P = p.a * m, p.a ** 2 * P + p.transition_var
        mp[t], Pp[t] = m, P
        S = p.c ** 2 * P + p.emission_var
        ll += float(normal_log_pdf(x[t], p.c * m, S))
        K = P * p.c / S
        m, P = m + K * (x[t] - p.c * m), (1.0 - K * p.c) * P
        mf[t], Pf[t] = m, P
    return {"filtered_mean": mf, "filtered_var": Pf, "predicted_mean": mp,
            "predicted_var": Pp, "log_marginal": ll}


def kalman_log_marginal(lgssm, x) -> OracleResult:
    """Exact ``log p(x_{1:T})`` by the prediction-error decomposition."""
    return OracleResult(kalman_filter(lgssm, x)["log_marginal"], "kalman", 0.0)


def kalman_smoother(lgssm, x):
    """Rauch-Tung-Striebel smoother.

    Adds smoothed means/variances and the lag-one smoothed covariances
    ``Cov(z_{t-1}, z_t | x)`` (entry 0 unused) to the filter output.
    """
    p = _as_params(lgssm)
    kf = kalman_filter(p, x)
    mf, Pf, Pp = kf["filtered_mean"], kf["filtered_var"], kf["predicted_var"]
    T = mf.size
    ms, Ps, cross = mf.copy(), Pf.copy(), np.zeros(T)
    for t in range(T - 2, -1, -1):
        J = Pf[t] * p.a / Pp[t + 1]
        ms[t] = mf[t] + J * (ms[t + 1] - p.a * mf[t])
        Ps[t] = Pf[t] + J ** 2 * (Ps[t + 1] - Pp[t + 1])
        cross[t + 1] = J * Ps[t + 1]
    kf.update(smoothed_mean=ms, smoothed_var=Ps, smoothed_cross=cross)
    return kf


def posterior_conditional(lgssm, x, t, z_prev):
    """``p(z_t | z_{t-1}, x_{1:T})`` from the smoothed pairwise marginals.

    ``t`` is 0-based; at ``t=0`` the smoothed marginal is returned.
    Returns ``(mean, variance)``.
    """
    ks = kalman_smoother(lgssm, x)
    ms, Ps, C = ks["smoothed_mean"], ks["smoothed_var"], ks["smoothed_cross"]
    if t == 0:
        return ms[0] + 0.0 * np.asarray(z_prev, dtype=float), Ps[0]
    gain = C[t] / Ps[t - 1]
    return ms[t] + gain * (np.asarray(z_prev, dtype=float) - ms[t - 1]), Ps[t] - gain * C[t]


def sample_posterior(lgssm, x, rng, n=1):
    """Forward-filter backward-sample ``n`` trajectories from ``p(z_{1:T} | x_{1:T})``."""
    p = _as_params(lgssm)
    kf = kalman_filter(p, x)
    mf, Pf = kf["filtered_mean"], kf["filtered_var"]
    T = mf.size
    eps = rng.normal((n, T))
    z = np.zeros((n, T))
    z[:, T - 1] = mf[T - 1] + np.sqrt(Pf[T - 1]) * eps[:, T - 1]
    for t in range(T - 2, -1, -1):
        Pp = p.a ** 2 * Pf[t] + p.transition_var
        J = Pf[t] * p.a / Pp
        mean = mf[t] + J * (z[:, t + 1] - p.a * mf[t])
        var = Pf[t] - J * p.a * Pf[t]
        z[:, t] = mean + np.sqrt(var) * eps[:, t]
    return z


def conjugate_log_marginal(model: ConjugateIndependenceModel, x) -> OracleResult:
    """Exact ``sum_t log N(x_t; mu_t, s2 + r2)``."""
    xs = as_observations(x)
    _single_sequence(xs)
    total = 0.0
    for t in range(xs.shape[1]):
        mu, _ = model.prior_mean(t, xs)
        total += float(normal_log_pdf(xs[0, t], mu[0, 0], model.prior_var + model.emission_var))
    return OracleResult(total, "conjugate", 0.0)


def conjugate_posterior_sample(model: ConjugateIndependenceModel, x, rng, n=1):
    """Exact posterior draws: the latents are independent given ``x``."""
    xs = as_observations(x)
    T = xs.shape[1]
    s2, r2 = model.prior_var, model.emission_var
    eps = rng.normal((n, T))
    z = np.zeros((n, T))
    for t in range(T):
        mu, _ = model.prior_mean(t, xs)
        z[:, t] = mu[0, 0] + s2 / (s2 + r2) * (xs[0, t] - mu[0, 0]) + np.sqrt(s2 * r2 / (s2 + r2)) * eps[:, t]
    return z


@dataclass(frozen=True)
class Grid:
    """A uniform 1-D grid ``[lo, hi]`` with ``n`` points (trapezoid rule)."""

    lo: float
    hi: float
    n: int = 401

    def __post_init__(self):
        if not self.hi > self.lo or self.n < 2:
            raise UsageError(f"invalid grid {self}")

    def points(self):
        return np.linspace(self.lo, self.hi, self.n)

    def log_weights(self):
        h = (self.hi - self.lo) / (self.n - 1)
        w = np.full(self.n, h)
        w[0] = w[-1] = 0.5 * h
        return np.log(w)

    def refined(self):
        return Grid(self.lo, self.hi, 2 * self.n - 1)


GridSpec = Union[Grid, Sequence[Grid]]


def _grid_log_marginal(model: GaussianSSM, x, grids):
    T = x.shape[1]
    log_msg = None
    z_prev = None
    for t in range(T):
        g = grids[t]
        z = g.points()[None, :]
        lw = g.log_weights()
        log_em = model.emission(t, x, z).log_prob(x[0, t])[0]
        if t == 0:
            log_tr = model.transition(0, x, z).log_prob(z)[0]
            log_msg = log_tr + log_em
        else:
            tr = model.transition(t, x, z_prev[:, None])
            log_k = tr.log_prob(z)
            log_msg = log_sum_exp((log_msg + lw_prev)[:, None] + log_k, axis=0) + log_em
        z_prev, lw_prev = z[0], lw
    return float(log_sum_exp(log_msg + lw_prev))


def quadrature_log_marginal(model: GaussianSSM, x, grid: GridSpec, max_steps=4) -> OracleResult:
    """``log ∫ p(x, z) dz`` on a tensor grid by the trapezoid rule.

    The tensor-grid sum is evaluated step by step (the integrand is a product
    of Markov factors), which gives the same number as the full tensor sum.
    ``error_bound`` is the change under one step-halving refinement; the
    refined value is returned.
    """
    x = as_observations(x)
    _single_sequence(x)
    T = x.shape[1]
    if T > max_steps:
        raise UsageError(f"quadrature oracle refuses T={T} > {max_steps}")
    grids = [grid] * T if isinstance(grid, Grid) else list(grid)
    if len(grids) != T:
        raise UsageError(f"need one grid per step ({T}), got {len(grids)}")
    coarse = _grid_log_marginal(model, x, grids)
    fine = _grid_log_marginal(model, x, [g.refined() for g in grids])
    return OracleResult(fine, "quadrature", abs(fine - coarse))


def lgssm_grids(lgssm, x, width=8.0, n=401):
    """Per-step grids spanning ``±width`` smoothed standard deviations."""
    ks = kalman_smoother(lgssm, x)
    return [Grid(m - width * np.sqrt(v), m + width * np.sqrt(v), n)
            for m, v in zip(ks["smoothed_mean"], ks["smoothed_var"])]


def oracle_log_marginal(model: GaussianSSM, x, grid: GridSpec = None) -> OracleResult:
    """Dispatch to the exact oracle for ``model``; quadrature otherwise."""
    if isinstance(model, LinearGaussianSSM):
        return kalman_log_marginal(model.lgssm, x)
    if isinstance(model, ConjugateIndependenceModel):
        return conjugate_log_marginal(model, x)
    if grid is None:
        grid = Grid(-12.0, 12.0, 801)
    return quadrature_log_marginal(model, x, grid)


def iwae_relative_variance(lgssm, x, N) -> float:
    """Exact ``Var(p̂_N / p(x))`` for IWAE with the bootstrap proposal on the LGSSM.

    The weights are ``p(x | z)`` with ``z`` from the prior, and
    ``N(x; cz, r)^2 = (4 pi r)^(-1/2) N(x; cz, r/2)``, so the second moment
    is a Kalman marginal of the same model with half the emission variance.
    """
    p = _as_params(lgssm)
    xs = _single_sequence(x)
    T = xs.size
    half = LgssmParams(p.a, p.transition_var, p.c, p.emission_var / 2.0, p.initial_var)
    log_m2 = -0.5 * T * np.log(4.0 * np.pi * p.emission_var) + kalman_log_marginal(half, xs).log_marginal
    log_p = kalman_log_marginal(p, xs).log_marginal
    return float(np.expm1(log_m2 - 2.0 * log_p) / N)
