"""Stochastic gradient ascent on ELBO, IWAE or FIVO with Adam and early stopping."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .diagnostics import dataset_bound, kl_q_prior
from .errors import DegenerateEnsemble, TrainingDiverged, UsageError
from .gradients import VARIANTS, estimate_gradient, joint_params, split_params
from .models import as_observations
from .numerics import as_stream
from .smc import ResamplingPolicy, run_particle_filter

LR_GRID = (3e-4, 1e-4, 3e-5, 1e-5)


@dataclass(frozen=True)
class TrainConfig:
    """Training settings.

    For ``elbo`` the filter runs with one particle; ``n_particles`` is then
    only the budget to match, and with ``matched_compute`` the batch is
    ``batch_size * n_particles`` sequences.
    """

    objective: str = "fivo"
    n_particles: int = 4
    policy: ResamplingPolicy = field(default_factory=ResamplingPolicy.ess)
    gradient: str = "reparam_biased"
    learning_rate: float = 1e-3
    batch_size: int = 4
    max_steps: int = 1000
    eval_every: int = 50
    patience: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    train_model: bool = True
    train_proposal: bool = True
    valid_replicates: int = 4
    matched_compute: bool = True
    track_kl: bool = True

    def __post_init__(self):
        if self.objective not in ("elbo", "iwae", "fivo"):
            raise UsageError(f"cannot train on objective {self.objective!r}")
        if self.gradient not in VARIANTS:
            raise UsageError(f"unknown gradient variant {self.gradient!r}")
        if not self.learning_rate >= 0:
            raise UsageError("learning rate must be nonnegative")
        if self.batch_size < 1 or self.n_particles < 1 or self.max_steps < 0 or self.eval_every < 1:
            raise UsageError("batch size, particle count and cadence must be positive")

    @property
    def filter_particles(self):
        return 1 if self.objective == "elbo" else self.n_particles

    @property
    def filter_policy(self):
        return self.policy if self.objective == "fivo" else ResamplingPolicy.never()

    @property
    def effective_batch(self):
        if self.objective == "elbo" and self.matched_compute:
            return self.batch_size * self.n_particles
        return self.batch_size

    def to_dict(self):
        d = asdict(self)
        d["policy"] = self.policy.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "policy" in d:
            d["policy"] = ResamplingPolicy.from_dict(d["policy"])
        return cls(**d)


class Adam:
    """Adam ascent on a flat parameter vector."""

    def __init__(self, n, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        return params + self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    resamples: list = field(default_factory=list)
    kl: list = field(default_factory=list)
    eval_steps: list = field(default_factory=list)
    valid_bound: list = field(default_factory=list)
    valid_se: list = field(default_factory=list)
    best_step: Optional[int] = None
    stopped_early: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "objective", "grad_norm", "resamples", "kl", "valid_bound", "valid_se"])
        valid = dict(zip(self.eval_steps, zip(self.valid_bound, self.valid_se)))
        kl = dict(zip(self.eval_steps, self.kl))
        for i, s in enumerate(self.steps):
            vb, vs = valid.get(s, ("", ""))
            w.writerow([s, repr(self.objective[i]), repr(self.grad_norm[i]), repr(self.resamples[i]),
                        repr(kl[s]) if s in kl else "", repr(vb) if vb != "" else "", repr(vs) if vs != "" else ""])
        return buf.getvalue()


@dataclass
class TrainResult:
    model: object
    proposal: object
    history: TrainHistory
    config: TrainConfig

    @property
    def best_valid(self):
        h = self.history
        if not h.valid_bound:
            return float("-inf")
        return h.valid_bound[h.eval_steps.index(h.best_step)]


def _mask(model, proposal, config):
    nt = model.n_params
    mask = np.zeros(nt + proposal.n_params)
    if config.train_model:
        mask[:nt] = 1.0
    if config.train_proposal:
        mask[nt:] = 1.0
    return mask


def batch_gradient(model, proposal, xs, config: TrainConfig, rng):
    """Average gradient and bound over one batch of sequences (one filter per sequence)."""
    rec = run_particle_filter(model, proposal, xs, config.filter_particles, config.filter_policy, rng)
    variant = config.gradient
    if not config.filter_policy.is_fixed and variant != "reparam_biased":
        raise UsageError(f"gradient {variant!r} needs a fixed resampling schedule")
    g = estimate_gradient(variant, rec, model, proposal)
    return g.mean, float(rec.log_phat.mean()), float(rec.resampled.sum(axis=0).mean())


def train(model, proposal, train_xs, config: TrainConfig, valid_xs=None) -> TrainResult:
    """Adam ascent on the configured bound; returns the parameters at the best validation step.

    The validation bound uses the training objective on ``valid_xs``
    (``train_xs`` when not given) with a fixed stream, so successive
    evaluations are comparable.
    """
    train_xs = as_observations(train_xs)
    valid_xs = train_xs if valid_xs is None else as_observations(valid_xs)
    rng = as_stream(config.seed)
    proposal = proposal.bind(model)
    psi = joint_params(model, proposal)
    mask = _mask(model, proposal, config)
    opt = Adam(psi.size, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    hist = TrainHistory()
    best = (float("-inf"), psi.copy())
    since_best = 0
    S = train_xs.shape[0]
    B = config.effective_batch

    def evaluate(step, m, q):
        vb = dataset_bound(config.objective, m, q, valid_xs, config.filter_particles,
                           config.valid_replicates, rng.split("valid"), config.filter_policy)
        hist.eval_steps.append(step)
        hist.valid_bound.append(vb.mean)
        hist.valid_se.append(vb.std_error)
        if config.track_kl:
            hist.kl.append(kl_q_prior(q, m, valid_xs, rng.split("kl")))
        return vb.mean

    for step in range(config.max_steps + 1):
        m, q = split_params(model, proposal, psi)
        if step % config.eval_every == 0 or step == config.max_steps:
            v = evaluate(step, m, q)
            if not np.isfinite(v):
                raise TrainingDiverged(f"validation bound became {v} at step {step}", hist)
            if v > best[0]:
                best, since_best = (v, psi.copy()), 0
                hist.best_step = step
            else:
                since_best += 1
                if since_best >= config.patience:
                    hist.stopped_early = True
                    break
        if step == config.max_steps:
            break
        brng = rng.split(("batch", step))
        idx = brng.split("index").generator().integers(0, S, size=B)
        try:
            g, obj, rs = batch_gradient(m, q, train_xs[idx], config, brng.split("filter"))
        except DegenerateEnsemble as e:
            raise TrainingDiverged(f"particle weights collapsed at step {step}: {e}", hist) from e
        g = g * mask
        if not (np.isfinite(obj) and np.all(np.isfinite(g))):
            raise TrainingDiverged(f"objective or gradient non-finite at step {step}", hist)
        hist.steps.append(step)
        hist.objective.append(obj)
        hist.grad_norm.append(float(np.linalg.norm(g)))
        hist.resamples.append(rs)
        psi = opt.step(psi, g)
        if not np.all(np.isfinite(psi)):
            raise TrainingDiverged(f"parameters became non-finite at step {step}", hist)

    m, q = split_params(model, proposal, best[1])
    return TrainResult(m, q, hist, config)


def lr_grid_search(model, proposal, train_xs, config: TrainConfig, valid_xs=None, grid=LR_GRID):
    """Train once per learning rate; returns ``(results, selected_index)``.

    Selection is the argmax of the best validation bound (ties go to the
    first grid entry).
    """
    results = [train(model, proposal, train_xs, replace(config, learning_rate=lr), valid_xs)
               for lr in grid]
    scores = [r.best_valid for r in results]
    return results, int(np.argmax(scores))
