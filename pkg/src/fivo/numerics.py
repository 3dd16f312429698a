"""Log-space arithmetic, Gaussian primitives and the counter-based RNG stream.

Weights are carried as natural logs everywhere; ``-inf`` encodes a zero
weight and is a legal value.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateEnsemble, DomainError, UsageError

LOG_2PI = float(np.log(2.0 * np.pi))
_MASK64 = (1 << 64) - 1


def log_sum_exp(values, axis=None, keepdims=False):
    """Stable ``log(sum(exp(values)))`` by max-shift.

    Works along ``axis`` (all elements when ``None``). Slices that are
    entirely ``-inf`` reduce to ``-inf`` without producing NaN.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0 or (axis is not None and v.shape[axis] == 0):
        raise UsageError("log_sum_exp of an empty array")
    m = np.max(v, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(v - shift), axis=axis, keepdims=True)) + shift
    # an all -inf slice gives log(0) + 0 = -inf; a +inf max propagates as +inf
    out = np.where(np.isposinf(m), np.inf, out)
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out if np.ndim(out) else float(out)


def normalize_log_weights(log_weights, axis=-1):
    """Return ``(weights, log_norm)`` with weights summing to one along ``axis``.

    Raises DegenerateEnsemble if any slice has no finite entry.
    """
    lw = np.asarray(log_weights, dtype=float)
    log_norm = log_sum_exp(lw, axis=axis, keepdims=True)
    if np.any(~np.isfinite(log_norm)):
        raise DegenerateEnsemble("all log weights are -inf; total weight collapsed")
    weights = np.exp(lw - log_norm)
    log_norm = np.squeeze(log_norm, axis=axis)
    return weights, (log_norm if np.ndim(log_norm) else float(log_norm))


def gaussian_reparameterize(mean, std, noise):
    """``mean + std * noise``, the location-scale reparameterization.

    The partial derivatives are 1 with respect to ``mean`` and ``noise`` with
    respect to ``std``; :func:`gaussian_reparameterize_grad` returns them.
    """
    std = np.asarray(std, dtype=float)
    if np.any(std <= 0):
        raise DomainError(f"std must be positive, got {std}")
    out = np.asarray(mean, dtype=float) + std * np.asarray(noise, dtype=float)
    return out if np.ndim(out) else float(out)


def gaussian_reparameterize_grad(mean, std, noise):
    """Return ``(d/dmean, d/dstd)`` of :func:`gaussian_reparameterize`."""
    if np.any(np.asarray(std) <= 0):
        raise DomainError(f"std must be positive, got {std}")
    noise = np.asarray(noise, dtype=float)
    return np.ones_like(noise + np.asarray(mean, dtype=float)), noise * 1.0


def gaussian_log_pdf(value, mean, log_std):
    """Normal log-density parameterized by log standard deviation."""
    u = (value - mean) * np.exp(-log_std)
    return -0.5 * LOG_2PI - log_std - 0.5 * u * u


def gaussian_log_pdf_partials(value, mean, log_std):
    """Partial derivatives of :func:`gaussian_log_pdf`.

    Returns ``(d/dvalue, d/dmean, d/dlog_std)``.
    """
    inv_var = np.exp(-2.0 * log_std)
    r = (value - mean) * inv_var
    return -r, r, (value - mean) * r - 1.0


def normal_log_pdf(value, mean, var):
    """Normal log-density parameterized by variance."""
    return -0.5 * (LOG_2PI + np.log(var) + (value - mean) ** 2 / var)


def gaussian_kl(mean_q, var_q, mean_p, var_p):
    """KL(N(mean_q, var_q) || N(mean_p, var_p)) elementwise."""
    return 0.5 * (np.log(var_p / var_q) + (var_q + (mean_q - mean_p) ** 2) / var_p - 1.0)


def _derive_id(stream_id: int, label) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(int(stream_id).to_bytes(8, "little"))
    h.update(repr(label).encode())
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream keyed by ``(seed, stream_id)``.

    Draws come from a Philox generator whose 128-bit key is
    ``(seed, stream_id)`` and whose counter starts at ``position``, so the
    sequence depends only on these three integers and never on process or
    thread layout. Child streams are derived with :meth:`split`; the child id
    is a 64-bit hash of the parent id and the label.
    """

    seed: int
    stream_id: int = 0
    position: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id", "position"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or not 0 <= int(v) <= _MASK64:
                raise UsageError(f"{name} must be an unsigned 64-bit integer, got {v!r}")

    def split(self, label) -> "RngStream":
        return RngStream(self.seed, _derive_id(self.stream_id, label), 0)

    def at(self, position: int) -> "RngStream":
        return replace(self, position=position)

    def generator(self) -> np.random.Generator:
        bitgen = np.random.Philox(key=[int(self.seed), int(self.stream_id)],
                                  counter=[int(self.position), 0, 0, 0])
        return np.random.Generator(bitgen)

    def normal(self, shape) -> np.ndarray:
        return self.generator().standard_normal(shape)

    def uniform(self, shape) -> np.ndarray:
        return self.generator().random(shape)


def as_stream(rng) -> RngStream:
    """Accept an RngStream or a plain integer seed."""
    if isinstance(rng, RngStream):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng))
    raise UsageError(f"expected an RngStream or integer seed, got {type(rng).__name__}")
