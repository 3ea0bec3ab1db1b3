"""Closed-form algebra for diagonal Gaussians.

Covers the two KL divergences the training objective needs — against the
standard-normal prior and against the Brownian-motion prior on latent
increments — together with their exact gradients. All operations accept a
single distribution (1-D mean/log_var) or a batch (rows along the leading
axis) and are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError

# Log-variances beyond this magnitude are clamped before exponentiation.
LOG_VAR_LIMIT = 20.0


@dataclass
class DiagonalGaussian:
    """Mean vector plus per-dimension variance stored in log space."""

    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_var = np.asarray(self.log_var, dtype=np.float64)
        if self.mean.shape != self.log_var.shape or self.mean.ndim == 0:
            raise InputError(
                f"mean {self.mean.shape} and log_var {self.log_var.shape} must be "
                "equal-shaped arrays with at least one axis"
            )
        if not (np.isfinite(self.mean).all() and np.isfinite(self.log_var).all()):
            raise InputError("mean/log_var contain non-finite values")

    @property
    def dim(self):
        return self.mean.shape[-1]

    @property
    def variance(self):
        return np.exp(self.log_var)

    @property
    def std(self):
        return np.exp(0.5 * self.log_var)

    def sample_with_noise(self, eps):
        """Reparameterized sample ``mean + std * eps``."""
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != self.mean.shape:
            raise InputError(f"noise shape {eps.shape} does not match {self.mean.shape}")
        return self.mean + self.std * eps

    def sample(self, rng):
        return self.sample_with_noise(rng.standard_normal(self.mean.shape))


def clamp_log_var(raw):
    """Clamp raw log-variances to [-LOG_VAR_LIMIT, LOG_VAR_LIMIT].

    Returns the clamped array and the number of clamped entries, which
    callers should surface as a training-health warning count.
    """
    raw = np.asarray(raw, dtype=np.float64)
    clamped = np.clip(raw, -LOG_VAR_LIMIT, LOG_VAR_LIMIT)
    n_clamped = int(np.count_nonzero(np.abs(raw) > LOG_VAR_LIMIT))
    return clamped, n_clamped


def _reduce(values, like):
    total = values.sum(axis=-1)
    return float(total) if like.mean.ndim == 1 else total


def kl_to_standard_normal(q):
    """KL(q || N(0, I)) = 1/2 sum(var + mean^2 - 1 - log_var); zero iff q is N(0, I)."""
    var = q.variance
    return _reduce(0.5 * (var + q.mean**2 - 1.0 - q.log_var), q)


def standard_kl_gradients(q):
    """Exact partials of :func:`kl_to_standard_normal` w.r.t. mean and log_var."""
    d_mean = q.mean.copy()
    d_log_var = 0.5 * (q.variance - 1.0)
    return d_mean, d_log_var


def _check_same_dim(q_i, q_j):
    if q_i.mean.shape != q_j.mean.shape:
        raise InputError(
            f"distributions have mismatched shapes {q_i.mean.shape} vs {q_j.mean.shape}"
        )


def difference_distribution(q_i, q_j):
    """Distribution of ``z_j - z_i`` for independent diagonal Gaussians:
    N(mean_j - mean_i, var_j + var_i)."""
    _check_same_dim(q_i, q_j)
    var = q_i.variance + q_j.variance
    return DiagonalGaussian(q_j.mean - q_i.mean, np.log(var))


def _check_delta_t(delta_t):
    if int(delta_t) != delta_t or delta_t < 1:
        raise InputError(f"delta_t must be a positive integer, got {delta_t!r}")
    return int(delta_t)


def brownian_prior(dim, delta_t):
    """Random-walk prior on latent increments: N(0, delta_t * I)."""
    dim = int(dim)
    if dim < 1:
        raise InputError(f"dim must be >= 1, got {dim}")
    delta_t = _check_delta_t(delta_t)
    return DiagonalGaussian(np.zeros(dim), np.full(dim, np.log(float(delta_t))))


def similarity_loss(q_i, q_j, delta_t=1):
    """KL between the difference distribution of (q_i, q_j) and the
    Brownian-motion prior N(0, delta_t * I).

    Closed form per dimension, with m = mean_j - mean_i and v = var_i + var_j:
    1/2 [ (v + m^2)/delta_t - 1 - log(v/delta_t) ].
    """
    _check_same_dim(q_i, q_j)
    delta_t = _check_delta_t(delta_t)
    m = q_j.mean - q_i.mean
    v = q_i.variance + q_j.variance
    per_dim = 0.5 * ((v + m**2) / delta_t - 1.0 - np.log(v / delta_t))
    return _reduce(per_dim, q_i)


def similarity_loss_gradients(q_i, q_j, delta_t=1):
    """Exact partials of :func:`similarity_loss` w.r.t. both means and log-variances.

    Returns (d_mean_i, d_log_var_i, d_mean_j, d_log_var_j).
    """
    _check_same_dim(q_i, q_j)
    delta_t = _check_delta_t(delta_t)
    m = q_j.mean - q_i.mean
    var_i = q_i.variance
    var_j = q_j.variance
    v = var_i + var_j
    d_mean_j = m / delta_t
    d_mean_i = -d_mean_j
    dv = 0.5 * (1.0 / delta_t - 1.0 / v)
    return d_mean_i, dv * var_i, d_mean_j, dv * var_j
