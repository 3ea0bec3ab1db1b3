"""Encoder/decoder model and the pair training objective.

The loss on a consecutive-frame pair combines three terms:

  total = -reconstruction + beta * kl_prior + lambda * kl_similarity

where reconstruction is a per-pixel Bernoulli log-likelihood of the decoded
frames, kl_prior is the KL of the posteriors against N(0, I), and
kl_similarity is the KL of the latent difference distribution against the
Brownian-motion increment prior. In the default symmetric form the
reconstruction and prior-KL terms average both frames of the pair; the
single-frame form (``symmetric_beta=False``) uses only the first frame for
those terms, keeping the second frame solely for the similarity term.

Gradients are assembled by hand: decoder backprop for the reconstruction,
closed-form KL partials on the posterior parameters, and encoder backprop of
the combined upstream gradient, with the reparameterized samples treated as
``mean + std * eps`` for fixed noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gaussians, nn
from .errors import DivergenceError, InputError


@dataclass
class VaeModel:
    encoder: nn.DenseNet   # flattened frame -> (means, log-variances)
    decoder: nn.DenseNet   # latent -> per-pixel logits
    latent_dim: int
    frame_shape: tuple     # (H, W)

    def __post_init__(self):
        h, w = self.frame_shape
        n_pixels = h * w
        if self.encoder.output_dim != 2 * self.latent_dim:
            raise InputError(
                f"encoder outputs {self.encoder.output_dim} values, "
                f"expected 2 * latent_dim = {2 * self.latent_dim}"
            )
        if self.encoder.input_dim != n_pixels or self.decoder.output_dim != n_pixels:
            raise InputError("encoder/decoder pixel dimensions do not match the frame shape")
        if self.decoder.input_dim != self.latent_dim:
            raise InputError("decoder input does not match latent_dim")

    @property
    def n_pixels(self):
        h, w = self.frame_shape
        return h * w


def build_model(frame_shape, latent_dim, encoder_hidden, decoder_hidden, rng):
    """Initialize encoder and decoder nets (ReLU hidden, identity outputs)."""
    h, w = frame_shape
    n_pixels = int(h) * int(w)
    encoder = nn.init_dense_net(
        (n_pixels, *encoder_hidden, 2 * latent_dim), rng.child(0)
    )
    decoder = nn.init_dense_net(
        (latent_dim, *decoder_hidden, n_pixels), rng.child(1)
    )
    return VaeModel(encoder, decoder, int(latent_dim), (int(h), int(w)))


def flatten_frames(frames, n_pixels, what="frame"):
    """Accept (H, W), (P,), (B, H, W) or (B, P); return ((B, P) float64, was_single)."""
    arr = np.asarray(frames, dtype=np.float64)
    if arr.ndim >= 2 and arr.shape[-1] * arr.shape[-2] == n_pixels and arr.shape[-1] != n_pixels:
        arr = arr.reshape(arr.shape[:-2] + (n_pixels,))
    was_single = arr.ndim == 1
    if was_single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != n_pixels:
        raise InputError(f"{what} has shape {np.shape(frames)}, expected {n_pixels} pixels")
    return arr, was_single


def _split_encoder_output(out, latent_dim):
    mean = out[..., :latent_dim]
    raw_log_var = out[..., latent_dim:]
    log_var, n_clamped = gaussians.clamp_log_var(raw_log_var)
    clamp_mask = np.abs(raw_log_var) <= gaussians.LOG_VAR_LIMIT
    return mean, log_var, clamp_mask, n_clamped


def encode(model, frames):
    """Posterior q(z | frame): deterministic split of the encoder output into
    means and (clamped) log-variances."""
    x, was_single = flatten_frames(frames, model.n_pixels)
    if x.min() < 0.0 or x.max() > 1.0:
        raise InputError("frame pixels must lie in [0, 1]")
    out = nn.forward(model.encoder, x)
    mean, log_var, _, _ = _split_encoder_output(out, model.latent_dim)
    if was_single:
        return gaussians.DiagonalGaussian(mean[0], log_var[0])
    return gaussians.DiagonalGaussian(mean, log_var)


def decode(model, z):
    """Per-pixel Bernoulli means: logistic of the decoder logits, in (0, 1)."""
    z = np.asarray(z, dtype=np.float64)
    was_single = z.ndim == 1
    if z.shape[-1] != model.latent_dim:
        raise InputError(f"latent has shape {z.shape}, expected last dim {model.latent_dim}")
    logits = nn.forward(model.decoder, z)
    means = _sigmoid(logits)
    return means[0] if (was_single and means.ndim == 2) else means


def _sigmoid(x):
    em = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + em), em / (1.0 + em))


def reconstruction_log_likelihood(frames, decoded_means):
    """Per-pixel Bernoulli cross-entropy, summed over pixels:
    sum(x * log(m) + (1 - x) * log(1 - m)). Not normalized; <= 0 for binary x."""
    x = np.asarray(frames, dtype=np.float64)
    m = np.asarray(decoded_means, dtype=np.float64)
    if x.shape != m.shape:
        raise InputError(f"frame shape {x.shape} does not match means shape {m.shape}")
    if m.min() <= 0.0 or m.max() >= 1.0:
        raise InputError("decoded means must lie strictly inside (0, 1)")
    flat_x = x.reshape(x.shape[0], -1) if x.ndim > 1 else x[None, :]
    flat_m = m.reshape(flat_x.shape)
    ll = np.sum(flat_x * np.log(flat_m) + (1.0 - flat_x) * np.log1p(-flat_m), axis=1)
    return float(ll[0]) if x.ndim == 1 else ll


def _log_likelihood_from_logits(x, logits):
    """Stable sum_pixels [x * l - softplus(l)] and its gradient w.r.t. logits."""
    ll = np.sum(x * logits - _softplus(logits), axis=1)
    dll_dlogits = x - _sigmoid(logits)
    return ll, dll_dlogits


@dataclass
class LossBreakdown:
    """One objective evaluation; ``total`` always equals
    ``-reconstruction + beta * kl_prior + lambda * kl_similarity``."""

    reconstruction: float
    kl_prior: float
    kl_similarity: float
    total: float


@dataclass
class PairLossResult:
    breakdown: LossBreakdown
    encoder_tape: nn.GradientTape
    decoder_tape: nn.GradientTape
    n_clamped: int


def pair_loss(model, frames_first, frames_second, config, *, rng=None, noise=None):
    """Objective and gradients for a batch of consecutive-frame pairs.

    Exactly one of ``rng`` (fresh reparameterization noise) or ``noise``
    (a pair of arrays, for frozen-noise gradient checks) must be given.
    The returned tapes hold d(total)/d(params) averaged over the batch.
    """
    if (rng is None) == (noise is None):
        raise InputError("provide exactly one of rng or noise")
    beta = float(config.beta)
    lam = float(config.lam)
    symmetric = bool(config.symmetric_beta)

    x_i, single = flatten_frames(frames_first, model.n_pixels, "frames_first")
    x_j, single_j = flatten_frames(frames_second, model.n_pixels, "frames_second")
    if x_i.shape != x_j.shape:
        raise InputError("frame batches must have equal shapes")
    batch = x_i.shape[0]
    k = model.latent_dim

    out_i, enc_trace_i = nn.forward_trace(model.encoder, x_i)
    out_j, enc_trace_j = nn.forward_trace(model.encoder, x_j)
    mu_i, lv_i, mask_i, clamped_i = _split_encoder_output(out_i, k)
    mu_j, lv_j, mask_j, clamped_j = _split_encoder_output(out_j, k)
    std_i = np.exp(0.5 * lv_i)
    std_j = np.exp(0.5 * lv_j)

    if noise is not None:
        eps_i = np.asarray(noise[0], dtype=np.float64).reshape(batch, k)
        eps_j = np.asarray(noise[1], dtype=np.float64).reshape(batch, k)
    else:
        eps_i = rng.standard_normal((batch, k))
        eps_j = rng.standard_normal((batch, k))
    z_i = mu_i + std_i * eps_i
    z_j = mu_j + std_j * eps_j

    logits_i, dec_trace_i = nn.forward_trace(model.decoder, z_i)
    ll_i, dll_i = _log_likelihood_from_logits(x_i, logits_i)
    if symmetric:
        logits_j, dec_trace_j = nn.forward_trace(model.decoder, z_j)
        ll_j, dll_j = _log_likelihood_from_logits(x_j, logits_j)

    var_i = np.exp(lv_i)
    var_j = np.exp(lv_j)
    kl_i = 0.5 * np.sum(var_i + mu_i**2 - 1.0 - lv_i, axis=1)
    kl_j = 0.5 * np.sum(var_j + mu_j**2 - 1.0 - lv_j, axis=1)
    m = mu_j - mu_i
    v = var_i + var_j
    kl_sim = 0.5 * np.sum(v + m**2 - 1.0 - np.log(v), axis=1)

    if symmetric:
        reconstruction = float(np.mean(0.5 * (ll_i + ll_j)))
        kl_prior = float(np.mean(0.5 * (kl_i + kl_j)))
    else:
        reconstruction = float(np.mean(ll_i))
        kl_prior = float(np.mean(kl_i))
    kl_similarity = float(np.mean(kl_sim))
    total = -reconstruction + beta * kl_prior + lam * kl_similarity
    if not np.isfinite(total):
        raise DivergenceError(
            f"non-finite pair loss (reconstruction={reconstruction}, "
            f"kl_prior={kl_prior}, kl_similarity={kl_similarity})"
        )
    breakdown = LossBreakdown(reconstruction, kl_prior, kl_similarity, total)

    # Backward pass for the batch-mean total loss.
    recon_weight = 0.5 if symmetric else 1.0
    prior_weight = (beta * recon_weight) / batch

    dec_tape = nn.backward(model.decoder, -(recon_weight / batch) * dll_i, dec_trace_i)
    dz_i = dec_tape.input_grad
    if symmetric:
        dec_tape_j = nn.backward(model.decoder, -(recon_weight / batch) * dll_j, dec_trace_j)
        dz_j = dec_tape_j.input_grad
        dec_tape.add_(dec_tape_j)
    else:
        dz_j = np.zeros_like(z_j)

    # Reparameterization: dz/dmu = 1, dz/dlog_var = std * eps / 2.
    d_mu_i = dz_i.copy()
    d_lv_i = dz_i * (0.5 * std_i * eps_i)
    d_mu_j = dz_j.copy()
    d_lv_j = dz_j * (0.5 * std_j * eps_j)

    d_mu_i += prior_weight * mu_i
    d_lv_i += prior_weight * 0.5 * (var_i - 1.0)
    if symmetric:
        d_mu_j += prior_weight * mu_j
        d_lv_j += prior_weight * 0.5 * (var_j - 1.0)

    sim_weight = lam / batch
    dv = 0.5 * (1.0 - 1.0 / v)
    d_mu_j += sim_weight * m
    d_mu_i -= sim_weight * m
    d_lv_i += sim_weight * dv * var_i
    d_lv_j += sim_weight * dv * var_j

    # Clamped log-variances pass no gradient.
    d_lv_i *= mask_i
    d_lv_j *= mask_j

    enc_tape = nn.backward(model.encoder, np.concatenate([d_mu_i, d_lv_i], axis=1), enc_trace_i)
    enc_tape.add_(
        nn.backward(model.encoder, np.concatenate([d_mu_j, d_lv_j], axis=1), enc_trace_j)
    )

    return PairLossResult(breakdown, enc_tape, dec_tape, clamped_i + clamped_j)
