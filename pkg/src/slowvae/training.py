"""Two-stage training: unsupervised representation learning on consecutive
frame pairs, then frozen-encoder regression heads on labeled subsets.

Both stages are deterministic in their seeds: model init, pair shuffling,
reparameterization noise, and subset sampling each consume their own derived
random stream, and the data order never depends on the loss weights (so an
``svae`` run with lambda = 0 follows the exact trajectory of a ``bvae`` run).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn, vae
from .errors import ConfigError, DivergenceError, InputError

# Tags for deriving per-purpose random streams from a run seed.
_TAG_MODEL_INIT = 0
_TAG_SHUFFLE = 1
_TAG_NOISE = 2
_TAG_SUBSET = 3
_TAG_HEAD_INIT = 4
_TAG_HEAD_SHUFFLE = 5

SUBSET_FRACTIONS = tuple(1.0 / 2**k for k in range(8))

MODES = ("svae", "bvae")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one representation-learning run."""

    mode: str                      # "svae" or "bvae"
    beta: float
    lam: float                     # weight of the temporal similarity term
    latent_dim: int = 2
    encoder_hidden: tuple = (64, 64)
    decoder_hidden: tuple = (64, 64)
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 30
    seed: int = 0
    symmetric_beta: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "bvae" and self.lam != 0.0:
            raise ConfigError("bvae mode requires lambda = 0")
        if self.beta < 0 or self.lam < 0:
            raise ConfigError("beta and lambda must be non-negative")
        if self.latent_dim < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("latent_dim, batch_size and epochs must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def to_dict(self):
        return {
            "mode": self.mode,
            "beta": self.beta,
            "lambda": self.lam,
            "latent_dim": self.latent_dim,
            "encoder_hidden": list(self.encoder_hidden),
            "decoder_hidden": list(self.decoder_hidden),
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "symmetric_beta": self.symmetric_beta,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            mode=d["mode"],
            beta=float(d["beta"]),
            lam=float(d["lambda"]),
            latent_dim=int(d["latent_dim"]),
            encoder_hidden=tuple(int(v) for v in d["encoder_hidden"]),
            decoder_hidden=tuple(int(v) for v in d["decoder_hidden"]),
            learning_rate=float(d["learning_rate"]),
            batch_size=int(d["batch_size"]),
            epochs=int(d["epochs"]),
            seed=int(d["seed"]),
            symmetric_beta=bool(d["symmetric_beta"]),
        )


@dataclass
class EpochStats:
    epoch: int                 # 1-based
    reconstruction: float
    kl_prior: float
    kl_similarity: float
    total: float
    n_clamped: int = 0


@dataclass
class Checkpoint:
    """A trained model with its config echo and per-epoch loss log."""

    model: vae.VaeModel
    config: TrainConfig
    loss_log: list = field(default_factory=list)

    @property
    def final_epoch(self):
        return len(self.loss_log)


@dataclass
class PairSet:
    """Consecutive-frame pairs addressed into a shared frame store.

    ``frames`` is the (n_seq, L, H, W) backing array; pair p is
    (frames[seq[p], t[p]], frames[seq[p], t[p] + 1]) with label labels[p].
    """

    frames: np.ndarray
    seq_index: np.ndarray
    time_index: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        n = len(self.seq_index)
        if not (len(self.time_index) == n and len(self.labels) == n):
            raise InputError("pair index arrays must have equal lengths")

    def __len__(self):
        return len(self.seq_index)

    @property
    def n_pixels(self):
        return self.frames.shape[2] * self.frames.shape[3]

    def first_frames(self, sel):
        n = self.n_pixels
        return self.frames[self.seq_index[sel], self.time_index[sel]].reshape(-1, n).astype(np.float64)

    def second_frames(self, sel):
        n = self.n_pixels
        return self.frames[self.seq_index[sel], self.time_index[sel] + 1].reshape(-1, n).astype(np.float64)


def build_pairs(dataset, sequence_indices=None):
    """All adjacent-frame pairs of the selected sequences, labeled with the
    velocity that produced each transition."""
    if sequence_indices is None:
        sequence_indices = np.arange(dataset.n_sequences)
    sequence_indices = np.asarray(sequence_indices, dtype=np.int64)
    n_per = dataset.seq_len - 1
    seq = np.repeat(sequence_indices, n_per)
    t = np.tile(np.arange(n_per, dtype=np.int64), len(sequence_indices))
    labels = dataset.labels[seq, t].astype(np.float64)
    return PairSet(dataset.frames, seq, t, labels)


def _batch_slices(n, batch_size):
    return [(lo, min(lo + batch_size, n)) for lo in range(0, n, batch_size)]


def train_representation(dataset, config, sequence_indices=None):
    """Stage one: jointly optimize encoder and decoder on shuffled consecutive
    pairs for ``config.epochs`` epochs. Deterministic in ``config.seed``."""
    if dataset.seq_len < 2:
        raise InputError("dataset sequences must have length >= 2")
    pairs = build_pairs(dataset, sequence_indices)
    n_pairs = len(pairs)
    if n_pairs == 0:
        raise InputError("no training pairs available")

    root = nn.Rng(config.seed)
    model = vae.build_model(
        dataset.frame_shape,
        config.latent_dim,
        config.encoder_hidden,
        config.decoder_hidden,
        root.child(_TAG_MODEL_INIT),
    )
    shuffle_rng = root.child(_TAG_SHUFFLE)
    noise_rng = root.child(_TAG_NOISE)
    opt_enc = nn.OptimizerState(model.encoder, learning_rate=config.learning_rate)
    opt_dec = nn.OptimizerState(model.decoder, learning_rate=config.learning_rate)

    loss_log = []
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n_pairs)
        sums = np.zeros(4)
        n_clamped = 0
        for b, (lo, hi) in enumerate(_batch_slices(n_pairs, config.batch_size)):
            sel = order[lo:hi]
            try:
                result = vae.pair_loss(
                    model,
                    pairs.first_frames(sel),
                    pairs.second_frames(sel),
                    config,
                    rng=noise_rng,
                )
                nn.adam_step(opt_enc, model.encoder, result.encoder_tape)
                nn.adam_step(opt_dec, model.decoder, result.decoder_tape)
            except DivergenceError as err:
                raise DivergenceError(
                    f"training diverged at epoch {epoch}, batch {b}: {err}",
                    layer_index=err.layer_index,
                    epoch=epoch,
                    batch=b,
                ) from err
            bd = result.breakdown
            sums += (hi - lo) * np.array(
                [bd.reconstruction, bd.kl_prior, bd.kl_similarity, bd.total]
            )
            n_clamped += result.n_clamped
        means = sums / n_pairs
        loss_log.append(
            EpochStats(epoch, means[0], means[1], means[2], means[3], n_clamped)
        )
    return Checkpoint(model, config, loss_log)


@dataclass(frozen=True)
class HeadConfig:
    """Hyperparameters for one downstream regression head."""

    hidden: tuple = (50, 50, 50)
    learning_rate: float = 1e-3
    batch_size: int = 128
    steps: int = 3000
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 1:
            raise ConfigError("batch_size and steps must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def to_dict(self):
        return {
            "hidden": list(self.hidden),
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "steps": self.steps,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            hidden=tuple(int(v) for v in d["hidden"]),
            learning_rate=float(d["learning_rate"]),
            batch_size=int(d["batch_size"]),
            steps=int(d["steps"]),
            seed=int(d["seed"]),
        )


@dataclass
class DownstreamHead:
    """A regression head over two concatenated posterior means."""

    net: nn.DenseNet
    latent_dim: int
    subset_fraction: float
    n_examples: int
    seed: int
    loss_log: list = field(default_factory=list)   # mean training MSE per pass

    def __post_init__(self):
        if self.net.input_dim != 2 * self.latent_dim:
            raise InputError(
                f"head expects {self.net.input_dim} inputs, "
                f"but two latents give {2 * self.latent_dim}"
            )


def subset_fraction_exponent(fraction):
    """Map a subset fraction to its exponent k (fraction == 1 / 2**k, k in 0..7)."""
    for k, f in enumerate(SUBSET_FRACTIONS):
        if fraction == f:
            return k
    raise InputError(
        f"subset_fraction must be one of 1, 1/2, ..., 1/128; got {fraction!r}"
    )


def encode_means(model, frames_2d, batch_size=1024):
    """Posterior means for many flattened frames, computed without gradients."""
    out = np.empty((frames_2d.shape[0], model.latent_dim))
    for lo, hi in _batch_slices(frames_2d.shape[0], batch_size):
        x = np.asarray(frames_2d[lo:hi], dtype=np.float64)
        enc = nn.forward(model.encoder, x)
        out[lo:hi] = enc[:, : model.latent_dim]
    return out


def pair_features(model, pairs, sel=None):
    """Concatenated posterior means of both frames of each selected pair."""
    if sel is None:
        sel = np.arange(len(pairs))
    first = encode_means(model, pairs.first_frames(sel))
    second = encode_means(model, pairs.second_frames(sel))
    return np.concatenate([first, second], axis=1)


def train_downstream(checkpoint, labeled_pairs, subset_fraction, head_config):
    """Stage two: fit a regression head on a seeded subset of labeled pairs.

    The encoder stays frozen: only its posterior means are consumed. The
    subset is chosen by the (seed, subset) stream alone, so runs that share a
    seed see identical subsets regardless of the upstream model. Training
    runs a fixed number of optimizer steps, cycling shuffled passes over the
    subset.
    """
    exponent = subset_fraction_exponent(subset_fraction)
    n_total = len(labeled_pairs)
    n_subset = int(math.floor(subset_fraction * n_total))
    if n_subset < 1:
        raise InputError(
            f"subset of {n_total} pairs at fraction {subset_fraction} is empty"
        )

    root = nn.Rng(head_config.seed)
    subset_sel = np.sort(root.child(_TAG_SUBSET, exponent).permutation(n_total)[:n_subset])

    model = checkpoint.model
    features = pair_features(model, labeled_pairs, subset_sel)
    targets = np.asarray(labeled_pairs.labels[subset_sel], dtype=np.float64)
    label_dim = targets.shape[1]

    batch_size = head_config.batch_size
    if batch_size > n_subset:
        warnings.warn(
            f"batch size {batch_size} clamped to subset size {n_subset}",
            RuntimeWarning,
            stacklevel=2,
        )
        batch_size = n_subset

    head = nn.init_dense_net(
        (2 * model.latent_dim, *head_config.hidden, label_dim),
        root.child(_TAG_HEAD_INIT, exponent),
    )
    opt = nn.OptimizerState(head, learning_rate=head_config.learning_rate)
    shuffle_rng = root.child(_TAG_HEAD_SHUFFLE, exponent)

    loss_log = []
    steps_done = 0
    pass_losses = []
    while steps_done < head_config.steps:
        order = shuffle_rng.permutation(n_subset)
        for lo, hi in _batch_slices(n_subset, batch_size):
            if steps_done >= head_config.steps:
                break
            sel = order[lo:hi]
            x = features[sel]
            y = targets[sel]
            pred, trace = nn.forward_trace(head, x)
            err = pred - y
            mse = float(np.mean(np.sum(err * err, axis=1)))
            if not np.isfinite(mse):
                raise DivergenceError(f"downstream loss diverged at step {steps_done}")
            tape = nn.backward(head, (2.0 / x.shape[0]) * err, trace)
            nn.adam_step(opt, head, tape)
            pass_losses.append(mse)
            steps_done += 1
        loss_log.append(float(np.mean(pass_losses)))
        pass_losses = []

    return DownstreamHead(
        net=head,
        latent_dim=model.latent_dim,
        subset_fraction=float(subset_fraction),
        n_examples=n_subset,
        seed=head_config.seed,
        loss_log=loss_log,
    )


def predict(checkpoint, head, frames_first, frames_second):
    """Predict labels for frame pairs: encode both frames, concatenate the
    posterior means, and run the head. Deterministic."""
    model = checkpoint.model
    x_i, single = vae.flatten_frames(frames_first, model.n_pixels, "frames_first")
    x_j, _ = vae.flatten_frames(frames_second, model.n_pixels, "frames_second")
    if x_i.shape != x_j.shape:
        raise InputError("frame batches must have equal shapes")
    feats = np.concatenate([encode_means(model, x_i), encode_means(model, x_j)], axis=1)
    out = nn.forward(head.net, feats)
    return out[0] if single else out
