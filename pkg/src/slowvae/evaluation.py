"""Quantitative evaluation: held-out losses per subset size, bias-variance
decomposition across seeds, data-efficiency crossover between methods, latent
slowness, and latent scatter export.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import ballsim, nn, training
from .errors import InputError

_TAG_SPLIT = 900
_TAG_SLOWNESS = 901
_TAG_SCATTER = 902

# Random-pair sample size for the slowness denominator when exhaustive
# enumeration would be too large.
_DEFAULT_SLOWNESS_PAIRS = 200_000
_EXHAUSTIVE_LIMIT = 2000  # pool sizes up to this use exact enumeration


def split_sequences(dataset, test_fraction=0.1):
    """Seeded train/test split over sequences, derived from the dataset's own
    generation seed so the held-out set is fixed at generation time."""
    if not 0.0 < test_fraction < 1.0:
        raise InputError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = dataset.n_sequences
    n_test = int(n * test_fraction)
    if n_test < 1 or n_test >= n:
        raise InputError(
            f"test fraction {test_fraction} leaves no usable split for {n} sequences"
        )
    perm = nn.Rng(dataset.seed).child(_TAG_SPLIT).permutation(n)
    test = np.sort(perm[:n_test])
    train = np.sort(perm[n_test:])
    return train, test


def predictions(checkpoint, head, pairs):
    """Head predictions for every pair in the set."""
    sel = np.arange(len(pairs))
    feats = training.pair_features(checkpoint.model, pairs, sel)
    return nn.forward(head.net, feats)


def evaluate_mse(checkpoint, head, pairs):
    """Mean squared Euclidean error of the predicted label vectors."""
    if len(pairs) == 0:
        raise InputError("cannot evaluate on an empty pair set")
    preds = predictions(checkpoint, head, pairs)
    err = preds - np.asarray(pairs.labels, dtype=np.float64)
    return float(np.mean(np.sum(err * err, axis=1)))


def mse_of_predictions(preds, labels):
    err = np.asarray(preds, dtype=np.float64) - np.asarray(labels, dtype=np.float64)
    return float(np.mean(np.sum(err * err, axis=1)))


@dataclass
class BiasVarianceEntry:
    """Squared bias of the seed-mean predictor plus across-seed variance.

    With deterministic labels these two terms sum exactly to the across-seed
    mean MSE (no irreducible-noise term).
    """

    bias_sq: float
    variance: float

    @property
    def total(self):
        return self.bias_sq + self.variance


def bias_variance(per_seed_predictions, labels):
    """Decompose squared error over a seed ensemble.

    ``per_seed_predictions`` has shape (n_seeds, n_points, label_dim);
    ``labels`` has shape (n_points, label_dim).
    """
    preds = np.asarray(per_seed_predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.ndim != 3 or preds.shape[1:] != labels.shape:
        raise InputError(
            f"predictions of shape {preds.shape} do not match labels {labels.shape}"
        )
    if preds.shape[0] < 2:
        raise InputError("bias-variance decomposition needs at least 2 seeds")
    mean_pred = preds.mean(axis=0)
    bias_sq = float(np.mean(np.sum((mean_pred - labels) ** 2, axis=1)))
    variance = float(np.mean(np.sum((preds - mean_pred) ** 2, axis=2)))
    return BiasVarianceEntry(bias_sq, variance)


@dataclass
class SubsetPoint:
    n_examples: int
    loss_mean: float
    loss_std: float
    per_seed: np.ndarray


@dataclass
class SubsetCurve:
    """Held-out loss as a function of labeled-subset size, over seeds."""

    points: list

    def __post_init__(self):
        ns = [p.n_examples for p in self.points]
        if any(b <= a for a, b in zip(ns, ns[1:])):
            raise InputError("subset sizes must be strictly increasing")

    @classmethod
    def from_matrix(cls, n_examples, per_seed_losses):
        """Build from sizes (n_subsets,) and losses (n_subsets, n_seeds)."""
        losses = np.asarray(per_seed_losses, dtype=np.float64)
        pts = []
        for n, row in zip(n_examples, losses):
            std = float(np.std(row, ddof=1)) if len(row) > 1 else 0.0
            pts.append(SubsetPoint(int(n), float(np.mean(row)), std, row.copy()))
        return cls(pts)

    @property
    def sizes(self):
        return np.array([p.n_examples for p in self.points], dtype=np.float64)

    @property
    def means(self):
        return np.array([p.loss_mean for p in self.points], dtype=np.float64)


@dataclass
class DataEfficiencyResult:
    achieved: bool
    n_needed: float | None        # examples the candidate needs to match the reference best
    percent_savings: float | None
    reference_best_loss: float
    reference_best_n: int


def data_efficiency(curve_a, curve_b):
    """How much less data curve_a needs to reach curve_b's best mean loss.

    The reference level is curve_b's minimum mean loss (at the smallest size
    achieving it). The crossover size on curve_a is found by log-linear
    interpolation on (log n, loss) between adjacent grid points; if curve_a
    never reaches the level the result is marked not achieved.
    """
    ns_a, ns_b = curve_a.sizes, curve_b.sizes
    if len(ns_a) != len(ns_b) or not np.array_equal(ns_a, ns_b):
        raise InputError("curves must share the same subset-size grid")
    means_a, means_b = curve_a.means, curve_b.means

    best_idx = int(np.argmin(means_b))
    level = float(means_b[best_idx])
    ref_n = int(ns_b[best_idx])

    n_needed = None
    if means_a[0] <= level:
        n_needed = float(ns_a[0])
    else:
        for i in range(len(ns_a) - 1):
            if means_a[i] > level >= means_a[i + 1]:
                t = (means_a[i] - level) / (means_a[i] - means_a[i + 1])
                log_n = np.log(ns_a[i]) + t * (np.log(ns_a[i + 1]) - np.log(ns_a[i]))
                n_needed = float(np.exp(log_n))
                break
    if n_needed is None:
        return DataEfficiencyResult(False, None, None, level, ref_n)
    savings = 100.0 * (1.0 - n_needed / ref_n)
    return DataEfficiencyResult(True, n_needed, savings, level, ref_n)


def slowness_ratio_from_means(means, n_random_pairs=_DEFAULT_SLOWNESS_PAIRS, seed=0):
    """Mean consecutive-frame latent distance over mean random-pair distance.

    ``means`` has shape (n_sequences, seq_len, latent_dim). Random pairs are
    drawn i.i.d. uniformly over the pooled frames (coincident picks allowed);
    pools up to a size cutoff are enumerated exactly instead of sampled.
    Returns 0 with a warning when all latents coincide.
    """
    means = np.asarray(means, dtype=np.float64)
    if means.ndim != 3 or means.shape[1] < 2:
        raise InputError("means must be (n_sequences, seq_len >= 2, latent_dim)")
    consecutive = float(
        np.mean(np.linalg.norm(np.diff(means, axis=1), axis=2))
    )
    pool = means.reshape(-1, means.shape[2])
    n = pool.shape[0]
    if n <= _EXHAUSTIVE_LIMIT:
        diffs = pool[:, None, :] - pool[None, :, :]
        random_mean = float(np.mean(np.linalg.norm(diffs, axis=2)))
    else:
        rng = nn.Rng(seed).child(_TAG_SLOWNESS)
        idx_a = rng.integers(n, size=n_random_pairs)
        idx_b = rng.integers(n, size=n_random_pairs)
        random_mean = float(np.mean(np.linalg.norm(pool[idx_a] - pool[idx_b], axis=1)))
    if random_mean == 0.0:
        warnings.warn(
            "all latent means coincide; slowness ratio defined as 0",
            RuntimeWarning,
            stacklevel=2,
        )
        return 0.0
    return consecutive / random_mean


def latent_slowness_ratio(checkpoint, dataset, sequence_indices=None,
                          n_random_pairs=_DEFAULT_SLOWNESS_PAIRS, seed=0):
    """Slowness of a trained encoder on the given sequences (< 1 means
    consecutive frames sit closer in latent space than random frames)."""
    if sequence_indices is None:
        sequence_indices = np.arange(dataset.n_sequences)
    sequence_indices = np.asarray(sequence_indices, dtype=np.int64)
    if dataset.seq_len < 2:
        raise InputError("sequences must have length >= 2")
    n_pix = dataset.n_pixels
    frames = dataset.frames[sequence_indices].reshape(-1, n_pix)
    means = training.encode_means(checkpoint.model, frames)
    means = means.reshape(len(sequence_indices), dataset.seq_len, -1)
    return slowness_ratio_from_means(means, n_random_pairs=n_random_pairs, seed=seed)


@dataclass
class LatentScatter:
    """Long-form latent visualization table: one row per (sample, latent dim),
    columns (ball_x, ball_y, latent_dim_index, latent_value)."""

    rows: np.ndarray
    n_samples: int
    latent_dim: int


def export_latent_scatter(checkpoint, dataset, n_samples, seed=0):
    """Sample frames without replacement, encode each one, and pair every
    latent mean component with the true ball center of that frame.

    Ball centers are re-derived from the dataset's generation seed (not read
    off the pixels), so this requires a dataset produced by the bundled
    simulator.
    """
    n_frames = dataset.n_frames
    n_samples = int(n_samples)
    if n_samples < 1 or n_samples > n_frames:
        raise InputError(
            f"n_samples must be in [1, {n_frames}], got {n_samples}"
        )
    rng = nn.Rng(seed).child(_TAG_SCATTER)
    flat = rng.permutation(n_frames)[:n_samples]
    seq_idx = flat // dataset.seq_len
    time_idx = flat % dataset.seq_len

    position_cache = {}
    centers = np.empty((n_samples, 2))
    for row, (s, t) in enumerate(zip(seq_idx, time_idx)):
        s = int(s)
        if s not in position_cache:
            position_cache[s] = ballsim.sequence_positions(dataset, s)
        centers[row] = position_cache[s][int(t)]

    frames = dataset.frames[seq_idx, time_idx].reshape(n_samples, -1)
    means = training.encode_means(checkpoint.model, frames)
    k = means.shape[1]

    rows = np.empty((n_samples * k, 4))
    for d in range(k):
        block = rows[d::k]
        block[:, 0] = centers[:, 0]
        block[:, 1] = centers[:, 1]
        block[:, 2] = d
        block[:, 3] = means[:, d]
    return LatentScatter(rows, n_samples, k)
