"""Temporal-similarity regularized VAEs on bouncing-ball sequences.

The package trains a similarity-regularized VAE ("svae") and its plain
beta-weighted baseline ("bvae") on consecutive-frame pairs, then measures
few-shot downstream regression performance, bias-variance behavior, and
latent slowness. See the ``cli`` module for the pipeline entry points.
"""

from .ballsim import BallState, Dataset, generate_dataset, render, step
from .config import ExperimentConfig, desk_config, load_config, paper_config
from .errors import (
    ConfigError,
    DivergenceError,
    FormatError,
    InputError,
    ProtocolError,
    SlowVaeError,
)
from .gaussians import (
    DiagonalGaussian,
    brownian_prior,
    difference_distribution,
    kl_to_standard_normal,
    similarity_loss,
)
from .nn import DenseNet, OptimizerState, Rng
from .training import (
    Checkpoint,
    DownstreamHead,
    HeadConfig,
    TrainConfig,
    predict,
    train_downstream,
    train_representation,
)
from .vae import LossBreakdown, VaeModel, decode, encode, pair_loss

__version__ = "0.1.0"
