"""Experiment configuration: YAML loading, validation, defaults, and the
derived per-run TrainConfig/HeadConfig objects.

Loss-weight defaults: the reference weights (beta = 1e-6, lambda = 1e-5)
calibrate the regularizers against a pixel-sum reconstruction term on
100 x 100 frames. When ``beta``/``lambda`` are left null they are scaled by
(W * H) / 10000 so the regularizer-to-reconstruction ratio is preserved at
other resolutions; the resolved values are recorded in every checkpoint.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import yaml

from .errors import ConfigError
from .training import SUBSET_FRACTIONS, HeadConfig, TrainConfig

REFERENCE_PIXELS = 100 * 100
BASE_BETA = 1e-6
BASE_LAMBDA = 1e-5

METHODS = ("svae", "bvae")


@dataclass(frozen=True)
class DatasetSection:
    width: int = 32
    height: int = 32
    radius: float = 2.0
    speed_min: float = 1.0
    speed_max: float = 4.0
    n_sequences: int = 2000
    sequence_length: int = 20
    seed: int = 2024


@dataclass(frozen=True)
class RepresentationSection:
    latent_dim: int = 2
    encoder_hidden: tuple = (64, 64)
    decoder_hidden: tuple = (64, 64)
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 30
    symmetric_beta: bool = True
    beta: float | None = None     # null -> BASE_BETA scaled to the frame size
    lam: float | None = None      # null -> BASE_LAMBDA scaled to the frame size


@dataclass(frozen=True)
class DownstreamSection:
    head_hidden: tuple = (50, 50, 50)
    learning_rate: float = 1e-3
    batch_size: int = 128
    steps: int = 3000
    subset_exponents: tuple = tuple(range(8))   # fractions 1 / 2**k
    seeds: tuple = tuple(range(12))


@dataclass(frozen=True)
class EvaluationSection:
    test_fraction: float = 0.1
    scatter_samples: int = 3000


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    representation: RepresentationSection = field(default_factory=RepresentationSection)
    downstream: DownstreamSection = field(default_factory=DownstreamSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def __post_init__(self):
        d = self.downstream
        if not d.seeds:
            raise ConfigError("downstream.seeds must be non-empty")
        if len(set(d.seeds)) != len(d.seeds):
            raise ConfigError("downstream.seeds contains duplicates")
        if not d.subset_exponents:
            raise ConfigError("downstream.subset_exponents must be non-empty")
        for k in d.subset_exponents:
            if int(k) != k or not 0 <= k <= 7:
                raise ConfigError(
                    f"subset fractions must be 1/2**k with k in 0..7, got exponent {k!r}"
                )
        if list(d.subset_exponents) != sorted(set(d.subset_exponents)):
            raise ConfigError("subset_exponents must be strictly increasing")
        e = self.evaluation
        if not 0.0 < e.test_fraction < 1.0:
            raise ConfigError("evaluation.test_fraction must be in (0, 1)")
        if e.scatter_samples < 1:
            raise ConfigError("evaluation.scatter_samples must be positive")

    @property
    def n_pixels(self):
        return self.dataset.width * self.dataset.height

    def resolved_beta(self):
        r = self.representation
        return r.beta if r.beta is not None else BASE_BETA * self.n_pixels / REFERENCE_PIXELS

    def resolved_lambda(self):
        r = self.representation
        return r.lam if r.lam is not None else BASE_LAMBDA * self.n_pixels / REFERENCE_PIXELS

    def subset_fractions(self):
        return tuple(SUBSET_FRACTIONS[k] for k in self.downstream.subset_exponents)

    def train_config(self, method, seed):
        if method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {method!r}")
        r = self.representation
        return TrainConfig(
            mode=method,
            beta=self.resolved_beta(),
            lam=self.resolved_lambda() if method == "svae" else 0.0,
            latent_dim=r.latent_dim,
            encoder_hidden=tuple(r.encoder_hidden),
            decoder_hidden=tuple(r.decoder_hidden),
            learning_rate=r.learning_rate,
            batch_size=r.batch_size,
            epochs=r.epochs,
            seed=int(seed),
            symmetric_beta=r.symmetric_beta,
        )

    def head_config(self, seed):
        d = self.downstream
        return HeadConfig(
            hidden=tuple(d.head_hidden),
            learning_rate=d.learning_rate,
            batch_size=d.batch_size,
            steps=d.steps,
            seed=int(seed),
        )

    def to_dict(self):
        out = asdict(self)
        for section in out.values():
            for key, value in section.items():
                if isinstance(value, tuple):
                    section[key] = list(value)
        out["representation"]["lambda"] = out["representation"].pop("lam")
        return out


def desk_config(**overrides):
    """The small-scale default profile (32x32 arena, 2000 sequences)."""
    return _build_config({}, **overrides)


def paper_config(**overrides):
    """The full-scale profile: 100x100 arena, 10000 sequences, wide networks."""
    base = {
        "dataset": {
            "width": 100,
            "height": 100,
            "radius": 5.0,
            "n_sequences": 10000,
        },
        "representation": {
            "encoder_hidden": [300, 300, 300, 300],
            "decoder_hidden": [300, 300, 300, 300],
        },
    }
    return _build_config(base, **overrides)


def _section_from_dict(cls, data, name):
    known = set(cls.__dataclass_fields__)
    data = dict(data or {})
    if name == "representation" and "lambda" in data:
        data["lam"] = data.pop("lambda")
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    coerced = {}
    for fname, value in data.items():
        if isinstance(cls.__dataclass_fields__[fname].default, tuple):
            value = tuple(value)
        coerced[fname] = value
    return cls(**coerced)


def config_from_dict(data):
    data = dict(data or {})
    unknown = set(data) - {"dataset", "representation", "downstream", "evaluation"}
    if unknown:
        raise ConfigError(f"unknown top-level config sections: {sorted(unknown)}")
    return ExperimentConfig(
        dataset=_section_from_dict(DatasetSection, data.get("dataset"), "dataset"),
        representation=_section_from_dict(
            RepresentationSection, data.get("representation"), "representation"
        ),
        downstream=_section_from_dict(DownstreamSection, data.get("downstream"), "downstream"),
        evaluation=_section_from_dict(EvaluationSection, data.get("evaluation"), "evaluation"),
    )


def _build_config(base, **overrides):
    merged = {k: dict(v) for k, v in base.items()}
    for section, values in overrides.items():
        merged.setdefault(section, {}).update(values)
    return config_from_dict(merged)


def load_config(path):
    """Load an ExperimentConfig from a YAML document; missing keys fall back
    to the desk-scale defaults."""
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    try:
        return config_from_dict(data)
    except TypeError as err:
        raise ConfigError(f"{path}: {err}") from err


def save_config(config, path):
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False)
