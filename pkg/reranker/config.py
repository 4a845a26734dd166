"""
EdgeRec Configuration

Flat key/value configuration shared by every command. Values resolve in three
layers: built-in defaults, an optional config file (KEY=VALUE lines, parsed
with python-dotenv) and environment variables prefixed ``EDGEREC_``.
The canonical rendering of the resolved values is hashed and the hash is
stamped into logs, bundles and reports.
"""

import dataclasses
import hashlib
import logging
import os
from dataclasses import dataclass

import numpy as np
from django.conf import settings
from dotenv import dotenv_values

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

ENV_PREFIX = 'EDGEREC_'

# Numeric action features that are bucketized, with the (low, high) range used
# to generate logarithmic boundaries when none are configured explicitly.
BUCKETIZED_FEATURES = {
    'exposure_duration_ms': (100.0, 60000.0),
    'exposure_count': (1.0, 20.0),
    'scroll_speed_max': (50.0, 8000.0),
    'scroll_duration_max_ms': (50.0, 10000.0),
    'scroll_count': (1.0, 30.0),
    'expose_decay_ms': (500.0, 1800000.0),
    'ipv_duration_ms': (1000.0, 300000.0),
    'ipv_decay_ms': (500.0, 1800000.0),
}

ITEM_TABLES = ('category', 'brand', 'gender', 'price_level', 'age_level', 'bc_type')


@dataclass
class EdgeRecConfig:
    """
    Every documented configuration key. Field names upper-cased are the keys
    accepted in config files and (with the EDGEREC_ prefix) in the environment.
    """

    # Sequence and page geometry
    max_ie_length: int = 64
    max_ipv_length: int = 32
    candidate_count: int = 100
    page_size: int = 50
    k_expose: int = 10

    # Feature system
    bucket_count: int = 8
    boundaries_exposure_duration_ms: tuple = ()
    boundaries_exposure_count: tuple = ()
    boundaries_scroll_speed_max: tuple = ()
    boundaries_scroll_duration_max_ms: tuple = ()
    boundaries_scroll_count: tuple = ()
    boundaries_expose_decay_ms: tuple = ()
    boundaries_ipv_duration_ms: tuple = ()
    boundaries_ipv_decay_ms: tuple = ()
    emb_dim_category: int = 16
    emb_dim_brand: int = 40
    emb_dim_gender: int = 8
    emb_dim_price_level: int = 8
    emb_dim_age_level: int = 8
    emb_dim_bc_type: int = 8
    vocab_category: int = 50
    vocab_brand: int = 200
    vocab_gender: int = 3
    vocab_price_level: int = 10
    vocab_age_level: int = 8
    vocab_bc_type: int = 2
    score_count: int = 2

    # Network shape
    gru_layers: int = 3
    gru_hidden: int = 32
    attention_hidden: int = 32
    mlp_hidden: tuple = (32, 32)
    mlp_input: str = 'encoding'
    init_scale: float = 0.08

    # Trainer
    batch_size: int = 256
    learning_rate: float = 0.005
    max_epochs: int = 20
    patience: int = 2
    validation_fraction: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8

    # Cloud recommender
    retained_versions: int = 3
    catalog_items: int = 10000
    catalog_categories: int = 50
    catalog_brands: int = 200
    cloud_noise: float = 0.5

    # Session simulator
    sim_users: int = 2000
    sim_pages: int = 2
    sim_base_logit: float = -3.2
    sim_affinity_weight: float = 1.5
    sim_affinity_concentration: float = 0.3
    sim_click_boost: float = 1.5
    sim_boost_decay: float = 0.93
    sim_fatigue_rate: float = 0.4
    sim_fatigue_decay: float = 0.96
    sim_delete_rate: float = 0.015
    sim_buy_rate: float = 0.2

    seed: int = 7

    def __post_init__(self):
        self.validate()

    # ------------------------------------------------------------------
    # Construction

    @classmethod
    def keys(cls):
        return [f.name.upper() for f in dataclasses.fields(cls)]

    @classmethod
    def load(cls, path=None, environ=None):
        """
        Resolve configuration from defaults, a config file and the environment.

        Args:
            path: Config file path. Falls back to settings.EDGEREC_CONFIG_FILE.
            environ: Mapping used instead of os.environ (tests).

        Returns:
            EdgeRecConfig
        """
        values = {}
        path = path or getattr(settings, 'EDGEREC_CONFIG_FILE', '')
        if path:
            if not os.path.exists(path):
                raise ConfigError(f"Config file not found: {path}")
            for key, raw in dotenv_values(path).items():
                values[key.upper()] = raw
            logger.info(f"Loaded config file {path} ({len(values)} keys)")

        environ = os.environ if environ is None else environ
        for key, raw in environ.items():
            if key.startswith(ENV_PREFIX) and key[len(ENV_PREFIX):] in cls.keys():
                values[key[len(ENV_PREFIX):]] = raw

        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values):
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            name = key.lower()
            if name not in known:
                raise ConfigError(f"Unknown config key: {key}")
            kwargs[name] = _parse_value(name, raw, known[name].default)
        return cls(**kwargs)

    @classmethod
    def production_profile(cls, **overrides):
        """Production-scale network and batch sizes; desk-scale everything else."""
        params = dict(
            batch_size=512,
            learning_rate=0.005,
            gru_layers=3,
            gru_hidden=32,
            attention_hidden=32,
            mlp_hidden=(32, 32),
        )
        params.update(overrides)
        return cls(**params)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    # ------------------------------------------------------------------
    # Validation and hashing

    def validate(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                continue
            if f.name.startswith(('sim_', 'cloud_', 'adam_')) or f.name in ('seed', 'init_scale'):
                continue
            if isinstance(value, (int, float)) and value <= 0:
                raise ConfigError(f"{f.name.upper()} must be positive, got {value}")
        if self.mlp_input not in ('encoding', 'raw'):
            raise ConfigError(f"MLP_INPUT must be 'encoding' or 'raw', got {self.mlp_input!r}")
        if not self.mlp_hidden or any(width <= 0 for width in self.mlp_hidden):
            raise ConfigError("MLP_HIDDEN must list positive layer widths")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("VALIDATION_FRACTION must lie in (0, 1)")
        if self.page_size > self.candidate_count:
            raise ConfigError("PAGE_SIZE cannot exceed CANDIDATE_COUNT")
        if self.catalog_categories > self.vocab_category or self.catalog_brands > self.vocab_brand:
            raise ConfigError("Catalog category/brand counts exceed their vocabularies")
        for name in BUCKETIZED_FEATURES:
            bounds = getattr(self, f'boundaries_{name}')
            if any(b >= a for b, a in zip(bounds, bounds[1:])):
                raise ConfigError(f"BOUNDARIES_{name.upper()} must be strictly ascending")

    def as_flat_dict(self):
        flat = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ','.join(repr(v) for v in value)
            flat[f.name.upper()] = str(value)
        return flat

    def render(self):
        return '\n'.join(f'{k}={v}' for k, v in sorted(self.as_flat_dict().items())) + '\n'

    def config_hash(self):
        return hashlib.sha256(self.render().encode('utf-8')).hexdigest()[:16]

    # ------------------------------------------------------------------
    # Derived views

    def boundaries(self, name):
        explicit = getattr(self, f'boundaries_{name}')
        if explicit:
            return tuple(float(b) for b in explicit)
        low, high = BUCKETIZED_FEATURES[name]
        return log_boundaries(low, high, self.bucket_count)

    def feature_config(self):
        from .feature_codec import FeatureConfig
        return FeatureConfig(
            boundaries={name: self.boundaries(name) for name in BUCKETIZED_FEATURES},
            embedding_dims={t: getattr(self, f'emb_dim_{t}') for t in ITEM_TABLES},
            vocab_sizes={t: getattr(self, f'vocab_{t}') for t in ITEM_TABLES},
            score_count=self.score_count,
        )

    def model_dims(self):
        return ModelDims(
            gru_layers=self.gru_layers,
            gru_hidden=self.gru_hidden,
            attention_hidden=self.attention_hidden,
            mlp_hidden=tuple(self.mlp_hidden),
            mlp_input=self.mlp_input,
            init_scale=self.init_scale,
            max_ie_length=self.max_ie_length,
            max_ipv_length=self.max_ipv_length,
        )

    def training_hyper(self):
        return TrainingHyper(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            max_epochs=self.max_epochs,
            patience=self.patience,
            validation_fraction=self.validation_fraction,
            beta1=self.adam_beta1,
            beta2=self.adam_beta2,
            epsilon=self.adam_epsilon,
            seed=self.seed,
        )

    def simulator_params(self):
        return SimulatorParams(**{
            f.name: getattr(self, f'sim_{f.name}') for f in dataclasses.fields(SimulatorParams)
        })


@dataclass(frozen=True)
class ModelDims:
    gru_layers: int = 3
    gru_hidden: int = 32
    attention_hidden: int = 32
    mlp_hidden: tuple = (32, 32)
    mlp_input: str = 'encoding'
    init_scale: float = 0.08
    max_ie_length: int = 64
    max_ipv_length: int = 32

    def to_manifest(self):
        data = dataclasses.asdict(self)
        data['mlp_hidden'] = list(self.mlp_hidden)
        return data

    @classmethod
    def from_manifest(cls, data):
        data = dict(data)
        data['mlp_hidden'] = tuple(data['mlp_hidden'])
        return cls(**data)


@dataclass(frozen=True)
class TrainingHyper:
    batch_size: int = 256
    learning_rate: float = 0.005
    max_epochs: int = 20
    patience: int = 2
    validation_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 7


@dataclass(frozen=True)
class SimulatorParams:
    users: int = 2000
    pages: int = 2
    base_logit: float = -3.2
    affinity_weight: float = 1.5
    affinity_concentration: float = 0.3
    click_boost: float = 1.5
    boost_decay: float = 0.93
    fatigue_rate: float = 0.4
    fatigue_decay: float = 0.96
    delete_rate: float = 0.015
    buy_rate: float = 0.2


def log_boundaries(low, high, count):
    """`count` strictly ascending boundaries spaced evenly in log space."""
    return tuple(float(b) for b in np.geomspace(low, high, count))


def _parse_value(name, raw, default):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return raw.lower() in ('1', 'true', 'yes')
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if not raw:
                return ()
            cast = int if name == 'mlp_hidden' else float
            return tuple(cast(part) for part in raw.split(','))
    except ValueError as e:
        raise ConfigError(f"Bad value for {name.upper()}: {raw!r} ({e})") from e
    return raw
