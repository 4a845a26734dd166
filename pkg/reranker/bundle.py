"""
Model Bundles

A trained model is one flat parameter mapping split into three parts by name
prefix:

- part 1 ``hubsm.*``  behavior encoders (device)
- part 2 ``crban.*``  candidate GRU, attention and MLP (device)
- part 3 ``emb.*``    embedding tables (cloud key-value store)

``ModelBundle`` carries all three plus the manifest. ``EdgeRecModel`` serves
from the monolithic tables; ``DeviceModel`` holds parts 1 and 2 only and reads
embedding rows shipped with each page.
"""

import json
import logging
from dataclasses import dataclass

import numpy as np

from .config import ITEM_TABLES, ModelDims
from .crban import CrbanScorer, variant_spec
from .exceptions import ConfigError, DimensionMismatchError, EmbeddingLookupError
from .feature_codec import FeatureConfig, encode_item, encode_resolved_item
from .hubsm import IE, IPV, BehaviorContext, HubsmEncoder
from .nn_core import DTYPE, GRU_CONVENTION, init_uniform, tensor_from_record, tensor_to_record

logger = logging.getLogger(__name__)

PART_BEHAVIOR = 'hubsm'
PART_RERANK = 'crban'
PART_EMBEDDING = 'emb'
DEVICE_PARTS = (PART_BEHAVIOR, PART_RERANK)


def part_of(name):
    return name.split('.', 1)[0]


def table_param(table):
    return f'{PART_EMBEDDING}.{table}'


@dataclass(frozen=True)
class BundleManifest:
    version: int
    variant: str
    feature_config: FeatureConfig
    dims: ModelDims
    config_hash: str = ''
    gru_convention: str = GRU_CONVENTION

    def to_dict(self):
        return {
            'version': self.version,
            'variant': self.variant,
            'feature_config': self.feature_config.to_manifest(),
            'dims': self.dims.to_manifest(),
            'config_hash': self.config_hash,
            'gru_convention': self.gru_convention,
        }

    @classmethod
    def from_dict(cls, data):
        from .serializers import BundleManifestSerializer

        serializer = BundleManifestSerializer(data=data)
        if not serializer.is_valid():
            raise ConfigError(f"Invalid bundle manifest: {serializer.errors}")
        data = serializer.validated_data
        if data['gru_convention'] != GRU_CONVENTION:
            raise ConfigError(f"Unsupported GRU convention: {data['gru_convention']!r}")
        return cls(
            version=data['version'],
            variant=data['variant'],
            feature_config=FeatureConfig.from_manifest(data['feature_config']),
            dims=ModelDims.from_manifest(data['dims']),
            config_hash=data.get('config_hash', ''),
            gru_convention=data['gru_convention'],
        )

    def with_version(self, version):
        return BundleManifest(version, self.variant, self.feature_config, self.dims,
                              self.config_hash, self.gru_convention)


class ServingModel:
    """Shared scoring interface: ``hubsm``, ``crban`` and ``item_vector``."""

    def __init__(self, manifest, params, tables=None):
        self.manifest = manifest
        self.params = params
        self.tables = tables
        self.spec = variant_spec(manifest.variant)
        self.feature_cfg = manifest.feature_config
        self.dims = manifest.dims
        self.hubsm = None
        if self.spec.uses_behaviors:
            self.hubsm = HubsmEncoder(
                params, self.feature_cfg, self.spec.branches, self.spec.behavior_mode,
                tables=tables,
                max_lengths={IE: self.dims.max_ie_length, IPV: self.dims.max_ipv_length},
            )
        self.crban = CrbanScorer(params, self.spec, self.dims.mlp_input)

    @property
    def version(self):
        return self.manifest.version

    @property
    def variant(self):
        return self.manifest.variant

    def item_vector(self, item):
        if self.tables is not None:
            return encode_item(item.attrs, self.tables)
        return encode_resolved_item(item)

    def new_context(self):
        return BehaviorContext(self.hubsm) if self.hubsm is not None else None


class EdgeRecModel(ServingModel):
    """The monolithic model as trained: every part including embedding tables."""

    def __init__(self, manifest, params):
        tables = {table: params[table_param(table)] for table in ITEM_TABLES}
        super().__init__(manifest, params, tables=tables)

    @classmethod
    def initialize(cls, manifest, seed):
        """Fresh parameters for a variant, drawn from a seeded generator."""
        rng = np.random.default_rng(seed)
        feature_cfg, dims = manifest.feature_config, manifest.dims
        spec = variant_spec(manifest.variant)
        params = {}
        for table in ITEM_TABLES:
            params[table_param(table)] = init_uniform(
                rng, (feature_cfg.vocab_sizes[table], feature_cfg.embedding_dims[table]),
                dims.init_scale)
        value_dim = 0
        if spec.uses_behaviors:
            params.update(HubsmEncoder.init_params(
                rng, feature_cfg, dims, spec.branches, spec.behavior_mode))
            value_dim = 2 * dims.gru_hidden if spec.behavior_mode == 'hubsm' else dims.gru_hidden
        params.update(CrbanScorer.init_params(rng, spec, feature_cfg.item_dim, value_dim, dims))
        return cls(manifest, params)

    def copy_params(self):
        return {name: value.copy() for name, value in self.params.items()}


class DeviceModel(ServingModel):
    """Parts 1 and 2; holds zero embedding matrices."""

    def __init__(self, manifest, params):
        tables = [name for name in params if part_of(name) == PART_EMBEDDING]
        if tables:
            raise DimensionMismatchError(f"Device model must not carry embedding tables: {tables}")
        super().__init__(manifest, params, tables=None)

    def payload_bytes(self):
        return sum(value.nbytes for value in self.params.values())


@dataclass
class ModelBundle:
    manifest: BundleManifest
    params: dict

    @property
    def version(self):
        return self.manifest.version

    @property
    def variant(self):
        return self.manifest.variant

    def part(self, name):
        return {k: v for k, v in self.params.items() if part_of(k) == name}

    def device_params(self):
        return {k: v for k, v in self.params.items() if part_of(k) in DEVICE_PARTS}

    def embedding_tables(self):
        """Part 3 keyed by table name (not parameter name)."""
        return {table: self.params[table_param(table)] for table in ITEM_TABLES}

    def device_model(self):
        return DeviceModel(self.manifest, {k: v.copy() for k, v in self.device_params().items()})

    def monolithic(self):
        return EdgeRecModel(self.manifest, {k: v.copy() for k, v in self.params.items()})

    def equals(self, other):
        """Exact equality of manifest and every tensor."""
        if self.manifest.to_dict() != other.manifest.to_dict():
            return False
        if set(self.params) != set(other.params):
            return False
        return all(np.array_equal(self.params[k], other.params[k]) for k in self.params)

    # ------------------------------------------------------------------
    # Files

    def to_document(self, names=None):
        names = sorted(self.params) if names is None else sorted(names)
        return {
            'manifest': self.manifest.to_dict(),
            'tensors': [tensor_to_record(name, self.params[name]) for name in names],
        }

    def save(self, path):
        _write_document(path, self.to_document())
        logger.info(f"Wrote bundle v{self.version} ({self.variant}) to {path}")

    def save_device_part(self, path):
        _write_document(path, self.to_document(self.device_params()))

    def save_embedding_part(self, path):
        _write_document(path, self.to_document(self.part(PART_EMBEDDING)))

    @classmethod
    def from_document(cls, document):
        manifest = BundleManifest.from_dict(document['manifest'])
        params = dict(tensor_from_record(record) for record in document['tensors'])
        return cls(manifest, params)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            document = json.load(fh)
        return cls.from_document(document)


def split(bundle):
    """
    Partition a bundle into its device part and its embedding tables.

    Returns:
        tuple: (device params, embedding tables keyed by table name)
    """
    return bundle.device_params(), bundle.embedding_tables()


def reconstruct(manifest, device_params, tables):
    """Inverse of split(): reassemble the monolithic parameter set."""
    params = dict(device_params)
    for table in ITEM_TABLES:
        if table not in tables:
            raise EmbeddingLookupError(f"Embedding table '{table}' missing from reconstruction")
        params[table_param(table)] = np.asarray(tables[table], dtype=DTYPE)
    return ModelBundle(manifest, params)


def _write_document(path, document):
    with open(path, 'w') as fh:
        json.dump(document, fh)
