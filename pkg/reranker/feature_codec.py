"""
Feature Codec

Turns raw edge events and cloud item attributes into the fixed-width numeric
vectors the networks consume:

- item exposure action vector (exposure stats, scroll stats, delete reason, decay)
- item page-view action vector (duration, ten block flags, decay)
- item feature vector (six embedding lookups followed by the raw ranker scores)

Numeric action features are bucketized into one-hot blocks; boundaries travel
with the model bundle so encoders on device and in training always agree.
"""

import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .config import ITEM_TABLES
from .exceptions import EmbeddingLookupError, FeatureEncodingError

logger = logging.getLogger(__name__)

# Position 0 means "not deleted".
DELETE_REASONS = ('none', 'not_interested', 'seen_similar', 'poor_quality', 'other')

PAGEVIEW_FLAGS = (
    'cart', 'buy', 'favorite', 'comment', 'select_sku',
    'wdj', 'wangwang', 'detail', 'shop', 'recommendation',
)

EXPOSURE_BUCKETIZED = (
    'exposure_duration_ms', 'exposure_count', 'scroll_speed_max',
    'scroll_duration_max_ms', 'scroll_count',
)

ITEM_INDEX_FIELDS = {
    'category': 'category_id',
    'brand': 'brand_id',
    'gender': 'gender_id',
    'price_level': 'price_level',
    'age_level': 'age_level',
    'bc_type': 'bc_type',
}


@dataclass(frozen=True)
class ExposureAction:
    exposure_duration_ms: int = 0
    exposure_count: int = 1
    scroll_speed_max: float = 0.0
    scroll_duration_max_ms: int = 0
    scroll_count: int = 0
    delete_reason: str = 'none'
    expose_decay_ms: int = 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass(frozen=True)
class PageViewAction:
    ipv_duration_ms: int = 0
    flags: tuple = (0,) * len(PAGEVIEW_FLAGS)
    ipv_decay_ms: int = 0

    def flag(self, name):
        return self.flags[PAGEVIEW_FLAGS.index(name)]

    def active_flags(self):
        return [name for name, value in zip(PAGEVIEW_FLAGS, self.flags) if value]

    def to_dict(self):
        return {
            'ipv_duration_ms': self.ipv_duration_ms,
            'flags': list(self.flags),
            'ipv_decay_ms': self.ipv_decay_ms,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            ipv_duration_ms=data['ipv_duration_ms'],
            flags=tuple(int(v) for v in data['flags']),
            ipv_decay_ms=data['ipv_decay_ms'],
        )

    @classmethod
    def with_flags(cls, ipv_duration_ms=0, ipv_decay_ms=0, **flags):
        unknown = set(flags) - set(PAGEVIEW_FLAGS)
        if unknown:
            raise FeatureEncodingError(f"Unknown page-view flags: {sorted(unknown)}")
        values = tuple(1 if flags.get(name) else 0 for name in PAGEVIEW_FLAGS)
        return cls(ipv_duration_ms=ipv_duration_ms, flags=values, ipv_decay_ms=ipv_decay_ms)


@dataclass(frozen=True)
class ItemAttributes:
    item_id: int
    category_id: int = 0
    brand_id: int = 0
    gender_id: int = 0
    price_level: int = 0
    age_level: int = 0
    bc_type: int = 0
    scores: tuple = ()
    # Synthetic list price; only the GMV proxy reads it.
    price: float = 0.0

    def index_for(self, table):
        return getattr(self, ITEM_INDEX_FIELDS[table])

    def indices(self):
        return tuple(self.index_for(table) for table in ITEM_TABLES)

    def to_dict(self):
        data = asdict(self)
        data['scores'] = list(self.scores)
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data['scores'] = tuple(float(s) for s in data.get('scores', ()))
        return cls(**data)


@dataclass(frozen=True)
class ResolvedItem:
    """An item as shipped from the cloud: attributes plus its embedding rows."""
    attrs: ItemAttributes
    embeddings: dict = field(default_factory=dict)

    @property
    def item_id(self):
        return self.attrs.item_id


@dataclass
class FeatureConfig:
    boundaries: dict
    embedding_dims: dict
    vocab_sizes: dict
    score_count: int

    @property
    def ie_dim(self):
        blocks = sum(len(self.boundaries[name]) + 1 for name in EXPOSURE_BUCKETIZED)
        return blocks + len(DELETE_REASONS) + len(self.boundaries['expose_decay_ms']) + 1

    @property
    def ipv_dim(self):
        return (len(self.boundaries['ipv_duration_ms']) + 1
                + len(PAGEVIEW_FLAGS)
                + len(self.boundaries['ipv_decay_ms']) + 1)

    @property
    def item_dim(self):
        return sum(self.embedding_dims[t] for t in ITEM_TABLES) + self.score_count

    def to_manifest(self):
        return {
            'boundaries': {k: list(v) for k, v in self.boundaries.items()},
            'embedding_dims': dict(self.embedding_dims),
            'vocab_sizes': dict(self.vocab_sizes),
            'score_count': self.score_count,
        }

    @classmethod
    def from_manifest(cls, data):
        return cls(
            boundaries={k: tuple(float(b) for b in v) for k, v in data['boundaries'].items()},
            embedding_dims={k: int(v) for k, v in data['embedding_dims'].items()},
            vocab_sizes={k: int(v) for k, v in data['vocab_sizes'].items()},
            score_count=int(data['score_count']),
        )

    def validate_item(self, attrs):
        for table in ITEM_TABLES:
            index = attrs.index_for(table)
            if not 0 <= index < self.vocab_sizes[table]:
                raise FeatureEncodingError(
                    f"Item {attrs.item_id}: {table} index {index} outside vocabulary "
                    f"of size {self.vocab_sizes[table]}"
                )
        if len(attrs.scores) != self.score_count:
            raise FeatureEncodingError(
                f"Item {attrs.item_id}: expected {self.score_count} scores, got {len(attrs.scores)}"
            )


def bucketize(value, boundaries):
    """
    One-hot bucket membership over half-open intervals [b_i, b_{i+1}).

    Args:
        value: Non-negative real
        boundaries: Strictly ascending boundaries

    Returns:
        np.ndarray: length len(boundaries) + 1 with a single 1.0
    """
    if not math.isfinite(value):
        raise FeatureEncodingError(f"Cannot bucketize non-finite value {value!r}")
    if value < 0:
        raise FeatureEncodingError(f"Cannot bucketize negative value {value!r}")
    if any(b <= a for a, b in zip(boundaries, boundaries[1:])):
        raise FeatureEncodingError(f"Bucket boundaries must be strictly ascending: {tuple(boundaries)}")
    out = np.zeros(len(boundaries) + 1)
    out[int(np.searchsorted(boundaries, value, side='right'))] = 1.0
    return out


def encode_exposure_action(action, cfg):
    """Item exposure action vector (e1..e7)."""
    if action.delete_reason not in DELETE_REASONS:
        raise FeatureEncodingError(f"Unknown delete reason: {action.delete_reason!r}")
    blocks = [bucketize(getattr(action, name), cfg.boundaries[name]) for name in EXPOSURE_BUCKETIZED]
    delete_block = np.zeros(len(DELETE_REASONS))
    delete_block[DELETE_REASONS.index(action.delete_reason)] = 1.0
    blocks.append(delete_block)
    blocks.append(bucketize(action.expose_decay_ms, cfg.boundaries['expose_decay_ms']))
    return np.concatenate(blocks)


def encode_pageview_action(action, cfg):
    """Item page-view action vector (d1..d12)."""
    if len(action.flags) != len(PAGEVIEW_FLAGS) or any(v not in (0, 1) for v in action.flags):
        raise FeatureEncodingError("Page-view flags must be exactly ten 0/1 values")
    return np.concatenate([
        bucketize(action.ipv_duration_ms, cfg.boundaries['ipv_duration_ms']),
        np.asarray(action.flags, dtype=float),
        bucketize(action.ipv_decay_ms, cfg.boundaries['ipv_decay_ms']),
    ])


def encode_item(attrs, emb):
    """
    Item feature vector from the monolithic embedding tables.

    Args:
        attrs: ItemAttributes
        emb: Mapping table name -> 2-D array of rows

    Returns:
        np.ndarray: six embedding rows followed by the raw scores
    """
    rows = []
    for table in ITEM_TABLES:
        matrix = emb.get(table)
        if matrix is None:
            raise EmbeddingLookupError(f"Embedding table '{table}' missing")
        index = attrs.index_for(table)
        if not 0 <= index < matrix.shape[0]:
            raise EmbeddingLookupError(
                f"No row {index} in embedding table '{table}' (item {attrs.item_id})"
            )
        rows.append(matrix[index])
    rows.append(np.asarray(attrs.scores, dtype=float))
    return np.concatenate(rows)


def encode_resolved_item(item):
    """Item feature vector from rows shipped with a page response."""
    rows = []
    for table in ITEM_TABLES:
        row = item.embeddings.get(table)
        if row is None:
            raise EmbeddingLookupError(
                f"Item {item.item_id} arrived without a '{table}' embedding row"
            )
        rows.append(np.asarray(row, dtype=float))
    rows.append(np.asarray(item.attrs.scores, dtype=float))
    return np.concatenate(rows)


def resolve_item(attrs, emb):
    """Cut the rows an item needs out of full tables (the cloud side of a page)."""
    embeddings = {}
    for table in ITEM_TABLES:
        matrix = emb.get(table)
        index = attrs.index_for(table)
        if matrix is None or not 0 <= index < matrix.shape[0]:
            raise EmbeddingLookupError(
                f"No row {index} in embedding table '{table}' (item {attrs.item_id})"
            )
        embeddings[table] = matrix[index].copy()
    return ResolvedItem(attrs=attrs, embeddings=embeddings)
