"""
Cloud Recommender Service

The cloud half of the system, run in-process:

- a seeded synthetic item catalog
- a recall + initial-ranking stub standing in for the cloud ranking stack
- the versioned embedding store that every page response is resolved against

Embedding rows travel with each candidate in a page response; devices never
receive whole tables.
"""

import logging
import threading
from dataclasses import dataclass, replace

import numpy as np
from django.db import transaction as db_transaction

from .bundle import BundleManifest, DeviceModel, ModelBundle
from .config import ITEM_TABLES
from .exceptions import EmbeddingLookupError, UnknownUserError, VersionConflictError
from .feature_codec import ItemAttributes, ResolvedItem, resolve_item
from .nn_core import DTYPE, sigmoid

logger = logging.getLogger(__name__)


class Catalog:
    """Synthetic items; ``categories`` / ``quality`` are aligned with item ids."""

    def __init__(self, items, quality):
        self.items = items
        self.quality = quality
        self.categories = np.array([item.category_id for item in items])
        self.brands = np.array([item.brand_id for item in items])

    def __len__(self):
        return len(self.items)

    def __getitem__(self, item_id):
        return self.items[item_id]

    @classmethod
    def generate(cls, cfg, seed=None):
        rng = np.random.default_rng([cfg.seed if seed is None else seed, 0])
        n = cfg.catalog_items
        categories = rng.integers(0, cfg.catalog_categories, size=n)
        # Each category draws its brands from its own slice of the brand space.
        brand_span = max(1, cfg.catalog_brands // cfg.catalog_categories)
        brands = (categories * brand_span + rng.integers(0, max(brand_span, 4), size=n)) % cfg.catalog_brands
        genders = rng.integers(0, cfg.vocab_gender, size=n)
        price_levels = rng.integers(0, cfg.vocab_price_level, size=n)
        age_levels = rng.integers(0, cfg.vocab_age_level, size=n)
        bc_types = rng.integers(0, cfg.vocab_bc_type, size=n)
        prices = 10.0 * 1.5 ** price_levels * rng.lognormal(0.0, 0.25, size=n)
        quality = rng.normal(0.0, 0.5, size=n)
        items = [
            ItemAttributes(
                item_id=i,
                category_id=int(categories[i]),
                brand_id=int(brands[i]),
                gender_id=int(genders[i]),
                price_level=int(price_levels[i]),
                age_level=int(age_levels[i]),
                bc_type=int(bc_types[i]),
                price=round(float(prices[i]), 2),
            )
            for i in range(n)
        ]
        logger.info(f"Generated catalog of {n} items over {cfg.catalog_categories} categories")
        return cls(items, quality)


@dataclass(frozen=True)
class StoredVersion:
    version: int
    manifest: BundleManifest
    tables: dict
    device_document: dict

    def row(self, table, index):
        matrix = self.tables.get(table)
        if matrix is None or not 0 <= index < matrix.shape[0]:
            raise EmbeddingLookupError(f"v{self.version}: no row {index} in table '{table}'")
        return matrix[index]


class EmbeddingStore:
    """
    Versioned embedding tables, one publisher and many readers.

    Publishing builds the complete new version map first and swaps it in under
    the lock, so readers see a version fully or not at all.
    """

    def __init__(self, retained_versions=3, persist=False):
        self.retained_versions = retained_versions
        self.persist = persist
        self._lock = threading.Lock()
        self._versions = {}
        self._newest = None

    def publish_version(self, bundle):
        """
        Store a bundle's embedding tables and device part under its version id.

        Raises:
            VersionConflictError: version id not greater than the newest published
        """
        stored = _stored_version(bundle)
        with self._lock:
            if self._newest is not None and bundle.version <= self._newest:
                raise VersionConflictError(
                    f"Version {bundle.version} is not newer than published v{self._newest}"
                )
            versions = dict(self._versions)
            versions[bundle.version] = stored
            evicted = sorted(versions)[:-self.retained_versions]
            for version in evicted:
                del versions[version]
            if self.persist:
                self._persist(stored, evicted)
            self._versions = versions
            self._newest = bundle.version
        logger.info(f"Published v{bundle.version} ({bundle.variant}); retained {sorted(versions)}")
        if evicted:
            logger.info(f"Evicted versions {evicted}")

    def versions(self):
        with self._lock:
            return sorted(self._versions)

    @property
    def newest_version(self):
        return self._newest

    def get(self, version):
        with self._lock:
            return self._versions.get(version)

    def resolve(self, requested):
        """
        Returns:
            tuple: (StoredVersion, fallback flag); exact match or newest with fallback
        """
        with self._lock:
            versions = self._versions
            newest = self._newest
        if not versions:
            raise EmbeddingLookupError("No model version has been published")
        if requested in versions:
            return versions[requested], False
        logger.warning(f"Version v{requested} not retained; falling back to v{newest}")
        return versions[newest], True

    def device_model(self, version=None):
        """The device download for a version (newest by default)."""
        stored = self.get(self._newest if version is None else version)
        if stored is None:
            raise EmbeddingLookupError(f"Version v{version} is not published")
        bundle = ModelBundle.from_document(stored.device_document)
        return DeviceModel(bundle.manifest, bundle.params)

    # ------------------------------------------------------------------
    # Database persistence

    @staticmethod
    def _persist(stored, evicted):
        from .models import EmbeddingRow, PublishedVersion

        with db_transaction.atomic():
            row = PublishedVersion(
                version=stored.version,
                variant=stored.manifest.variant,
                config_hash=stored.manifest.config_hash,
            )
            row.set_manifest(stored.manifest.to_dict())
            row.set_device_part(stored.device_document)
            row.save()
            EmbeddingRow.objects.bulk_create([
                EmbeddingRow(
                    version=row, table=table, index=index,
                    values=' '.join(format(float(v), '.17g') for v in matrix[index]),
                )
                for table, matrix in stored.tables.items()
                for index in range(matrix.shape[0])
            ])
            PublishedVersion.objects.filter(version__in=evicted).delete()

    @classmethod
    def from_database(cls, retained_versions=3):
        """Rebuild the in-memory read path from the persisted versions."""
        from .models import PublishedVersion

        store = cls(retained_versions=retained_versions, persist=True)
        rows = list(PublishedVersion.objects.order_by('-version')[:retained_versions])
        for published in reversed(rows):
            manifest = BundleManifest.from_dict(published.get_manifest())
            tables = {}
            for table in ITEM_TABLES:
                values = [
                    np.array(r.values.split(), dtype=DTYPE)
                    for r in published.rows.filter(table=table).order_by('index')
                ]
                tables[table] = _readonly(np.stack(values))
            store._versions[published.version] = StoredVersion(
                published.version, manifest, tables, published.get_device_part())
            store._newest = published.version
        logger.info(f"Loaded {len(store._versions)} versions from the database")
        return store


def _readonly(arr):
    arr = np.array(arr, dtype=DTYPE, copy=True)
    arr.setflags(write=False)
    return arr


def _stored_version(bundle):
    tables = {table: _readonly(matrix) for table, matrix in bundle.embedding_tables().items()}
    return StoredVersion(
        version=bundle.version,
        manifest=bundle.manifest,
        tables=tables,
        device_document=bundle.to_document(bundle.device_params()),
    )


@dataclass(frozen=True)
class PageResponse:
    request_id: str
    user: int
    items: tuple
    served_version: int = None
    fallback: bool = False

    @property
    def initial_scores(self):
        return [item.attrs.scores[0] for item in self.items]


class CloudRecommender:
    """
    Recall and initial ranking over the catalog, with per-user noisy affinity.

    The cloud sees a user's category affinity only through ``cloud_noise``;
    what the user does on device after a page is delivered is invisible to it.
    """

    def __init__(self, catalog, store, cfg):
        self.catalog = catalog
        self.store = store
        self.cfg = cfg
        self._profiles = {}
        self._page_counts = {}

    def register_user(self, user_id, category_affinity):
        rng = np.random.default_rng([self.cfg.seed, 1, user_id])
        noise = rng.normal(0.0, self.cfg.cloud_noise, size=len(category_affinity))
        self._profiles[user_id] = np.asarray(category_affinity, dtype=DTYPE) + noise
        self._page_counts[user_id] = 0

    def profile(self, user):
        if user not in self._profiles:
            raise UnknownUserError(f"User {user} is not registered with the cloud")
        return self._profiles[user]

    def recall(self, user, rng, count):
        """Sample ``count`` distinct item ids weighted by the user's noisy affinity."""
        logits = self.profile(user)[self.catalog.categories] + self.catalog.quality
        weights = np.exp(logits - logits.max())
        weights /= weights.sum()
        count = min(count, len(self.catalog))
        return rng.choice(len(self.catalog), size=count, replace=False, p=weights)

    def initial_rank(self, user, item_ids, rng=None, noise=None):
        """
        Score candidates and order them by score, descending.

        Returns:
            list: ItemAttributes with ``scores`` set, best first
        """
        profile = self.profile(user)
        item_ids = np.asarray(item_ids, dtype=int)
        logits = profile[self.catalog.categories[item_ids]] + self.catalog.quality[item_ids]
        noise = self.cfg.cloud_noise if noise is None else noise
        if rng is not None and noise > 0:
            logits = logits + rng.normal(0.0, noise, size=len(item_ids))
        ctr = sigmoid(logits)
        cvr = sigmoid(self.catalog.quality[item_ids] - 1.0)
        order = np.argsort(-ctr, kind='stable')
        ranked = []
        for i in order:
            scores = (float(ctr[i]), float(cvr[i])) + (0.0,) * self.cfg.score_count
            ranked.append(replace(self.catalog[int(item_ids[i])], scores=scores[:self.cfg.score_count]))
        return ranked

    def page(self, user, model_version=None):
        """
        Serve one page of candidates with embedding rows at the requested version.

        Args:
            user: Registered user id
            model_version: Device model version; None for a client without a model

        Returns:
            PageResponse
        """
        self.profile(user)
        page_index = self._page_counts[user]
        self._page_counts[user] = page_index + 1
        rng = np.random.default_rng([self.cfg.seed, 2, user, page_index])
        ranked = self.initial_rank(user, self.recall(user, rng, self.cfg.candidate_count), rng)
        request_id = f'p{user}-{page_index}'
        if model_version is None:
            items = tuple(ResolvedItem(attrs) for attrs in ranked)
            return PageResponse(request_id, user, items)
        stored, fallback = self.store.resolve(model_version)
        items = tuple(resolve_item(attrs, stored.tables) for attrs in ranked)
        return PageResponse(request_id, user, items, stored.version, fallback)
