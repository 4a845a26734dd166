import threading

import numpy as np
import numpy.testing as npt
from django.test import SimpleTestCase, TestCase

from reranker.bundle import ModelBundle, table_param
from reranker.cloud_service import Catalog, CloudRecommender, EmbeddingStore
from reranker.config import ITEM_TABLES
from reranker.exceptions import EmbeddingLookupError, UnknownUserError, VersionConflictError
from reranker.models import EmbeddingRow, PublishedVersion
from reranker.trainer import variant

from .helpers import tiny_config


def versioned_bundles(count, config=None, fill=True):
    """Bundles v1..v<count>; with ``fill`` every table entry of version v equals v."""
    model = variant('CRBAN+HUBSM(IE&IPV)', config or tiny_config(), seed=2)
    bundles = []
    for version in range(1, count + 1):
        params = {name: value.copy() for name, value in model.params.items()}
        if fill:
            for table in ITEM_TABLES:
                params[table_param(table)][...] = float(version)
        bundles.append(ModelBundle(model.manifest.with_version(version), params))
    return bundles


class EmbeddingStoreTests(SimpleTestCase):
    def setUp(self):
        self.store = EmbeddingStore(retained_versions=3)
        for bundle in versioned_bundles(4):
            self.store.publish_version(bundle)

    def test_retention_keeps_newest_versions(self):
        self.assertEqual(self.store.versions(), [2, 3, 4])
        self.assertEqual(self.store.newest_version, 4)

    def test_retained_versions_resolve_exactly(self):
        for version in (2, 3, 4):
            stored, fallback = self.store.resolve(version)
            self.assertFalse(fallback)
            self.assertEqual(stored.version, version)
            npt.assert_array_equal(stored.tables['brand'], float(version))

    def test_evicted_version_falls_back_to_newest(self):
        stored, fallback = self.store.resolve(1)
        self.assertTrue(fallback)
        self.assertEqual(stored.version, 4)

    def test_version_ids_must_increase(self):
        stale = versioned_bundles(3)[2]
        with self.assertRaises(VersionConflictError):
            self.store.publish_version(stale)
        with self.assertRaises(VersionConflictError):
            self.store.publish_version(versioned_bundles(4)[3])

    def test_empty_store(self):
        with self.assertRaises(EmbeddingLookupError):
            EmbeddingStore().resolve(1)

    def test_stored_tables_are_read_only_copies(self):
        bundle = versioned_bundles(5)[4]
        self.store.publish_version(bundle)
        bundle.params['emb.category'][0, 0] = -99.0
        stored, _ = self.store.resolve(5)
        self.assertEqual(stored.tables['category'][0, 0], 5.0)
        with self.assertRaises(ValueError):
            stored.tables['category'][0, 0] = 1.0

    def test_missing_row(self):
        stored, _ = self.store.resolve(4)
        with self.assertRaises(EmbeddingLookupError):
            stored.row('brand', 10 ** 6)

    def test_device_download_matches_bundle(self):
        bundle = versioned_bundles(4)[3]
        device = self.store.device_model(4)
        self.assertEqual(set(device.params), set(bundle.device_params()))
        for name, value in device.params.items():
            npt.assert_array_equal(value, bundle.params[name])

    def test_readers_never_see_a_partial_version(self):
        store = EmbeddingStore(retained_versions=3)
        bundles = versioned_bundles(40)
        store.publish_version(bundles[0])
        done = threading.Event()
        reads = []
        errors = []

        def reader():
            count = 0
            while not done.is_set() or count < 300:
                stored, _ = store.resolve(store.newest_version)
                for table in ITEM_TABLES:
                    if not np.all(stored.tables[table] == float(stored.version)):
                        errors.append((stored.version, table))
                count += 1
            reads.append(count)

        threads = [threading.Thread(target=reader) for _ in range(4)]
        for t in threads:
            t.start()
        for bundle in bundles[1:]:
            store.publish_version(bundle)
        done.set()
        for t in threads:
            t.join()
        self.assertEqual(errors, [])
        self.assertGreaterEqual(sum(reads), 1000)
        self.assertEqual(store.versions(), [38, 39, 40])


class CloudRecommenderTests(SimpleTestCase):
    def setUp(self):
        self.config = tiny_config()
        self.store = EmbeddingStore(self.config.retained_versions)
        self.bundle = versioned_bundles(1, self.config, fill=False)[0]
        self.store.publish_version(self.bundle)

    def cloud(self):
        cloud = CloudRecommender(Catalog.generate(self.config), self.store, self.config)
        cloud.register_user(0, np.linspace(-1, 1, self.config.catalog_categories))
        return cloud

    def test_catalog_is_seeded(self):
        a, b = Catalog.generate(self.config), Catalog.generate(self.config)
        self.assertEqual(a.items, b.items)
        c = Catalog.generate(self.config.replace(seed=99))
        self.assertNotEqual(a.items, c.items)
        self.assertEqual(len(a), self.config.catalog_items)

    def test_pages_are_deterministic(self):
        first = self.cloud().page(0, 1)
        second = self.cloud().page(0, 1)
        self.assertEqual([i.attrs for i in first.items], [i.attrs for i in second.items])

    def test_page_is_sorted_by_initial_score(self):
        response = self.cloud().page(0)
        self.assertEqual(len(response.items), self.config.candidate_count)
        scores = response.initial_scores
        self.assertEqual(scores, sorted(scores, reverse=True))
        for item in response.items:
            self.assertEqual(len(item.attrs.scores), self.config.score_count)
        self.assertEqual(len({i.item_id for i in response.items}), len(response.items))

    def test_page_without_model_has_no_rows(self):
        response = self.cloud().page(0)
        self.assertIsNone(response.served_version)
        self.assertEqual(response.items[0].embeddings, {})
        self.assertEqual(response.request_id, 'p0-0')

    def test_page_rows_come_from_the_served_version(self):
        response = self.cloud().page(0, 1)
        self.assertEqual(response.served_version, 1)
        self.assertFalse(response.fallback)
        for item in response.items:
            for table in ITEM_TABLES:
                npt.assert_array_equal(item.embeddings[table],
                                       self.bundle.params[table_param(table)][item.attrs.index_for(table)])

    def test_successive_pages_differ(self):
        cloud = self.cloud()
        first, second = cloud.page(0), cloud.page(0)
        self.assertEqual(second.request_id, 'p0-1')
        self.assertNotEqual([i.item_id for i in first.items], [i.item_id for i in second.items])

    def test_unknown_user(self):
        with self.assertRaises(UnknownUserError):
            self.cloud().page(42)


class PersistedStoreTests(TestCase):
    def test_publish_persists_and_evicts_in_one_step(self):
        store = EmbeddingStore(retained_versions=3, persist=True)
        bundles = versioned_bundles(4)
        for bundle in bundles:
            store.publish_version(bundle)
        self.assertEqual(list(PublishedVersion.objects.values_list('version', flat=True)), [2, 3, 4])
        rows_per_version = sum(bundles[0].params[table_param(t)].shape[0] for t in ITEM_TABLES)
        self.assertEqual(EmbeddingRow.objects.count(), 3 * rows_per_version)
        self.assertEqual(PublishedVersion.objects.get(version=4).get_manifest()['version'], 4)

    def test_store_rebuilds_from_database(self):
        writer = EmbeddingStore(retained_versions=3, persist=True)
        rng = np.random.default_rng(0)
        bundles = versioned_bundles(2, fill=False)
        for bundle in bundles:
            for table in ITEM_TABLES:
                name = table_param(table)
                bundle.params[name][...] = rng.normal(size=bundle.params[name].shape)
            writer.publish_version(bundle)
        reader = EmbeddingStore.from_database(retained_versions=3)
        self.assertEqual(reader.versions(), [1, 2])
        for bundle in bundles:
            stored, fallback = reader.resolve(bundle.version)
            self.assertFalse(fallback)
            for table in ITEM_TABLES:
                npt.assert_array_equal(stored.tables[table], bundle.params[table_param(table)])
        self.assertEqual(set(reader.device_model(2).params), set(bundles[1].device_params()))
